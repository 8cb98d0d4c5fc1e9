"""Central finite-difference checks for every hand-written backward pass.

Each check draws random small shapes, takes a random linear readout of the
layer output as the scalar objective, and compares the analytic gradient
against ``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate. A
coordinate whose perturbation flips any ReLU pattern sits on a kink and is
redrawn. A composite trial whose base point is itself degenerate (a
normalized vector of near-zero length, or a kink that every perturbation
crosses) is redrawn as a whole.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import layers
from .geometry import CropConfig
from .network import EncoderNet, NetConfig, PseudoDynamicNet
from .trainer import HVCTrainer, TrainConfig

STEP = 1e-5
LAYER_TOL = 1e-6
E2E_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    trials: int
    max_rel_error: float
    tol: float

    @property
    def passed(self):
        return self.max_rel_error < self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<22} trials={self.trials:<3d} max_rel_err={self.max_rel_error:.3e} tol={self.tol:.0e}"


def rel_error(a, b, floor=1e-3):
    """``|a - b| / max(|a|, |b|, floor)`` in the l2 norm.

    The floor keeps structurally zero gradients (a conv bias feeding a
    train-mode batch norm) from dividing round-off by zero.
    """
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


MIN_NORM = 1e-2


class KinkError(RuntimeError):
    pass


class _Trace:
    def __init__(self):
        self.masks = []
        self.min_norm = np.inf


@contextlib.contextmanager
def relu_trace():
    """Record ReLU patterns and the smallest l2norm input inside the block."""
    trace = _Trace()
    relu, l2 = layers.relu_forward, layers.l2norm_forward

    def traced_relu(x):
        out, mask = relu(x)
        trace.masks.append(mask.copy())
        return out, mask

    def traced_l2(x, *args, **kw):
        out, cache = l2(x, *args, **kw)
        trace.min_norm = min(trace.min_norm, float(cache[1].min()))
        return out, cache

    layers.relu_forward, layers.l2norm_forward = traced_relu, traced_l2
    try:
        yield trace
    finally:
        layers.relu_forward, layers.l2norm_forward = relu, l2


def min_l2_input(fn):
    with relu_trace() as tr:
        fn()
    return tr.min_norm


def _pattern(fn):
    with relu_trace() as tr:
        val = fn()
    return val, tr.masks


def _same(p, q):
    return len(p) == len(q) and all(np.array_equal(a, b) for a, b in zip(p, q))


def numeric_grad(f, arr, coords, h=STEP, rng=None, max_redraw=50):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` at flat ``coords``.

    ``arr`` is perturbed in place and restored. Returns ``(coords, values)``;
    coordinates landing on a ReLU kink are replaced by fresh random ones.
    """
    flat = arr.reshape(-1)
    _, base = _pattern(f)
    used, vals = [], []
    pool = list(coords)
    redraws = 0
    while pool:
        i = pool.pop()
        old = flat[i]
        flat[i] = old + h
        fp, pp = _pattern(f)
        flat[i] = old - h
        fm, pm = _pattern(f)
        flat[i] = old
        if not (_same(pp, base) and _same(pm, base)):
            redraws += 1
            if redraws > max_redraw:
                raise KinkError("too many coordinates on ReLU kinks")
            if rng is not None:
                pool.append(int(rng.integers(flat.size)))
            continue
        used.append(i)
        vals.append((fp - fm) / (2 * h))
    return np.array(used, dtype=int), np.array(vals)


def _pick(rng, size, limit):
    if limit is None or size <= limit:
        return np.arange(size)
    return rng.choice(size, size=limit, replace=False)


def check_conv(trials=20, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, (k - 1) // 2 + 1))
        size = int(rng.integers(4, 7))
        x = rng.standard_normal((n, size, size, cin))
        w = rng.standard_normal((cout, cin, k, k))
        b = rng.standard_normal(cout)
        out, _ = layers.conv2d_forward(x, w, b, stride, pad)
        R = rng.standard_normal(out.shape)

        def f():
            return float(np.sum(layers.conv2d_forward(x, w, b, stride, pad)[0] * R))

        _, cache = layers.conv2d_forward(x, w, b, stride, pad)
        dx, dw, db = layers.conv2d_backward(R, cache)
        for arr, g in ((x, dx), (w, dw), (b, db)):
            idx, num = numeric_grad(f, arr, _pick(rng, arr.size, 40), rng=rng)
            worst = max(worst, rel_error(g.reshape(-1)[idx], num))
    return CheckResult("conv2d", trials, worst, LAYER_TOL)


def check_batchnorm(trials=20, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        mode = "train" if t % 2 == 0 else "eval"
        c = int(rng.integers(1, 5))
        x = rng.standard_normal((int(rng.integers(1, 4)), 3, 3, c)) * 2 + 0.5
        gamma, beta = rng.standard_normal(c), rng.standard_normal(c)
        rm, rv = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

        def f():
            out, _ = layers.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), mode)
            return float(np.sum(out * R))

        out, cache = layers.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), mode)
        R = rng.standard_normal(out.shape)
        dx, dg, dbt = layers.batchnorm_backward(R, cache)
        for arr, g in ((x, dx), (gamma, dg), (beta, dbt)):
            idx, num = numeric_grad(f, arr, _pick(rng, arr.size, 40), rng=rng)
            worst = max(worst, rel_error(g.reshape(-1)[idx], num))
    return CheckResult("batchnorm", trials, worst, LAYER_TOL)


def check_relu(trials=20, seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((2, 3, 3, 4))
        x[np.abs(x) < 1e-2] = 0.5  # stay away from the kink
        R = rng.standard_normal(x.shape)

        def f():
            return float(np.sum(layers.relu_forward(x)[0] * R))

        _, mask = layers.relu_forward(x)
        dx = layers.relu_backward(R, mask)
        idx, num = numeric_grad(f, x, np.arange(x.size))
        worst = max(worst, rel_error(dx.reshape(-1)[idx], num))
    return CheckResult("relu", trials, worst, LAYER_TOL)


def check_l2norm(trials=20, seed=3):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.standard_normal((2, 3, 3, int(rng.integers(2, 6))))
        R = rng.standard_normal(x.shape)

        def f():
            return float(np.sum(layers.l2norm_forward(x)[0] * R))

        _, cache = layers.l2norm_forward(x)
        dx = layers.l2norm_backward(R, cache)
        idx, num = numeric_grad(f, x, np.arange(x.size))
        worst = max(worst, rel_error(dx.reshape(-1)[idx], num))
    return CheckResult("l2norm", trials, worst, LAYER_TOL)


def _check_store(f, store, rng, per_tensor):
    worst = 0.0
    analytic = {n: g.copy() for n, g in store.grads.items()}
    for name, p in store.params.items():
        idx, num = numeric_grad(f, p, _pick(rng, p.size, per_tensor), rng=rng)
        worst = max(worst, rel_error(analytic[name].reshape(-1)[idx], num))
    return worst


def check_pseudo(trials=20, seed=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        c, hidden = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        net = PseudoDynamicNet(c, hidden, seed=t, dtype=np.float64)
        fa = rng.standard_normal((2, 4, 4, c))
        fb = rng.standard_normal((2, 4, 4, c))
        out, cache = net.forward(fa, fb)
        R = rng.standard_normal(out.shape)

        def f():
            return float(np.sum(net.forward(fa, fb)[0] * R))

        net.store.zero_grad()
        da, db = net.backward(R, cache)
        worst = max(worst, _check_store(f, net.store, rng, 12))
        for arr, g in ((fa, da), (fb, db)):
            idx, num = numeric_grad(f, arr, _pick(rng, arr.size, 24), rng=rng)
            worst = max(worst, rel_error(g.reshape(-1)[idx], num))
    return CheckResult("pseudo_dynamic", trials, worst, LAYER_TOL)


TOY_NET = dict(backbone_channels=(4, 4), hidden_channels=12, out_channels=5)
MAX_TRIAL_REDRAWS = 20


def _composite(trials, seed, draw):
    """Run ``draw(rng, t) -> rel error`` ``trials`` times, redrawing degenerate ones."""
    rng = np.random.default_rng(seed)
    worst, done, redrawn = 0.0, 0, 0
    while done < trials:
        try:
            worst = max(worst, draw(rng, done + redrawn))
            done += 1
        except KinkError:
            redrawn += 1
            if redrawn > MAX_TRIAL_REDRAWS:
                raise
    return worst


def check_encoder(trials=20, seed=5):
    """Full online chain (backbone, projector, predictor, l2norm)."""

    def draw(rng, t):
        net = EncoderNet(NetConfig(**TOY_NET), with_predictor=True, seed=t, dtype=np.float64)
        x = rng.uniform(0, 1, (2, 16, 16, 3))
        out, cache = net.forward(x)
        R = rng.standard_normal(out.shape)

        def f():
            return float(np.sum(net.forward(x)[0] * R))

        if min_l2_input(f) < MIN_NORM:
            raise KinkError("near-zero vector before l2norm")
        net.store.zero_grad()
        net.backward(R, cache)
        return _check_store(f, net.store, rng, 6)

    return CheckResult("encoder_online", trials, _composite(trials, seed, draw), E2E_TOL)


def toy_trainer(seed=0, alpha=1.0, r=0.3):
    return HVCTrainer(
        TrainConfig(seed=seed, alpha=alpha, r=r, batch_size=2),
        NetConfig(**TOY_NET),
        CropConfig(view_size=16, min_side=16),
        dtype=np.float64,
    )


def toy_batch(trainer, rng, batch=2, size=32):
    images = rng.uniform(0, 1, (batch, size, size, 3))
    return trainer.make_batch(images)


def check_symmetric_loss(trials=20, seed=6):
    """Whole symmetric hybrid objective w.r.t. online and pseudo parameters."""

    def draw(rng, t):
        tr = toy_trainer(seed=t, alpha=float(rng.uniform(0.1, 2.0)))
        v1, v2, A = toy_batch(tr, rng)

        def f():
            tr.online.store.zero_grad()
            tr.pseudo.store.zero_grad()
            return tr.loss_and_grad(v1, v2, A).total

        if min_l2_input(f) < MIN_NORM:
            raise KinkError("near-zero vector before l2norm")
        analytic_online = {n: g.copy() for n, g in tr.online.store.grads.items()}
        analytic_pseudo = {n: g.copy() for n, g in tr.pseudo.store.grads.items()}
        if any(np.any(g) for g in tr.target.store.grads.values()):
            return np.inf
        worst = 0.0
        for store, analytic in ((tr.online.store, analytic_online), (tr.pseudo.store, analytic_pseudo)):
            for name, p in store.params.items():
                idx, num = numeric_grad(f, p, _pick(rng, p.size, 4), rng=rng, max_redraw=10)
                worst = max(worst, rel_error(analytic[name].reshape(-1)[idx], num))
        return worst

    return CheckResult("symmetric_hybrid_loss", trials, _composite(trials, seed, draw), E2E_TOL)


ALL_CHECKS = (check_conv, check_batchnorm, check_relu, check_l2norm, check_pseudo,
              check_encoder, check_symmetric_loss)


def run_all(trials=20):
    return [check(trials=trials) for check in ALL_CHECKS]
