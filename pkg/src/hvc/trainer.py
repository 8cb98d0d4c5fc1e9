"""Self-supervised training loop: crops -> encoders -> hybrid loss -> Adam -> EMA."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import NonFiniteGradient, RetriesExhausted, StoreMismatch
from .geometry import (
    CropConfig,
    crop_view,
    distance_matrix,
    positive_mask,
    sample_crop_pair,
    warp_coords,
)
from .losses import LossValue, hybrid_loss_batched
from .network import EncoderNet, NetConfig, PseudoDynamicNet

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "loss", "static_term", "dynamic_term", "m", "lr")


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 20
    r: float = 0.1
    alpha: float = 1.0
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    m0: float = 0.99
    momentum_schedule: str = "cosine"
    fast: bool = True

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.r < 1.0:
            raise ValueError(f"positive radius must lie in (0, 1), got {self.r}")
        if self.alpha < 0 or self.lr < 0:
            raise ValueError("alpha and lr must be non-negative")
        if not 0.0 <= self.m0 <= 1.0:
            raise ValueError("m0 must lie in [0, 1]")
        if self.momentum_schedule not in ("cosine", "linear", "constant"):
            raise ValueError(f"unknown momentum schedule {self.momentum_schedule!r}")
        return self


def config_digest(*configs):
    payload = json.dumps([asdict(c) for c in configs], sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).digest()


# -- EMA ---------------------------------------------------------------------

def ema_update(target, online, m):
    """``target <- m * target + (1 - m) * online`` for every tensor, in place.

    Running batch-norm statistics are included. The stores must hold
    exactly the same names and shapes.
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    t_all, o_all = target.tensors(), online.tensors()
    if set(t_all) != set(o_all):
        missing = sorted(set(t_all) ^ set(o_all))
        raise StoreMismatch(f"stores differ in names: {missing[:5]}")
    for name, tv in t_all.items():
        ov = o_all[name]
        if tv.shape != ov.shape:
            raise StoreMismatch(f"{name}: shape {tv.shape} vs {ov.shape}")
        if m == 1.0:
            continue
        tv *= m
        tv += (1.0 - m) * ov
    return target


def momentum_at(step, total_steps, m0=0.99, schedule="cosine"):
    """Momentum coefficient rising from ``m0`` at step 0 to 1 at ``total_steps``."""
    if total_steps <= 0:
        return 1.0
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    frac = step / total_steps
    if schedule == "cosine":
        return 1.0 - (1.0 - m0) * (math.cos(math.pi * frac) + 1.0) / 2.0
    if schedule == "linear":
        return m0 + (1.0 - m0) * frac
    if schedule == "constant":
        return m0
    raise ValueError(f"unknown schedule {schedule!r}")


# -- Adam --------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(opt: OptimizerState, stores):
    """One bias-corrected Adam update over ``stores`` (``{prefix: ParameterStore}``).

    Gradients are checked for finiteness before anything is modified and are
    zeroed afterwards.
    """
    for prefix, store in stores.items():
        for name, g in store.grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"{prefix}/{name}")
    opt.step_count += 1
    t = opt.step_count
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for prefix, store in stores.items():
        for name in sorted(store.params):
            p, g = store.params[name], store.grads[name]
            key = f"{prefix}/{name}"
            if key not in opt.m:
                opt.m[key] = np.zeros_like(p)
                opt.v[key] = np.zeros_like(p)
            if opt.weight_decay:
                g = g + opt.weight_decay * p
            m, v = opt.m[key], opt.v[key]
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * (g * g)
            p -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype, copy=False)
        store.zero_grad()


# -- training ----------------------------------------------------------------

def prepare_pair(image, rng, crop_cfg, feat_size):
    """Two resized views plus their positive-mask geometry for one image."""
    h, w = image.shape[:2]
    c1, c2 = sample_crop_pair(h, w, rng, crop_cfg)
    g1 = warp_coords(c1, feat_size, feat_size, h, w)
    g2 = warp_coords(c2, feat_size, feat_size, h, w)
    return crop_view(image, c1), crop_view(image, c2), g1, g2


class HVCTrainer:
    """Owns the online, target and pseudo-dynamic parameter stores."""

    def __init__(self, train_cfg=None, net_cfg=None, crop_cfg=None, dtype=np.float32):
        self.cfg = (train_cfg or TrainConfig()).validate()
        self.net_cfg = net_cfg or NetConfig()
        self.crop_cfg = (crop_cfg or CropConfig()).validate()
        self.dtype = np.dtype(dtype)
        seed = self.cfg.seed
        self.online = EncoderNet(self.net_cfg, with_predictor=True, seed=seed, dtype=dtype)
        self.target = self.online.target_twin()
        self.pseudo = PseudoDynamicNet(
            self.net_cfg.out_channels, self.net_cfg.pseudo_hidden, seed=seed + 1, dtype=dtype
        )
        self.opt = OptimizerState(
            lr=self.cfg.lr, beta1=self.cfg.beta1, beta2=self.cfg.beta2,
            eps=self.cfg.eps, weight_decay=self.cfg.weight_decay,
        )
        self.rng = np.random.default_rng(seed)
        self.step = 0
        self.total_steps = 0
        self.m = self.cfg.m0
        self.feat_size = self.net_cfg.feature_size(self.crop_cfg.view_size)

    @property
    def digest(self):
        return config_digest(self.cfg, self.net_cfg, self.crop_cfg)

    def _online_shadow(self):
        return self.online.store.subset(list(self.target.store.tensors()))

    def loss_and_grad(self, v1, v2, A12):
        """Batch-mean symmetric hybrid loss; accumulates grads into online+pseudo.

        ``v1``, ``v2``: (B, S, S, 3) views; ``A12``: (B, HW, HW) masks with
        rows indexing view-1 cells.
        """
        alpha = self.cfg.alpha
        b = v1.shape[0]
        views = np.concatenate([v1, v2]).astype(self.dtype, copy=False)
        out, cache = self.online.forward(views, mode="train")
        tgt, _ = self.target.forward(views, mode="batch")
        h, w, c = out.shape[1:]
        o = out.reshape(2, b, h * w, c)
        t = tgt.reshape(2, b, h * w, c)
        A12 = A12.astype(self.dtype, copy=False)
        masks = (A12, A12.transpose(0, 2, 1))
        d_out = np.zeros_like(o)
        total = LossValue(0.0, 0.0, 0.0, 0)
        for k in (0, 1):
            ok, tk = o[k], t[1 - k]
            ok_map, tk_map = ok.reshape(b, h, w, c), tk.reshape(b, h, w, c)
            m1, c_fwd = self.pseudo.forward(ok_map, tk_map, mode="train")
            m2, c_bwd = self.pseudo.forward(tk_map, ok_map, mode="train")
            tot, st, dy, do, _, dm1, dm2 = hybrid_loss_batched(
                ok, tk, m1.reshape(b, h * w, 2), m2.reshape(b, h * w, 2), masks[k], alpha
            )
            scale = 1.0 / b
            da, _ = self.pseudo.backward(dm1.reshape(b, h, w, 2) * scale, c_fwd, wrt="a")
            _, db = self.pseudo.backward(dm2.reshape(b, h, w, 2) * scale, c_bwd, wrt="b")
            d_out[k] += do * scale + da.reshape(b, h * w, c) + db.reshape(b, h * w, c)
            total = total + LossValue(
                float(tot.mean()), float(st.mean()), float(dy.mean()), int(masks[k].sum())
            )
        self.online.backward(d_out.reshape(2 * b, h, w, c), cache)
        return total

    def make_batch(self, images):
        v1s, v2s, masks = [], [], []
        for img in images:
            try:
                v1, v2, g1, g2 = prepare_pair(img, self.rng, self.crop_cfg, self.feat_size)
            except RetriesExhausted:
                log.debug("skipping image: no overlapping crop pair")
                continue
            v1s.append(v1)
            v2s.append(v2)
            masks.append(positive_mask(distance_matrix(g1, g2), self.cfg.r).values)
        if not v1s:
            return None
        return np.stack(v1s), np.stack(v2s), np.stack(masks)

    def train_step(self, images):
        batch = self.make_batch(images)
        if batch is None:
            return None
        loss = self.loss_and_grad(*batch)
        # target grads stay untouched: only online + pseudo are optimized
        adam_step(self.opt, {"online": self.online.store, "pseudo": self.pseudo.store})
        self.m = momentum_at(
            min(self.step, self.total_steps), max(self.total_steps, 1),
            self.cfg.m0, self.cfg.momentum_schedule,
        )
        ema_update(self.target.store, self._online_shadow(), self.m)
        record = {
            "step": self.step,
            "loss": loss.total,
            "static_term": loss.static_term,
            "dynamic_term": loss.dynamic_term,
            "m": self.m,
            "lr": self.opt.lr,
        }
        self.step += 1
        return record

    def batches_per_epoch(self, n_images):
        return max(1, n_images // self.cfg.batch_size)

    def epoch_order(self, epoch, n_images):
        return np.random.default_rng([self.cfg.seed, epoch]).permutation(n_images)

    def fit(self, images, log_path=None, checkpoint_path=None, max_steps=None, progress=None):
        """Run ``epochs x batches_per_epoch`` steps, resuming from ``self.step``.

        Returns the list of per-step records. On a non-finite gradient the last
        good state is written to ``checkpoint_path`` (when given) and the
        error re-raised.
        """
        from .checkpoint import save_checkpoint

        images = np.asarray(images)
        if len(images) == 0:
            raise ValueError("training needs at least one image")
        nb = self.batches_per_epoch(len(images))
        self.total_steps = self.cfg.epochs * nb
        end = self.total_steps if max_steps is None else min(self.total_steps, self.step + max_steps)
        records = []
        writer, fh = None, None
        if log_path is not None:
            new = not os.path.exists(log_path) or self.step == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                writer.writeheader()
        try:
            while self.step < end:
                epoch, b = divmod(self.step, nb)
                order = self.epoch_order(epoch, len(images))
                idx = order[b * self.cfg.batch_size:(b + 1) * self.cfg.batch_size]
                if len(idx) == 0:
                    idx = order[: self.cfg.batch_size]
                try:
                    rec = self.train_step(images[idx])
                except NonFiniteGradient:
                    if checkpoint_path is not None:
                        self.online.store.zero_grad()
                        self.pseudo.store.zero_grad()
                        save_checkpoint(checkpoint_path, self)
                    raise
                if rec is None:
                    self.step += 1
                    continue
                records.append(rec)
                if writer is not None:
                    writer.writerow(rec)
                if progress is not None:
                    progress(rec)
        finally:
            if fh is not None:
                fh.close()
        return records
