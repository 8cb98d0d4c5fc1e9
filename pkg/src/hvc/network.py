"""Parameter storage and the encoder / pseudo-dynamic networks.

Modules here are stateless descriptions (names and hyperparameters); the
weights live in a :class:`ParameterStore`. That lets one architecture
object drive both the online store and its EMA target copy.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .exceptions import ShapeMismatch


class ParameterStore:
    """Named weight tensors with paired gradient buffers.

    Non-trainable state (batch-norm running statistics) lives in
    ``buffers``; it has no gradient but takes part in EMA updates and
    checkpoints.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def add_param(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_buffer(self, name, value):
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value, dtype=self.dtype)

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.buffers[name]

    def __contains__(self, name):
        return name in self.params or name in self.buffers

    def accumulate(self, name, grad):
        self.grads[name] += grad

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def tensors(self):
        """All tensors (params then buffers) in stable name order."""
        out = dict(sorted(self.params.items()))
        out.update(sorted(self.buffers.items()))
        return out

    def copy(self):
        return copy.deepcopy(self)

    def subset(self, names):
        """New store sharing the listed tensors (no copies)."""
        sub = ParameterStore(self.dtype)
        for n in names:
            if n in self.params:
                sub.params[n] = self.params[n]
                sub.grads[n] = self.grads[n]
            else:
                sub.buffers[n] = self.buffers[n]
        return sub

    def astype(self, dtype):
        out = ParameterStore(dtype)
        for n, v in self.params.items():
            out.add_param(n, v)
        for n, v in self.buffers.items():
            out.add_buffer(n, v)
        return out

    def num_parameters(self):
        return sum(v.size for v in self.params.values())


class Conv2D:
    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, padding=None):
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        self.name, self.in_ch, self.out_ch = name, in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.padding = (kernel - 1) // 2 if padding is None else padding

    def init(self, store, rng):
        fan_in = self.in_ch * self.kernel * self.kernel
        bound = np.sqrt(6.0 / fan_in)
        shape = (self.out_ch, self.in_ch, self.kernel, self.kernel)
        store.add_param(self.name + ".weight", rng.uniform(-bound, bound, size=shape))
        store.add_param(self.name + ".bias", np.zeros(self.out_ch))

    def forward(self, store, x, mode):
        return layers.conv2d_forward(
            x, store[self.name + ".weight"], store[self.name + ".bias"], self.stride, self.padding
        )

    def backward(self, store, dout, cache, need_dx=True, dx_channels=None):
        dx, dw, db = layers.conv2d_backward(dout, cache, need_dx, dx_channels)
        store.accumulate(self.name + ".weight", dw)
        store.accumulate(self.name + ".bias", db)
        return dx


class BatchNorm:
    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name, self.channels = name, channels
        self.momentum, self.eps = momentum, eps

    def init(self, store, rng):
        store.add_param(self.name + ".gamma", np.ones(self.channels))
        store.add_param(self.name + ".beta", np.zeros(self.channels))
        store.add_buffer(self.name + ".running_mean", np.zeros(self.channels))
        store.add_buffer(self.name + ".running_var", np.ones(self.channels))

    def forward(self, store, x, mode):
        # "batch": batch statistics without touching the running buffers
        return layers.batchnorm_forward(
            x,
            store[self.name + ".gamma"],
            store[self.name + ".beta"],
            store[self.name + ".running_mean"],
            store[self.name + ".running_var"],
            mode="eval" if mode == "eval" else "train",
            momentum=self.momentum,
            eps=self.eps,
            update_stats=(mode == "train"),
        )

    def backward(self, store, dout, cache, need_dx=True):
        dx, dgamma, dbeta = layers.batchnorm_backward(dout, cache)
        store.accumulate(self.name + ".gamma", dgamma)
        store.accumulate(self.name + ".beta", dbeta)
        return dx


class ReLU:
    def init(self, store, rng):
        pass

    def forward(self, store, x, mode):
        return layers.relu_forward(x)

    def backward(self, store, dout, cache, need_dx=True):
        return layers.relu_backward(dout, cache)


class L2Norm:
    def init(self, store, rng):
        pass

    def forward(self, store, x, mode):
        return layers.l2norm_forward(x)

    def backward(self, store, dout, cache, need_dx=True):
        return layers.l2norm_backward(dout, cache)


class Sequential:
    def __init__(self, modules):
        self.modules = list(modules)

    def init(self, store, rng):
        for m in self.modules:
            m.init(store, rng)

    def forward(self, store, x, mode):
        caches = []
        for m in self.modules:
            x, c = m.forward(store, x, mode)
            caches.append(c)
        return x, caches

    def backward(self, store, dout, caches, need_dx=True, dx_channels=None):
        for i in range(len(self.modules) - 1, 0, -1):
            dout = self.modules[i].backward(store, dout, caches[i])
        first = self.modules[0]
        if dx_channels is not None:
            return first.backward(store, dout, caches[0], need_dx, dx_channels)
        return first.backward(store, dout, caches[0], need_dx)


def projection_head(prefix, in_ch, hidden, out_ch):
    """Three 1x1 convs with BN+ReLU between neighbours."""
    return [
        Conv2D(f"{prefix}.0.conv", in_ch, hidden, kernel=1),
        BatchNorm(f"{prefix}.0.bn", hidden),
        ReLU(),
        Conv2D(f"{prefix}.1.conv", hidden, hidden, kernel=1),
        BatchNorm(f"{prefix}.1.bn", hidden),
        ReLU(),
        Conv2D(f"{prefix}.2.conv", hidden, out_ch, kernel=1),
    ]


@dataclass
class NetConfig:
    in_channels: int = 3
    backbone_channels: tuple = (32, 64, 64)
    backbone_kernel: int = 3
    backbone_stride: int = 2
    hidden_channels: int = 256
    out_channels: int = 256
    pseudo_hidden: int = None  # defaults to hidden_channels

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        if self.pseudo_hidden is None:
            self.pseudo_hidden = self.hidden_channels

    def feature_size(self, view_size):
        s = view_size
        pad = (self.backbone_kernel - 1) // 2
        for _ in self.backbone_channels:
            s = (s + 2 * pad - self.backbone_kernel) // self.backbone_stride + 1
        return s

    def to_dict(self):
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d


class EncoderNet:
    """Backbone -> projector -> (predictor) -> l2 normalization."""

    def __init__(self, config: NetConfig = None, with_predictor=True, seed=0,
                 dtype=np.float32, store=None):
        self.config = config = config or NetConfig()
        self.with_predictor = with_predictor
        mods = []
        ch = config.in_channels
        for i, out in enumerate(config.backbone_channels):
            mods += [
                Conv2D(f"backbone.{i}.conv", ch, out, config.backbone_kernel, config.backbone_stride),
                BatchNorm(f"backbone.{i}.bn", out),
                ReLU(),
            ]
            ch = out
        mods += projection_head("projector", ch, config.hidden_channels, config.out_channels)
        if with_predictor:
            mods += projection_head(
                "predictor", config.out_channels, config.hidden_channels, config.out_channels
            )
        mods.append(L2Norm())
        self.body = Sequential(mods)
        if store is None:
            store = ParameterStore(dtype)
            self.body.init(store, np.random.default_rng(seed))
        self.store = store

    def forward(self, x, mode="train"):
        """``x``: (N, H, W, 3) views. Returns unit-norm (N, h, w, C) features."""
        x = np.asarray(x, dtype=self.store.dtype)
        if x.ndim != 4 or x.shape[-1] != self.config.in_channels:
            raise ShapeMismatch(f"expected (N, H, W, {self.config.in_channels}) input, got {x.shape}")
        return self.body.forward(self.store, x, mode)

    def backward(self, dout, cache):
        return self.body.backward(self.store, dout, cache, need_dx=False)

    def target_twin(self):
        """Predictor-free copy holding the matching backbone/projector tensors."""
        names = [n for n in self.store.tensors() if not n.startswith("predictor.")]
        twin = EncoderNet(self.config, with_predictor=False, store=self.store.subset(names).copy())
        return twin

    def transform(self, images, batch_size=32):
        """Eval-mode features (N, C, h, w) for (N, H, W, 3) images."""
        images = np.asarray(images)
        outs = []
        for i in range(0, len(images), batch_size):
            f, _ = self.forward(images[i:i + batch_size], mode="eval")
            outs.append(f)
        return np.concatenate(outs).transpose(0, 3, 1, 2)


class PseudoDynamicNet:
    """Two 3x3 convs (BN+ReLU between) mapping a feature pair to a 2-channel field."""

    def __init__(self, feat_channels=256, hidden=256, seed=1, dtype=np.float32, store=None):
        self.feat_channels, self.hidden = feat_channels, hidden
        self.body = Sequential([
            Conv2D("pseudo.conv_a", 2 * feat_channels, hidden, kernel=3),
            BatchNorm("pseudo.bn_a", hidden),
            ReLU(),
            Conv2D("pseudo.conv_b", hidden, 2, kernel=3),
        ])
        if store is None:
            store = ParameterStore(dtype)
            self.body.init(store, np.random.default_rng(seed))
        self.store = store

    def forward(self, fa, fb, mode="train"):
        """Signal from ``fa`` towards ``fb``; argument order is the direction."""
        if fa.shape != fb.shape:
            raise ShapeMismatch(f"pseudo-dynamic inputs differ: {fa.shape} vs {fb.shape}")
        x = np.concatenate([fa, fb], axis=-1).astype(self.store.dtype, copy=False)
        return self.body.forward(self.store, x, mode)

    def backward(self, dout, cache, wrt="both"):
        """Gradients w.r.t. the inputs named by ``wrt`` ("a", "b" or "both").

        Returns ``(d_fa, d_fb)``; the entry not requested is ``None``.
        """
        c = self.feat_channels
        sel = {"a": slice(0, c), "b": slice(c, 2 * c), "both": None}[wrt]
        dx = self.body.backward(self.store, dout, cache, dx_channels=sel)
        if wrt == "a":
            return dx, None
        if wrt == "b":
            return None, dx
        return dx[..., :c], dx[..., c:]


def encode_online(net: EncoderNet, view, mode="eval"):
    """Single (H, W, 3) view -> normalized (C, h, w) features."""
    f, _ = net.forward(np.asarray(view)[None], mode=mode)
    return f[0].transpose(2, 0, 1)


def encode_target(net: EncoderNet, view, mode="eval"):
    if net.with_predictor:
        raise ValueError("target encoder must not carry a predictor head")
    f, _ = net.forward(np.asarray(view)[None], mode=mode)
    return f[0].transpose(2, 0, 1)


def pseudo_dynamic(net: PseudoDynamicNet, fa, fb, mode="eval"):
    """(C, h, w) feature pair -> (2, h, w) signal."""
    fa = np.asarray(fa).transpose(1, 2, 0)[None]
    fb = np.asarray(fb).transpose(1, 2, 0)[None]
    m, _ = net.forward(fa, fb, mode=mode)
    return m[0].transpose(2, 0, 1)
