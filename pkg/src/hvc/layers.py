"""Forward/backward kernels for the layers the encoders are built from.

All arrays are channels-last (N, H, W, C). Every ``*_forward`` returns
``(out, cache)``; the matching ``*_backward`` consumes the upstream
gradient and that cache.
"""
import numpy as np

from .exceptions import DegenerateBatch, ShapeMismatch

L2_EPS = 1e-12


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` (N,H,W,Cin) with ``w`` (Cout,Cin,kh,kw)."""
    n, h, wd, cin = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeMismatch(f"conv expects {wcin} input channels, got {cin}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.reshape(-1, cin)
    else:
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        cols = np.empty((n, ho, wo, kh, kw, cin), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
        cols = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols @ wmat
    out += b
    cache = (x.shape, cols, wmat, w.shape, stride, pad)
    return out.reshape(n, ho, wo, cout), cache


def conv2d_backward(dout, cache, need_dx=True, dx_channels=None):
    """Gradients w.r.t. input, weight and bias.

    ``dx_channels`` (a slice) restricts the input gradient to a channel
    range; the returned ``dx`` then only covers those channels.
    """
    xshape, cols, wmat, wshape, stride, pad = cache
    n, h, wd, cin = xshape
    cout, _, kh, kw = wshape
    ho, wo = dout.shape[1:3]
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    if dx_channels is not None:
        wmat = wmat.reshape(kh, kw, cin, cout)[:, :, dx_channels, :]
        cin = wmat.shape[2]
        wmat = wmat.reshape(kh * kw * cin, cout)
        xshape = (n, h, wd, cin)
    dcols = d2 @ wmat.T
    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        return dcols.reshape(xshape), dw, db
    dcols = dcols.reshape(n, ho, wo, kh, kw, cin)
    dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    if pad:
        dxp = dxp[:, pad:-pad, pad:-pad, :]
    return dxp, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel batch normalization over (N, H, W).

    ``mode="train"`` normalizes with batch statistics and, when
    ``update_stats`` is set, moves the running buffers in place.
    ``mode="eval"`` uses the running buffers only.
    """
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeMismatch(f"batchnorm expects {gamma.shape[0]} channels, got {x.shape[-1]}")
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x - running_mean) * inv_std
        return gamma * xhat + beta, ("eval", gamma, inv_std, xhat)
    axes = (0, 1, 2)
    count = x.shape[0] * x.shape[1] * x.shape[2]
    mu = x.mean(axis=axes)
    xc = x - mu
    var = (xc * xc).mean(axis=axes)
    if not np.all(np.isfinite(var)):
        raise DegenerateBatch("non-finite batch variance")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    if update_stats:
        unbiased = var * (count / max(count - 1, 1))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    return gamma * xhat + beta, ("train", gamma, inv_std, xhat)


def batchnorm_backward(dout, cache):
    if cache[0] == "eval":
        _, gamma, inv_std, xhat = cache
        axes = (0, 1, 2)
        # running stats are constants here
        return dout * gamma * inv_std, (dout * xhat).sum(axis=axes), dout.sum(axis=axes)
    _, gamma, inv_std, xhat = cache
    axes = (0, 1, 2)
    count = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    dx = (inv_std / count) * (
        count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def l2norm_forward(x, eps=L2_EPS):
    """Scale each location's channel vector to unit length."""
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    scale = norm + eps
    return x / scale, (x, norm, scale)


def l2norm_backward(dout, cache):
    x, norm, scale = cache
    proj = np.sum(x * dout, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    return dout / scale - x * proj / (safe * scale * scale)
