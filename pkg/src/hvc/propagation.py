"""Affinity-based label propagation through a video."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .exceptions import ShapeMismatch


@dataclass
class PropagationConfig:
    n_context: int = 5
    top_k: int = 10
    temperature: float = 0.07
    radius: float = None  # spatial locality in feature cells; None disables

    def validate(self):
        if self.n_context < 0 or self.top_k < 1 or self.temperature <= 0:
            raise ValueError(f"invalid propagation config {self}")
        return self


class ContextBank:
    """First-frame anchor plus a FIFO of the last ``n`` predictions."""

    def __init__(self, anchor_feat, anchor_label, n_context=5):
        self.anchor = (np.asarray(anchor_feat), np.asarray(anchor_label))
        self.recent = deque(maxlen=n_context) if n_context > 0 else deque(maxlen=0)

    def push(self, feat, label):
        if self.recent.maxlen:
            self.recent.append((np.asarray(feat), np.asarray(label)))

    def entries(self):
        return [self.anchor, *self.recent]

    def __len__(self):
        return 1 + len(self.recent)


def downsample_mask(hard, feat_h, feat_w, n_classes=None):
    """Per-cell class histogram of an (H, W) label image -> (K, h, w) soft labels."""
    hard = np.asarray(hard, dtype=np.int64)
    H, W = hard.shape
    K = int(hard.max()) + 1 if n_classes is None else n_classes
    if K < 1:
        raise ValueError("need at least one class")
    cy = (np.arange(H) * feat_h) // H
    cx = (np.arange(W) * feat_w) // W
    cell = cy[:, None] * feat_w + cx[None, :]
    counts = np.zeros((K, feat_h * feat_w))
    np.add.at(counts, (hard.ravel(), cell.ravel()), 1.0)
    counts /= counts.sum(axis=0, keepdims=True)
    return counts.reshape(K, feat_h, feat_w)


def upsample_soft(soft, H, W):
    """Bilinear (pixel-center aligned) resize of (K, h, w) soft labels."""
    K, h, w = soft.shape
    ys = (np.arange(H) + 0.5) * h / H - 0.5
    xs = (np.arange(W) + 0.5) * w / W - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([
        ndimage.map_coordinates(soft[k], [yy, xx], order=1, mode="nearest") for k in range(K)
    ])


def hard_labels(soft, H, W):
    """Upsample then argmax; ties go to the lower class id."""
    return np.argmax(upsample_soft(soft, H, W), axis=0)


def _cell_positions(h, w):
    yy, xx = np.mgrid[0:h, 0:w]
    return np.stack([yy.ravel(), xx.ravel()], axis=1).astype(float)


def propagate_frame(query_feat, bank: ContextBank, cfg: PropagationConfig = None):
    """Soft labels (K, h, w) for a query frame from the context bank.

    Each query location keeps its ``top_k`` most similar reference
    locations, softmaxes their similarities at ``temperature`` and averages
    the corresponding reference labels.
    """
    cfg = (cfg or PropagationConfig()).validate()
    query_feat = np.asarray(query_feat)
    C, h, w = query_feat.shape
    feats, labels = [], []
    for f, lab in bank.entries():
        if f.shape != query_feat.shape:
            raise ShapeMismatch(f"reference features {f.shape} vs query {query_feat.shape}")
        if lab.shape[1:] != (h, w):
            raise ShapeMismatch(f"reference labels {lab.shape} vs grid {(h, w)}")
        feats.append(f.reshape(C, -1))
        labels.append(lab.reshape(lab.shape[0], -1))
    ref = np.concatenate(feats, axis=1)  # (C, R)
    lab = np.concatenate(labels, axis=1)  # (K, R)
    q = query_feat.reshape(C, -1).T  # (hw, C)
    sims = (q @ ref).astype(np.float64)  # (hw, R)
    if cfg.radius is not None:
        pos = _cell_positions(h, w)
        d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
        far = np.tile(d > cfg.radius, (1, len(feats)))
        sims = np.where(far, -np.inf, sims)
    R = sims.shape[1]
    k = min(cfg.top_k, R)
    if k < R:
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        kept = np.take_along_axis(sims, order, axis=1)
    else:
        order = np.broadcast_to(np.arange(R), sims.shape)
        kept = sims
    z = kept / cfg.temperature
    z = z - z.max(axis=1, keepdims=True)
    wts = np.exp(z)
    wts /= wts.sum(axis=1, keepdims=True)
    out = np.einsum("qk,cqk->cq", wts, lab[:, order])
    return out.reshape(lab.shape[0], h, w)


def _encode(model, frames):
    if callable(getattr(model, "transform", None)):
        return model.transform(frames)
    return model(frames)


def run_video(model, frames, first_mask, cfg: PropagationConfig = None, features=None,
              extra_features=None):
    """Propagate ``first_mask`` through ``frames``.

    Parameters
    ----------
    model : object with ``transform(frames) -> (T, C, h, w)`` or a callable
        Frame encoder, used in eval mode. Ignored when ``features`` is given.
    frames : (T, H, W, 3) array
    first_mask : (H, W) int array of class ids (0 = background)
    features : optional precomputed (T, C, h, w) unit-norm features
    extra_features : optional (T, C2, h, w) features concatenated before
        re-normalization (off by default)

    Returns
    -------
    hard : (T, H, W) int masks, frame 0 equal to ``first_mask``
    soft : list of (K, h, w) soft labels
    """
    cfg = (cfg or PropagationConfig()).validate()
    frames = np.asarray(frames)
    first_mask = np.asarray(first_mask, dtype=np.int64)
    T, H, W = frames.shape[:3]
    if T < 2:
        raise ValueError("a video needs at least 2 frames")
    if first_mask.shape != (H, W):
        raise ShapeMismatch(f"mask {first_mask.shape} vs frames {(H, W)}")
    feats = np.asarray(features if features is not None else _encode(model, frames), dtype=np.float64)
    if extra_features is not None:
        feats = np.concatenate([feats, np.asarray(extra_features, dtype=np.float64)], axis=1)
        feats /= np.linalg.norm(feats, axis=1, keepdims=True) + 1e-12
    _, _, h, w = feats.shape
    K = int(first_mask.max()) + 1
    soft0 = downsample_mask(first_mask, h, w, K)
    bank = ContextBank(feats[0], soft0, cfg.n_context)
    hard = np.empty((T, H, W), dtype=np.int64)
    hard[0] = first_mask
    softs = [soft0]
    for t in range(1, T):
        soft = propagate_frame(feats[t], bank, cfg)
        bank.push(feats[t], soft)
        softs.append(soft)
        hard[t] = hard_labels(soft, H, W)
    return hard, softs
