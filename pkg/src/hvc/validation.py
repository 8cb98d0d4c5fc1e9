"""Input checks shared by the estimators and the command line."""
from __future__ import annotations

import numpy as np

from .exceptions import ShapeMismatch


def check_images(X, name="X", min_side=1):
    """Return ``X`` as a finite float (N, H, W, 3) array.

    A single (H, W, 3) image is promoted to a batch of one. Integer input
    is taken as 8-bit and scaled to [0, 1].
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ShapeMismatch(f"{name}: expected (N, H, W, 3) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name}: no images")
    if min(X.shape[1:3]) < min_side:
        raise ShapeMismatch(f"{name}: images must be at least {min_side}px, got {X.shape[1:3]}")
    if np.issubdtype(X.dtype, np.integer):
        X = X.astype(np.float32) / 255.0
    elif not np.issubdtype(X.dtype, np.floating):
        raise TypeError(f"{name}: unsupported dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains NaN or inf")
    return X


def check_label_map(y, shape=None, name="y"):
    """Return ``y`` as a non-negative int64 (H, W) label map."""
    y = np.asarray(y)
    if y.ndim != 2:
        raise ShapeMismatch(f"{name}: expected an (H, W) label map, got shape {y.shape}")
    if shape is not None and y.shape != tuple(shape):
        raise ShapeMismatch(f"{name}: shape {y.shape} does not match frames {tuple(shape)}")
    if np.issubdtype(y.dtype, np.floating):
        if not np.all(y == np.round(y)):
            raise ValueError(f"{name}: labels must be integers")
    elif not np.issubdtype(y.dtype, np.integer) and y.dtype != bool:
        raise TypeError(f"{name}: unsupported dtype {y.dtype}")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise ValueError(f"{name}: labels must be non-negative")
    return y


def check_features(F, name="features"):
    """Return ``F`` as a finite float64 (T, C, h, w) array."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 4:
        raise ShapeMismatch(f"{name}: expected (T, C, h, w), got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise ValueError(f"{name}: contains NaN or inf")
    return F
