"""Static/dynamic correspondence losses and the affinity-based baselines.

Public single-sample functions take channel-first (C, H, W) feature maps.
The ``*_batched`` helpers work on flattened (B, HW, C) arrays and are what
the trainer calls.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .exceptions import EmptyNegativeSet, ShapeMismatch

MASK_EPS = 1e-6


@dataclass
class LossValue:
    """``total = -(static_term + alpha * dynamic_term)``.

    ``static_term`` and ``dynamic_term`` are the masked mean similarities.
    """

    total: float
    static_term: float
    dynamic_term: float
    positives: int

    def __add__(self, other):
        return LossValue(
            self.total + other.total,
            self.static_term + other.static_term,
            self.dynamic_term + other.dynamic_term,
            self.positives + other.positives,
        )


def _flat(fmap):
    fmap = np.asarray(fmap)
    if fmap.ndim != 3:
        raise ShapeMismatch(f"expected a (C, H, W) map, got shape {fmap.shape}")
    c = fmap.shape[0]
    return fmap.reshape(c, -1).T


def similarity_matrix(fa, fb):
    """Dot products between every location of ``fa`` and every location of ``fb``."""
    fa, fb = np.asarray(fa), np.asarray(fb)
    if fa.shape != fb.shape:
        raise ShapeMismatch(f"feature maps differ: {fa.shape} vs {fb.shape}")
    return _flat(fa) @ _flat(fb).T


def masked_mean(T, A):
    T, A = np.asarray(T), np.asarray(A)
    if T.shape != A.shape:
        raise ShapeMismatch(f"similarity {T.shape} vs mask {A.shape}")
    return float(np.sum(T * A) / (np.sum(A) + MASK_EPS))


def normalize_signal(m):
    """l2-normalize a (C, H, W) signal per location."""
    m = np.asarray(m)
    out, _ = layers.l2norm_forward(m.transpose(1, 2, 0))
    return out.transpose(2, 0, 1)


def hybrid_loss(F1, F2, M1, M2, A, alpha=1.0) -> LossValue:
    """Masked static plus ``alpha``-weighted dynamic similarity, negated.

    ``M1``/``M2`` are raw pseudo-dynamic signals; they are normalized per
    location here.
    """
    A = np.asarray(getattr(A, "values", A), dtype=float)
    F1, F2 = np.asarray(F1), np.asarray(F2)
    if F1.shape != F2.shape or np.shape(M1) != np.shape(M2):
        raise ShapeMismatch("hybrid_loss inputs must pair up in shape")
    hw = F1.shape[1] * F1.shape[2]
    if A.shape != (hw, hw):
        raise ShapeMismatch(f"mask shape {A.shape} does not match {hw} locations")
    s = masked_mean(similarity_matrix(F1, F2), A)
    d = masked_mean(similarity_matrix(normalize_signal(M1), normalize_signal(M2)), A)
    return LossValue(-(s + alpha * d), s, d, int(A.sum()))


def hybrid_loss_batched(o, t, m1, m2, A, alpha=1.0):
    """Per-sample hybrid loss and its gradients.

    Parameters
    ----------
    o, t : (B, HW, C) online / target features (unit norm per location)
    m1, m2 : (B, HW, 2) raw forward / backward signals
    A : (B, HW, HW) positive masks

    Returns
    -------
    totals, static, dynamic : (B,) arrays
    do, dt, dm1, dm2 : gradients of ``sum(totals)`` w.r.t. each input
    """
    A = A.astype(o.dtype, copy=False)
    denom = A.sum(axis=(1, 2)) + MASK_EPS
    inv = (1.0 / denom)[:, None, None]
    At = A @ t
    static = np.einsum("bic,bic->b", o, At) / denom
    n1, c1 = layers.l2norm_forward(m1)
    n2, c2 = layers.l2norm_forward(m2)
    An2 = A @ n2
    dynamic = np.einsum("bic,bic->b", n1, An2) / denom
    totals = -(static + alpha * dynamic)
    do = -At * inv
    dt = -(A.transpose(0, 2, 1) @ o) * inv
    dn1 = -alpha * An2 * inv
    dn2 = -alpha * (A.transpose(0, 2, 1) @ n1) * inv
    dm1 = layers.l2norm_backward(dn1, c1)
    dm2 = layers.l2norm_backward(dn2, c2)
    return totals, static, dynamic, do, dt, dm1, dm2


def symmetric_step_loss(o1, o2, t1, t2, coords1, coords2, r, alpha, pseudo, mode="eval"):
    """Both directional hybrid losses for one crop pair.

    ``o*``/``t*`` are (C, H, W) online / target maps; ``pseudo`` is a
    :class:`~hvc.network.PseudoDynamicNet`.
    """
    from .geometry import distance_matrix, positive_mask
    from .network import pseudo_dynamic

    A12 = positive_mask(distance_matrix(coords1, coords2), r).values
    first = hybrid_loss(
        o1, t2, pseudo_dynamic(pseudo, o1, t2, mode), pseudo_dynamic(pseudo, t2, o1, mode), A12, alpha
    )
    second = hybrid_loss(
        o2, t1, pseudo_dynamic(pseudo, o2, t1, mode), pseudo_dynamic(pseudo, t1, o2, mode), A12.T, alpha
    )
    return first + second


def _softmax_rows(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def affinity(ref, query, temperature=0.07):
    """Row-wise softmax of reference-by-query dot products."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    ref, query = np.asarray(ref), np.asarray(query)
    if ref.shape[0] != query.shape[0]:
        raise ShapeMismatch("reference and query channel counts differ")
    return _softmax_rows(_flat(ref) @ _flat(query).T / temperature)


def baseline_losses(ref, query, S_fwd, S_bwd, positives, negatives):
    """Photometric reconstruction, cycle-consistency and contrastive matching.

    ``ref`` / ``query`` are (hw, C) location-by-channel arrays (pixels or
    features). ``positives`` is a sequence of ``(p, p_plus)`` index pairs
    into ``S_fwd``; ``negatives`` is either one index sequence shared by all
    anchors or one sequence per anchor. The contrastive term is averaged
    over anchors.
    """
    ref, query = np.asarray(ref, dtype=float), np.asarray(query, dtype=float)
    S_fwd, S_bwd = np.asarray(S_fwd, dtype=float), np.asarray(S_bwd, dtype=float)
    recon = query - S_fwd.T @ ref
    l_pr = float(np.sum(recon * recon))
    cyc = S_fwd @ S_bwd - np.eye(S_fwd.shape[0])
    l_cc = float(np.sum(cyc * cyc))

    positives = list(positives)
    if len(negatives) and np.ndim(negatives[0]) == 0:
        negatives = [negatives] * len(positives)
    terms = []
    for (p, pp), neg in zip(positives, negatives):
        neg = np.asarray(neg, dtype=int)
        if neg.size == 0:
            raise EmptyNegativeSet(f"anchor {p} has no negatives")
        if pp in set(neg.tolist()):
            raise ValueError(f"positive {pp} also listed as a negative for anchor {p}")
        logits = S_fwd[p, neg]
        top = logits.max()
        lse = top + np.log(np.sum(np.exp(logits - top)))
        terms.append(lse - S_fwd[p, pp])
    if not terms:
        raise EmptyNegativeSet("no anchors supplied for contrastive matching")
    return l_pr, l_cc, float(np.mean(terms))
