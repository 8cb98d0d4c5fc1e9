"""Region similarity J, boundary F-measure, end-point error and dataset reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ClassMismatch, MissingFrame, ShapeMismatch
from .io import list_images, read_mask


def _pair(pred, gt):
    pred, gt = np.asarray(pred).astype(bool), np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def jaccard(pred, gt):
    """Intersection over union; two empty masks score 1."""
    pred, gt = _pair(pred, gt)
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def boundary_map(mask):
    """Foreground pixels with a 4-neighbour in the background.

    The image border does not count as background.
    """
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=1)
    return mask & ~inner


def disc(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r


def boundary_f(pred, gt, tol_frac=0.008):
    """Boundary F-measure with a tolerance of ``ceil(tol_frac * diagonal)`` pixels."""
    pred, gt = _pair(pred, gt)
    radius = math.ceil(tol_frac * math.hypot(*gt.shape))
    pb, gb = boundary_map(pred), boundary_map(gt)
    n_p, n_g = pb.sum(), gb.sum()
    if n_p == 0 and n_g == 0:
        return 1.0
    fp = disc(radius)
    if n_p == 0:
        precision, recall = 1.0, 0.0
    elif n_g == 0:
        precision, recall = 0.0, 1.0
    else:
        precision = (pb & ndimage.binary_dilation(gb, structure=fp)).sum() / n_p
        recall = (gb & ndimage.binary_dilation(pb, structure=fp)).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def epe(estimated, reference):
    """Mean Euclidean norm of the per-location difference of two (2, H, W) fields."""
    estimated, reference = np.asarray(estimated, dtype=float), np.asarray(reference, dtype=float)
    if estimated.shape != reference.shape:
        raise ShapeMismatch(f"flow shapes differ: {estimated.shape} vs {reference.shape}")
    diff = estimated - reference
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=0))))


@dataclass
class EvalReport:
    per_video: dict = field(default_factory=dict)
    J_m: float = 0.0
    F_m: float = 0.0
    JF_m: float = 0.0
    J_r: float = 0.0
    F_r: float = 0.0
    n_objects: int = 0
    errors: list = field(default_factory=list)
    conventions: dict = field(default_factory=lambda: {
        "empty_J": 1.0, "empty_F": 1.0, "first_frame_scored": False, "recall_threshold": 0.5,
    })

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_table(self):
        rows = [("video", "class", "J", "F", "J_r", "F_r")]
        for video in sorted(self.per_video):
            for cls in sorted(self.per_video[video], key=int):
                s = self.per_video[video][cls]
                rows.append((video, str(cls), f"{s['J']:.4f}", f"{s['F']:.4f}",
                             f"{s['J_r']:.4f}", f"{s['F_r']:.4f}"))
        rows.append(("MEAN", "-", f"{self.J_m:.4f}", f"{self.F_m:.4f}",
                     f"{self.J_r:.4f}", f"{self.F_r:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.append(f"J&F_m = {self.JF_m:.4f}")
        return "\n".join(lines)


def score_video(pred_masks, gt_masks, classes=None, tol_frac=0.008, skip_first=True):
    """Per-class per-frame J and F for one video (lists of (H, W) label maps)."""
    if classes is None:
        classes = range(1, int(max(np.max(g) for g in gt_masks)) + 1)
    start = 1 if skip_first else 0
    out = {}
    for c in classes:
        js, fs = [], []
        for p, g in zip(pred_masks[start:], gt_masks[start:]):
            js.append(jaccard(p == c, g == c))
            fs.append(boundary_f(p == c, g == c, tol_frac))
        out[c] = (js, fs)
    return out


def aggregate(per_object, report=None):
    """Fill dataset means/recalls from ``{(video, cls): (J list, F list)}``."""
    report = report or EvalReport()
    jm, fm, jr, fr = [], [], [], []
    for (video, cls), (js, fs) in sorted(per_object.items()):
        js, fs = np.asarray(js, dtype=float), np.asarray(fs, dtype=float)
        entry = {
            "J": float(js.mean()) if js.size else 1.0,
            "F": float(fs.mean()) if fs.size else 1.0,
            "J_r": float((js > 0.5).mean()) if js.size else 1.0,
            "F_r": float((fs > 0.5).mean()) if fs.size else 1.0,
            "J_frames": js.tolist(),
            "F_frames": fs.tolist(),
        }
        report.per_video.setdefault(video, {})[str(cls)] = entry
        jm.append(entry["J"])
        fm.append(entry["F"])
        jr.append(entry["J_r"])
        fr.append(entry["F_r"])
    if jm:
        report.J_m, report.F_m = float(np.mean(jm)), float(np.mean(fm))
        report.J_r, report.F_r = float(np.mean(jr)), float(np.mean(fr))
    report.JF_m = (report.J_m + report.F_m) / 2.0
    report.n_objects = len(jm)
    return report


def evaluate_dataset(pred_dir, gt_dir, tol_frac=0.008, last_fraction=None):
    """Score ``pred_dir/<video>/<frame>.png`` against ``gt_dir/<video>/<frame>.png``.

    The first frame is never scored. Missing or mismatched prediction files
    are logged in ``report.errors`` and scored as all-background.
    ``last_fraction`` (e.g. 0.25) restricts scoring to the final part of each
    video.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    report = EvalReport()
    per_object = {}
    videos = sorted(p for p in gt_dir.iterdir() if p.is_dir())
    for vdir in videos:
        gt_paths = list_images(vdir)
        gts = [read_mask(p) for p in gt_paths]
        classes = list(range(1, int(max(g.max() for g in gts)) + 1))
        preds = []
        for path, g in zip(gt_paths, gts):
            cand = [pred_dir / vdir.name / path.name,
                    *(pred_dir / vdir.name / (path.stem + ext) for ext in (".png", ".pgm"))]
            found = next((c for c in cand if c.exists()), None)
            if found is None:
                report.errors.append(str(MissingFrame(f"{vdir.name}/{path.name}")))
                preds.append(np.zeros_like(g))
                continue
            p = read_mask(found)
            if p.shape != g.shape:
                report.errors.append(str(ClassMismatch(
                    f"{vdir.name}/{path.name}: shape {p.shape} vs {g.shape}")))
                preds.append(np.zeros_like(g))
                continue
            extra = set(np.unique(p).tolist()) - {0, *classes}
            if extra:
                report.errors.append(str(ClassMismatch(
                    f"{vdir.name}/{path.name}: unknown class ids {sorted(extra)}")))
            preds.append(p)
        if last_fraction is not None:
            keep = max(1, int(math.ceil(len(gts) * last_fraction)))
            preds, gts = [preds[0], *preds[-keep:]], [gts[0], *gts[-keep:]]
        for cls, pair in score_video(preds, gts, classes, tol_frac).items():
            per_object[(vdir.name, cls)] = pair
    return aggregate(per_object, report)
