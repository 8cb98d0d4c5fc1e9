"""Seeded composite-shape images and moving-shape videos with exact masks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import atomic_write_text, write_image, write_mask

KINDS = ("rect", "circle", "triangle")


@dataclass
class Shape:
    """Shape inside a ``size = (w, h)`` box whose top-left corner is ``position``."""

    kind: str
    color: tuple
    size: tuple
    position: tuple
    velocity: tuple = (0.0, 0.0)
    class_id: int = 1

    def coverage(self, h, w):
        """Boolean (h, w) raster; a pixel is covered when its center is inside."""
        yc, xc = np.mgrid[0:h, 0:w] + 0.5
        x0, y0 = self.position
        sw, sh = self.size
        if self.kind == "rect":
            return (xc >= x0) & (xc < x0 + sw) & (yc >= y0) & (yc < y0 + sh)
        if self.kind == "circle":
            r = sw / 2.0
            return (xc - x0 - r) ** 2 + (yc - y0 - r) ** 2 <= r * r
        if self.kind == "triangle":
            # apex at top-center, base along the bottom edge of the box
            u = (yc - y0) / sh
            half = 0.5 * sw * u
            cx = x0 + sw / 2.0
            return (u >= 0) & (u < 1) & (np.abs(xc - cx) <= half)
        raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass
class SceneSpec:
    height: int = 64
    width: int = 64
    shapes: list = field(default_factory=list)
    background_seed: int = 0
    texture: float = 0.04

    def validate(self):
        ids = sorted(s.class_id for s in self.shapes)
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"class ids must be unique and contiguous from 1, got {ids}")
        for s in self.shapes:
            x, y = s.position
            if x < 0 or y < 0 or x + s.size[0] > self.width or y + s.size[1] > self.height:
                raise ValueError(f"shape {s.class_id} starts out of bounds")
        return self


def background(spec: SceneSpec):
    """Low-amplitude value noise on top of a two-color gradient."""
    rng = np.random.default_rng([spec.background_seed, 7])
    h, w = spec.height, spec.width
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    t = np.linspace(0.0, 1.0, w)[None, :, None]
    img = (1 - t) * c0 + t * c1
    img = np.broadcast_to(img, (h, w, 3)).copy()
    coarse = rng.uniform(-1, 1, size=(h // 8 + 2, w // 8 + 2, 3))
    noise = ndimage.zoom(coarse, (8, 8, 1), order=1)[:h, :w]
    return np.clip(img + 0.08 * noise, 0.0, 1.0)


def gen_image(spec: SceneSpec):
    """Render back-to-front. Returns ``(image (H,W,3) float32, mask (H,W) int)``."""
    spec.validate()
    img = background(spec)
    mask = np.zeros((spec.height, spec.width), dtype=np.int64)
    for s in spec.shapes:
        cov = s.coverage(spec.height, spec.width)
        rng = np.random.default_rng([spec.background_seed, 11, s.class_id])
        tex = spec.texture * rng.uniform(-1, 1, size=(spec.height, spec.width, 1))
        img[cov] = np.clip(np.asarray(s.color) + tex[cov], 0.0, 1.0)
        mask[cov] = s.class_id
    return img.astype(np.float32), mask


def reflect_step(x, v, lo, hi):
    """Advance one frame with elastic reflection at ``lo`` / ``hi``."""
    x = x + v
    if x > hi:
        x, v = 2 * hi - x, -v
    elif x < lo:
        x, v = 2 * lo - x, -v
    return x, v


def advance(spec: SceneSpec):
    shapes = []
    for s in spec.shapes:
        (x, y), (vx, vy) = s.position, s.velocity
        x, vx = reflect_step(x, vx, 0.0, spec.width - s.size[0])
        y, vy = reflect_step(y, vy, 0.0, spec.height - s.size[1])
        shapes.append(replace(s, position=(x, y), velocity=(vx, vy)))
    return replace(spec, shapes=shapes)


def gen_video(spec: SceneSpec, frames: int):
    """Frame list of ``(image, mask)``; shapes move by velocity and bounce."""
    if frames < 2:
        raise ValueError("a video needs at least 2 frames")
    out = []
    for _ in range(frames):
        out.append(gen_image(spec))
        spec = advance(spec)
    return out


@dataclass
class SynthConfig:
    n_train: int = 512
    n_videos: int = 20
    n_frames: int = 24
    canvas: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_size: int = 14
    max_size: int = 28
    max_speed: float = 1.5
    seed: int = 0


def random_scene(rng, cfg: SynthConfig, moving=False):
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    shapes = []
    for k in range(n):
        kind = KINDS[int(rng.integers(len(KINDS)))]
        sw = int(rng.integers(cfg.min_size, cfg.max_size + 1))
        sh = sw if kind == "circle" else int(rng.integers(cfg.min_size, cfg.max_size + 1))
        x = float(rng.integers(0, cfg.canvas - sw + 1))
        y = float(rng.integers(0, cfg.canvas - sh + 1))
        vel = tuple(rng.uniform(-cfg.max_speed, cfg.max_speed, size=2)) if moving else (0.0, 0.0)
        color = tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))
        shapes.append(Shape(kind, color, (sw, sh), (x, y), vel, k + 1))
    return SceneSpec(cfg.canvas, cfg.canvas, shapes, background_seed=int(rng.integers(2**31)))


def train_images(cfg: SynthConfig):
    """(n_train, H, W, 3) float32 images, one independent seed per item."""
    return np.stack([
        gen_image(random_scene(np.random.default_rng([cfg.seed, 0, i]), cfg))[0]
        for i in range(cfg.n_train)
    ])


def eval_videos(cfg: SynthConfig):
    """List of ``(name, frames (T,H,W,3), masks (T,H,W))``."""
    videos = []
    for i in range(cfg.n_videos):
        spec = random_scene(np.random.default_rng([cfg.seed, 1, i]), cfg, moving=True)
        seq = gen_video(spec, cfg.n_frames)
        videos.append((f"video{i:03d}", np.stack([f for f, _ in seq]), np.stack([m for _, m in seq])))
    return videos


def write_dataset(root, cfg: SynthConfig):
    """Write ``train/``, ``eval/JPEGImages/<video>/`` and ``eval/Annotations/<video>/``."""
    root = Path(root)
    for i, img in enumerate(train_images(cfg)):
        write_image(root / "train" / f"{i:05d}.png", img)
    for name, frames, masks in eval_videos(cfg):
        for t in range(len(frames)):
            write_image(root / "eval" / "JPEGImages" / name / f"{t:05d}.png", frames[t])
            write_mask(root / "eval" / "Annotations" / name / f"{t:05d}.png", masks[t])
    atomic_write_text(root / "synth.json", json.dumps(cfg.__dict__, indent=2, sort_keys=True))
    return root
