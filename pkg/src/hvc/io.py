"""Image, mask and flow file helpers plus atomic writes."""
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def _encode(img: Image.Image, fmt):
    import io

    buf = io.BytesIO()
    img.save(buf, format=fmt)
    return buf.getvalue()


def _fmt(path):
    ext = Path(path).suffix.lower()
    return {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".jpg": "JPEG", ".jpeg": "JPEG"}.get(ext, "PNG")


def read_image(path):
    """8-bit RGB file -> (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def write_image(path, image):
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    atomic_write_bytes(path, _encode(Image.fromarray(arr, mode="RGB"), _fmt(path)))


def label_palette(n=256):
    """The usual bit-interleaved segmentation palette (0 black, 1 red, 2 green, ...)."""
    pal = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal[i] = (r, g, b)
    return pal


def read_mask(path):
    """Indexed PNG / PGM -> (H, W) int array of class ids."""
    with Image.open(path) as im:
        if im.mode not in ("P", "L", "I", "1"):
            raise ValueError(f"{path}: expected an indexed or grayscale mask, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def write_mask(path, mask):
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("class ids must fit in 8 bits")
    arr = mask.astype(np.uint8)
    if Path(path).suffix.lower() == ".pgm":
        img = Image.fromarray(arr, mode="L")
    else:
        img = Image.fromarray(arr, mode="P")
        img.putpalette(label_palette().ravel().tolist())
    atomic_write_bytes(path, _encode(img, _fmt(path)))


def list_images(directory):
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTS)


def load_image_dir(directory):
    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no images in {directory}")
    return np.stack([read_image(p) for p in paths])


FLO_MAGIC = 202021.25


def read_flow(path):
    """Middlebury ``.flo`` or ``.npy`` flow -> (2, H, W) float array."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        return arr if arr.shape[0] == 2 else arr.transpose(2, 0, 1)
    with open(path, "rb") as fh:
        magic = np.fromfile(fh, "<f4", 1)
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise ValueError(f"{path}: bad .flo magic")
        w, h = np.fromfile(fh, "<i4", 2)
        data = np.fromfile(fh, "<f4", 2 * w * h)
    return data.reshape(h, w, 2).transpose(2, 0, 1)


def write_flow(path, flow):
    flow = np.asarray(flow, dtype="<f4")
    _, h, w = flow.shape
    payload = (
        np.array([FLO_MAGIC], "<f4").tobytes()
        + np.array([w, h], "<i4").tobytes()
        + flow.transpose(1, 2, 0).tobytes()
    )
    atomic_write_bytes(path, payload)
