"""Binary checkpoint container.

Layout (little-endian)::

    b"HVC1"  u32 version  32-byte config digest
    u32 meta length, meta JSON (configs, step, momentum, optimizer scalars, RNG state)
    u32 record count, then per record:
        u16 name length, name (utf-8), u8 dtype tag, u8 ndim, u32 * ndim dims, raw values
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict

import numpy as np

from .exceptions import CheckpointError
from .geometry import CropConfig
from .io import atomic_write_bytes
from .network import NetConfig
from .trainer import HVCTrainer, TrainConfig

MAGIC = b"HVC1"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
TAG_OF = {v: k for k, v in DTYPE_TAGS.items()}


def _tag(arr):
    dt = arr.dtype.newbyteorder("<")
    if dt not in TAG_OF:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return TAG_OF[dt]


def encode_records(records):
    parts = [struct.pack("<I", len(records))]
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr)
        tag = _tag(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(DTYPE_TAGS[tag], copy=False).tobytes())
    return b"".join(parts)


def decode_records(buf, offset):
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    records = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        name = bytes(buf[offset:offset + nlen]).decode("utf-8")
        offset += nlen
        tag, ndim = struct.unpack_from("<BB", buf, offset)
        offset += 2
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"record {name!r}: unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        dt = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + size > len(buf):
            raise CheckpointError(f"record {name!r} truncated")
        arr = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=offset).reshape(shape)
        offset += size
        records.append((name, arr.copy()))
    return records, offset


def trainer_state(trainer: HVCTrainer):
    """(meta dict, ordered record list) describing the full training state."""
    meta = {
        "train": asdict(trainer.cfg),
        "net": trainer.net_cfg.to_dict(),
        "crop": asdict(trainer.crop_cfg),
        "dtype": trainer.dtype.name,
        "step": trainer.step,
        "total_steps": trainer.total_steps,
        "m": trainer.m,
        "opt_step_count": trainer.opt.step_count,
        "rng": trainer.rng.bit_generator.state,
    }
    records = []
    for prefix, store in (("online", trainer.online.store), ("target", trainer.target.store),
                          ("pseudo", trainer.pseudo.store)):
        for name, arr in store.tensors().items():
            records.append((f"{prefix}/{name}", arr))
    for key in sorted(trainer.opt.m):
        records.append((f"adam.m/{key}", trainer.opt.m[key]))
        records.append((f"adam.v/{key}", trainer.opt.v[key]))
    return meta, records


def dumps_checkpoint(trainer: HVCTrainer) -> bytes:
    meta, records = trainer_state(trainer)
    meta_raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<I", VERSION) + trainer.digest
    return head + struct.pack("<I", len(meta_raw)) + meta_raw + encode_records(records)


def save_checkpoint(path, trainer: HVCTrainer):
    atomic_write_bytes(path, dumps_checkpoint(trainer))


def _crop_cfg(d):
    d = dict(d)
    d["scale_range"] = tuple(d["scale_range"])
    d["ratio_range"] = tuple(d["ratio_range"])
    return CropConfig(**d)


def loads_checkpoint(buf) -> HVCTrainer:
    buf = memoryview(buf)
    if bytes(buf[:4]) != MAGIC:
        raise CheckpointError("not an HVC checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = bytes(buf[8:40])
    (mlen,) = struct.unpack_from("<I", buf, 40)
    meta = json.loads(bytes(buf[44:44 + mlen]).decode("utf-8"))
    records, end = decode_records(buf, 44 + mlen)
    if end != len(buf):
        raise CheckpointError(f"{len(buf) - end} trailing bytes after records")

    trainer = HVCTrainer(
        TrainConfig(**meta["train"]), NetConfig(**meta["net"]), _crop_cfg(meta["crop"]),
        dtype=np.dtype(meta["dtype"]),
    )
    if trainer.digest != digest:
        raise CheckpointError("config digest does not match the stored configuration")
    stores = {"online": trainer.online.store, "target": trainer.target.store,
              "pseudo": trainer.pseudo.store}
    seen = set()
    for name, arr in records:
        group, _, key = name.partition("/")
        if group in stores:
            store = stores[group]
            if key not in store:
                raise CheckpointError(f"unknown tensor {name!r}")
            dst = store[key]
            if dst.shape != arr.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} vs expected {dst.shape}")
            dst[...] = arr
            seen.add(name)
        elif group in ("adam.m", "adam.v"):
            (trainer.opt.m if group == "adam.m" else trainer.opt.v)[key] = arr
        else:
            raise CheckpointError(f"unknown record group in {name!r}")
    expected = {f"{g}/{n}" for g, s in stores.items() for n in s.tensors()}
    if expected - seen:
        raise CheckpointError(f"missing tensors: {sorted(expected - seen)[:5]}")
    trainer.step = meta["step"]
    trainer.total_steps = meta["total_steps"]
    trainer.m = meta["m"]
    trainer.opt.step_count = meta["opt_step_count"]
    trainer.rng.bit_generator.state = meta["rng"]
    return trainer


def load_checkpoint(path) -> HVCTrainer:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
