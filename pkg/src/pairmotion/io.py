"""Binary file formats: named-tensor checkpoints, motion files and embedding banks.

All integers are little-endian.  Writers are byte-deterministic so that runs
with fixed seeds produce identical artifacts.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptFile, ShapeMismatch
from .motion import InteractionSample, MotionSequence, representation_width

CKPT_MAGIC = b"T2ICKPT1"
MOTION_MAGIC = b"T2IMOT1"
MOTION_VERSION = 1
LAYOUT_STANDARD = 1
BANK_MAGIC = b"T2IBANK1"

_MOTION_HEADER = struct.Struct("<7sHHIHBB")
_BANK_HEADER = struct.Struct("<8sII")


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read {path}: {exc}") from exc


# ------------------------------------------------------------ checkpoints

def save_container(path, tensors: dict[str, np.ndarray], manifest: dict) -> None:
    names = sorted(tensors)
    arrays = [np.ascontiguousarray(tensors[n]) for n in names]
    meta = dict(manifest)
    meta["tensors"] = [
        {"name": n, "shape": list(a.shape), "dtype": a.dtype.newbyteorder("<").str} for n, a in zip(names, arrays)
    ]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    data = _read(path)
    if data[:8] != CKPT_MAGIC or len(data) < 12:
        raise CorruptFile(f"{path}: not a checkpoint container")
    (n,) = struct.unpack_from("<I", data, 8)
    try:
        manifest = json.loads(data[12:12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable manifest") from exc
    pos = 12 + n
    tensors = {}
    for spec in manifest["tensors"]:
        dtype = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if pos + count * dtype.itemsize > len(data):
            raise CorruptFile(f"{path}: truncated tensor {spec['name']}")
        tensors[spec["name"]] = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(spec["shape"]).copy()
        pos += count * dtype.itemsize
    return tensors, manifest


# ----------------------------------------------------------- motion files

def save_motion(path, motion) -> None:
    """Write a :class:`MotionSequence`, a pair of them, or an :class:`InteractionSample`."""
    if isinstance(motion, InteractionSample):
        agents = list(motion.agents)
    elif isinstance(motion, MotionSequence):
        agents = [motion]
    else:
        agents = list(motion)
    t, n = agents[0].frames, agents[0].joint_count
    if any(a.frames != t or a.joint_count != n or a.fps != agents[0].fps for a in agents):
        raise ShapeMismatch("all agents in a motion file must share T, N and fps")
    payload = np.stack([
        np.concatenate([a.positions.reshape(t, -1), a.velocities.reshape(t, -1),
                        a.rotations6d.reshape(t, -1), a.contacts], axis=-1)
        for a in agents
    ]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_MOTION_HEADER.pack(MOTION_MAGIC, MOTION_VERSION, agents[0].fps, t, n, len(agents), LAYOUT_STANDARD))
        fh.write(payload.tobytes())


def load_motion(path):
    """Returns a single :class:`MotionSequence` or a tuple of them (one per stored agent)."""
    data = _read(path)
    if len(data) < _MOTION_HEADER.size:
        raise CorruptFile(f"{path}: truncated header")
    magic, version, fps, t, n, agents, layout = _MOTION_HEADER.unpack_from(data, 0)
    if magic != MOTION_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != MOTION_VERSION:
        raise CorruptFile(f"{path}: unsupported version {version} (expected {MOTION_VERSION})")
    if layout != LAYOUT_STANDARD:
        raise CorruptFile(f"{path}: unknown channel layout {layout}")
    w = representation_width(n)
    expected = agents * t * w * 4
    if len(data) - _MOTION_HEADER.size != expected:
        raise CorruptFile(f"{path}: payload is {len(data) - _MOTION_HEADER.size} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_MOTION_HEADER.size).reshape(agents, t, w).astype(np.float64)
    out = []
    for a in arr:
        out.append(MotionSequence(
            positions=a[:, :3 * n].reshape(t, n, 3),
            velocities=a[:, 3 * n:6 * n].reshape(t, n, 3),
            rotations6d=a[:, 6 * n:12 * n - 6].reshape(t, n - 1, 6),
            contacts=a[:, 12 * n - 6:],
            fps=fps,
        ))
    return out[0] if agents == 1 else tuple(out)


# --------------------------------------------------------- embedding bank

def save_bank(path, embeddings: np.ndarray) -> None:
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        raise ShapeMismatch(f"bank must be (count, dim), got {emb.shape}")
    with open(path, "wb") as fh:
        fh.write(_BANK_HEADER.pack(BANK_MAGIC, emb.shape[0], emb.shape[1]))
        fh.write(emb.tobytes())


def load_bank(path) -> np.ndarray:
    data = _read(path)
    if len(data) < _BANK_HEADER.size:
        raise CorruptFile(f"{path}: truncated header")
    magic, count, dim = _BANK_HEADER.unpack_from(data, 0)
    if magic != BANK_MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if len(data) - _BANK_HEADER.size != 4 * count * dim:
        raise CorruptFile(f"{path}: payload size does not match {count}x{dim}")
    return np.frombuffer(data, dtype="<f4", offset=_BANK_HEADER.size).reshape(count, dim).copy()


def write_jsonl(path, records: Sequence[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
