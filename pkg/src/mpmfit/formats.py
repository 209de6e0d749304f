"""File formats: MSV1 binary trajectories, PGM P5 masks, PTS1 point sets,
and deterministic JSON.

MSV1 layout (little-endian):
    magic  4s   b"MSV1"
    K      u32  object count
    F      u32  frame count
    counts u32 * K   particles per object
    fps    f32
    unit   4s   b"m\\x00\\x00\\x00" (meters)
    then F frames x K objects x (count_k * 3) float32 positions

PTS1: magic b"PTS1", u32 count, count*3 float32.
PGM: P5, maxval 255, foreground 255.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch

MSV_MAGIC = b"MSV1"
PTS_MAGIC = b"PTS1"
UNIT_METER = b"m\x00\x00\x00"


def write_trajectory(path, frames, frame_indices, fps):
    """frames[i][k]: (N_k, 3) positions; all frames share per-object counts."""
    path = Path(path)
    kn = len(frames[0])
    counts = [frames[0][k].shape[0] for k in range(kn)]
    for snap in frames:
        if len(snap) != kn or any(snap[k].shape != (counts[k], 3) for k in range(kn)):
            raise ShapeMismatch("inconsistent per-frame object shapes")
    with open(path, "wb") as fh:
        fh.write(MSV_MAGIC)
        fh.write(struct.pack("<II", kn, len(frames)))
        fh.write(struct.pack(f"<{kn}I", *counts))
        fh.write(struct.pack("<f", float(fps)))
        fh.write(UNIT_METER)
        for snap in frames:
            for k in range(kn):
                fh.write(np.ascontiguousarray(snap[k], dtype="<f4").tobytes())
    meta = {"frame_indices": list(map(int, frame_indices))}
    Path(str(path) + ".idx.json").write_text(dump_json(meta), encoding="utf-8")


def read_trajectory(path):
    """Returns (frames, frame_indices, fps); frames[i][k] float64 (N_k, 3)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MSV_MAGIC:
        raise ShapeMismatch(f"{path} is not an MSV1 trajectory")
    kn, nf = struct.unpack_from("<II", raw, 4)
    off = 12
    counts = struct.unpack_from(f"<{kn}I", raw, off)
    off += 4 * kn
    (fps,) = struct.unpack_from("<f", raw, off)
    off += 4
    off += 4  # unit tag
    expected = off + nf * sum(counts) * 12
    if len(raw) != expected:
        raise ShapeMismatch(f"{path}: payload length {len(raw)} != header arithmetic {expected}")
    frames = []
    for _ in range(nf):
        snap = []
        for k in range(kn):
            n = counts[k]
            arr = np.frombuffer(raw, dtype="<f4", count=n * 3, offset=off).reshape(n, 3)
            off += n * 12
            snap.append(arr.astype(np.float64))
        frames.append(snap)
    idx_path = Path(str(path) + ".idx.json")
    if idx_path.exists():
        frame_indices = json.loads(idx_path.read_text(encoding="utf-8"))["frame_indices"]
    else:
        frame_indices = list(range(nf))
    return frames, frame_indices, fps


def write_pgm(path, mask):
    """P5 with maxval 255; nonzero input becomes foreground 255."""
    mask = np.asarray(mask)
    h, w = mask.shape
    data = np.where(mask > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise ShapeMismatch(f"{path} is not a P5 PGM")
    # header: magic, width, height, maxval, single whitespace, then payload
    parts = []
    pos = 2
    while len(parts) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        parts.append(int(raw[start:pos]))
    pos += 1
    w, h, _maxval = parts
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (data > 127).astype(np.uint8)


def write_points(path, points):
    points = np.asarray(points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(PTS_MAGIC)
        fh.write(struct.pack("<I", points.shape[0]))
        fh.write(np.ascontiguousarray(points).tobytes())


def read_points(path):
    raw = Path(path).read_bytes()
    if raw[:4] != PTS_MAGIC:
        raise ShapeMismatch(f"{path} is not a PTS1 point set")
    (n,) = struct.unpack_from("<I", raw, 4)
    if len(raw) != 8 + n * 12:
        raise ShapeMismatch(f"{path}: payload length mismatch")
    return np.frombuffer(raw, dtype="<f4", count=n * 3, offset=8).reshape(n, 3).astype(np.float64)


def dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2)


def write_json(path, obj):
    Path(path).write_text(dump_json(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
