"""Binary formats: frame blobs, PGM/PPM ingestion and checkpoints.

Frame blob (``.mvtf``)::

    b"MVTF" | u8 version | u32 C | u32 H | u32 W | C*H*W float32     (little-endian)

Checkpoint (``.ckpt``)::

    b"MVTFCKPT" | u32 version | u32 header_len | header (UTF-8 JSON)
    | u32 n_entries | n_entries * (u16 name_len | name | u8 ndim | ndim * u32 | float32 data)

The JSON header carries the model spec, normalizer, training config and any
resume state; tensors are stored by name in insertion order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FRAME_MAGIC = b"MVTF"
FRAME_VERSION = 1
CKPT_MAGIC = b"MVTFCKPT"
CKPT_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def write_frame(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype="<f4")
    if img.ndim != 3:
        raise ValueError(f"frame must be (C, H, W), got shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<BIII", FRAME_VERSION, *img.shape))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_frame(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FRAME_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    version, c, h, w = struct.unpack_from("<BIII", data, 4)
    if version != FRAME_VERSION:
        raise FormatError(f"{path}: unsupported frame version {version}")
    body = data[17:]
    if len(body) != 4 * c * h * w:
        raise FormatError(f"{path}: expected {4 * c * h * w} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6) to a float32 ``(C, H, W)`` array in [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: only binary P5/P6 supported, got {magic!r}")
    c = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * c, offset=pos)
    return (arr.reshape(h, w, c).transpose(2, 0, 1) / float(maxval)).astype(np.float32)


def load_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        return read_pnm(path)
    return read_frame(path)


def save_checkpoint(path, tensors: dict[str, np.ndarray], header: dict) -> None:
    head = json.dumps(header, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if a.dtype != np.float32:
            raise ValueError(f"checkpoint entry {name} must be float32, got {a.dtype}")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors, header
