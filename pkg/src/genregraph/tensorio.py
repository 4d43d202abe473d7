"""Flat binary tensor files, parameter checkpoints, and PGM/PPM images.

Tensor record layout (all little-endian)::

    magic   4 bytes  b"GRTN"
    version u8       1
    dtype   u8       1 = float64, 2 = float32, 3 = int64
    rank    u16
    dims    u64 * rank
    payload prod(dims) items, C order

A checkpoint is ``<stem>.bin`` holding one record per parameter back to back,
plus ``<stem>.manifest.json`` listing name, shape, dtype, byte offset of
each record, and its length.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GRTN"
VERSION = 1
_CODES = {1: "<f8", 2: "<f4", 3: "<i8"}
_DTYPES = {np.dtype(v): k for k, v in _CODES.items()}


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind in "biu":
        arr = arr.astype("<i8")
    elif arr.dtype == np.float32:
        arr = arr.astype("<f4")
    elif arr.dtype.kind == "f":
        arr = arr.astype("<f8")
    else:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    code = _DTYPES[arr.dtype]
    header = MAGIC + struct.pack("<BBH", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one record at ``offset``; returns the array and the offset just past it."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, code, rank = struct.unpack_from("<BBH", buf, offset + 4)
    if version != VERSION or code not in _CODES:
        raise TensorFormatError(f"unsupported version {version} / dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, offset + 8)
    start = offset + 8 + 8 * rank
    dtype = np.dtype(_CODES[code])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise TensorFormatError("truncated payload")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims).copy()
    return arr, end


def write_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    arr, _ = decode_tensor(Path(path).read_bytes())
    return arr


def save_checkpoint(stem, params: dict[str, np.ndarray]) -> tuple[Path, Path]:
    stem = Path(stem)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name])
        rec = encode_tensor(arr)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                        "offset": offset, "nbytes": len(rec)})
        chunks.append(rec)
        offset += len(rec)
    bin_path = stem.with_suffix(".bin")
    manifest_path = stem.with_suffix(".manifest.json")
    bin_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps({"format": "GRTN-checkpoint", "version": VERSION,
                                         "tensors": entries}, indent=1))
    return bin_path, manifest_path


def load_checkpoint(stem) -> dict[str, np.ndarray]:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".manifest.json").read_text())
    buf = stem.with_suffix(".bin").read_bytes()
    out = {}
    for entry in manifest["tensors"]:
        arr, end = decode_tensor(buf, entry["offset"])
        if end - entry["offset"] != entry["nbytes"] or list(arr.shape) != entry["shape"]:
            raise TensorFormatError(f"manifest disagrees with record for {entry['name']}")
        out[entry["name"]] = arr
    return out


def _to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img, flip: bool = True) -> None:
    """Binary greymap of a [0, 1] matrix. ``flip`` puts row 0 (lowest mel) at the bottom."""
    img = np.asarray(img)
    if flip:
        img = img[::-1]
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + _to_bytes(img).tobytes())


def write_ppm(path, rgb, flip: bool = True) -> None:
    """Binary pixmap of an [H, W, 3] array with channels in [0, 1]."""
    rgb = np.asarray(rgb)
    if flip:
        rgb = rgb[::-1]
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + _to_bytes(rgb).tobytes())


def read_pnm(path) -> np.ndarray:
    """Read back a P5/P6 file written by this module (as uint8, no flip)."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    kind, (w, h), _maxval, payload = parts[0], map(int, parts[1].split()), parts[2], parts[3]
    if kind == b"P5":
        return np.frombuffer(payload, np.uint8).reshape(h, w)
    if kind == b"P6":
        return np.frombuffer(payload, np.uint8).reshape(h, w, 3)
    raise TensorFormatError(f"unsupported image kind {kind!r}")


def heat_colormap(x: np.ndarray) -> np.ndarray:
    """Black-red-yellow-white ramp for values in [0, 1]."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    r = np.clip(3.0 * x, 0, 1)
    g = np.clip(3.0 * x - 1.0, 0, 1)
    b = np.clip(3.0 * x - 2.0, 0, 1)
    return np.stack([r, g, b], axis=-1)
