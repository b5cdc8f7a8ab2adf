"""MPT1 tensors, PGM export, tensor directories and key=value config files."""

import struct
from pathlib import Path

import numpy as np

from .core import normalize_heatmap

MAGIC = b"MPT1"


class FormatError(ValueError):
    pass


def encode_mpt1(array) -> bytes:
    a = np.asarray(array)
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_mpt1(data: bytes) -> np.ndarray:
    if len(data) < 5 or data[:4] != MAGIC:
        raise FormatError("not an MPT1 tensor")
    ndim = data[4]
    off = 5 + 4 * ndim
    if len(data) < off:
        raise FormatError("truncated MPT1 header")
    shape = struct.unpack(f"<{ndim}I", data[5:off])
    count = int(np.prod(shape, dtype=np.int64))
    if len(data) != off + 4 * count:
        raise FormatError(f"payload size mismatch for shape {shape}")
    a = np.frombuffer(data, dtype="<f4", count=count, offset=off)
    return a.reshape(shape).astype(np.float64)


def save_mpt1(path, array) -> None:
    Path(path).write_bytes(encode_mpt1(array))


def load_mpt1(path) -> np.ndarray:
    return decode_mpt1(Path(path).read_bytes())


def encode_pgm(heatmap) -> bytes:
    h = np.asarray(heatmap, dtype=np.float64)
    if h.ndim != 2:
        raise FormatError("PGM export needs a 2-D heatmap")
    px = np.round(255.0 * normalize_heatmap(h)).astype(np.uint8)
    return f"P5\n{h.shape[1]} {h.shape[0]}\n255\n".encode("ascii") + px.tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only 8-bit PGM supported")
    px = np.frombuffer(parts[4][: w * h], dtype=np.uint8)
    return px.reshape(h, w)


def save_pgm(path, heatmap) -> None:
    Path(path).write_bytes(encode_pgm(heatmap))


def save_tensor_dir(directory, tensors: dict) -> None:
    """Write each tensor as <name>.mpt1 plus manifest.txt ("name d0 d1 ...")."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        save_mpt1(d / f"{name}.mpt1", arr)
        lines.append(" ".join([name, *map(str, arr.shape)]))
    (d / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_tensor_dir(directory) -> dict:
    d = Path(directory)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {d}")
    out = {}
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        name, *dims = line.split()
        arr = load_mpt1(d / f"{name}.mpt1")
        if tuple(arr.shape) != tuple(int(x) for x in dims):
            raise FormatError(f"tensor {name} shape {arr.shape} disagrees with manifest {dims}")
        out[name] = arr
    return out


def write_kv(path, values: dict) -> None:
    lines = [f"{k}={_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_kv(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"malformed config line: {line!r}")
        out[key.strip()] = value
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return ""
    return str(v)
