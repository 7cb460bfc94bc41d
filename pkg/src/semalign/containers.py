"""Binary containers for rasters, statistics banks, model checkpoints and embeddings.

Every format is little-endian with a 4-byte magic and a u32 version so files
are self-describing. Round-trips are bit-exact.

Raster container (images, label maps, pseudo labels)::

    magic    4s   b"RAST"
    version  u32  1
    H, W, C  u32 x 3
    dtype    u8   0 = float64, 1 = int32
    payload  row-major H*W*C values

Label maps are stored with C = 1 and dtype int32; the reserved ignore id is
IGNORE_ID below.

Bank checkpoint::

    magic    4s   b"DBNK"
    version  u32  1
    D, K     u32 x 2
    space    u8   0 = feature, 1 = output
    per class k in 0..K-1:
        count  u64
        mean   D  x f64
        cov    D^2 x f64 (row-major)

Model checkpoint::

    magic    4s   b"MODL"
    version  u32  1
    n_arrays u32
    per array: name_len u8, name ascii, ndim u8, dims u32 each
    payloads f64, concatenated in table order

Embedding export::

    magic    4s   b"EMBD"
    version  u32  1
    count    u64
    dim      u32
    rows     label i32 + dim x f64
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IGNORE_ID = 255

_RASTER_MAGIC = b"RAST"
_BANK_MAGIC = b"DBNK"
_MODEL_MAGIC = b"MODL"
_EMBED_MAGIC = b"EMBD"
_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_CODE_FOR_KIND = {"f": 0, "i": 1}


class ContainerError(ValueError):
    """Malformed or mismatched binary container."""


def _check_magic(got: bytes, want: bytes, path) -> None:
    if got != want:
        raise ContainerError(f"{path}: bad magic {got!r}, expected {want!r}")


def write_raster(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ContainerError(f"raster must be HxW or HxWxC, got shape {array.shape}")
    kind = array.dtype.kind
    if kind not in _CODE_FOR_KIND:
        raise ContainerError(f"unsupported raster dtype {array.dtype}")
    code = _CODE_FOR_KIND[kind]
    payload = np.ascontiguousarray(array, dtype=_DTYPE_CODES[code])
    h, w, c = payload.shape
    with open(path, "wb") as fh:
        fh.write(_RASTER_MAGIC)
        fh.write(struct.pack("<IIIIB", _VERSION, h, w, c, code))
        fh.write(payload.tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        _check_magic(fh.read(4), _RASTER_MAGIC, path)
        version, h, w, c, code = struct.unpack("<IIIIB", fh.read(17))
        if version != _VERSION:
            raise ContainerError(f"{path}: unsupported raster version {version}")
        if code not in _DTYPE_CODES:
            raise ContainerError(f"{path}: unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        data = np.frombuffer(fh.read(h * w * c * dtype.itemsize), dtype=dtype)
    if data.size != h * w * c:
        raise ContainerError(f"{path}: truncated payload")
    arr = data.reshape(h, w, c)
    return arr[:, :, 0] if c == 1 and code == 1 else arr


_SPACE_CODES = {"feature": 0, "output": 1}
_SPACE_NAMES = {v: k for k, v in _SPACE_CODES.items()}


def write_bank_blob(path, dim: int, space_tag: str, classes) -> None:
    """classes: iterable of (count, mean (D,), cov (D, D))."""
    classes = list(classes)
    with open(path, "wb") as fh:
        fh.write(_BANK_MAGIC)
        fh.write(struct.pack("<IIIB", _VERSION, dim, len(classes), _SPACE_CODES[space_tag]))
        for count, mean, cov in classes:
            fh.write(struct.pack("<Q", int(count)))
            fh.write(np.ascontiguousarray(mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(cov, dtype="<f8").tobytes())


def read_bank_blob(path):
    """Returns (dim, space_tag, [(count, mean, cov), ...])."""
    with open(path, "rb") as fh:
        _check_magic(fh.read(4), _BANK_MAGIC, path)
        version, dim, k, space = struct.unpack("<IIIB", fh.read(13))
        if version != _VERSION:
            raise ContainerError(f"{path}: unsupported bank version {version}")
        classes = []
        for _ in range(k):
            (count,) = struct.unpack("<Q", fh.read(8))
            mean = np.frombuffer(fh.read(8 * dim), dtype="<f8").copy()
            cov = np.frombuffer(fh.read(8 * dim * dim), dtype="<f8").reshape(dim, dim).copy()
            classes.append((count, mean, cov))
    return dim, _SPACE_NAMES[space], classes


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MODEL_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(arrays)))
        items = list(arrays.items())
        for name, arr in items:
            raw = name.encode("ascii")
            arr = np.asarray(arr)
            fh.write(struct.pack("<B", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        for _, arr in items:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        _check_magic(fh.read(4), _MODEL_MAGIC, path)
        version, n = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ContainerError(f"{path}: unsupported checkpoint version {version}")
        table = []
        for _ in range(n):
            (name_len,) = struct.unpack("<B", fh.read(1))
            name = fh.read(name_len).decode("ascii")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            table.append((name, shape))
        out = {}
        for name, shape in table:
            size = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(fh.read(8 * size), dtype="<f8").reshape(shape).copy()
    return out


def write_embeddings(path, vectors: np.ndarray, labels: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    if vectors.ndim != 2 or labels.shape != (vectors.shape[0],):
        raise ContainerError("embeddings need an (N, D) vector array and (N,) labels")
    n, dim = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_EMBED_MAGIC)
        fh.write(struct.pack("<IQI", _VERSION, n, dim))
        for vec, lab in zip(vectors, labels):
            fh.write(struct.pack("<i", int(lab)))
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


def read_embeddings(path):
    with open(path, "rb") as fh:
        _check_magic(fh.read(4), _EMBED_MAGIC, path)
        version, n, dim = struct.unpack("<IQI", fh.read(16))
        if version != _VERSION:
            raise ContainerError(f"{path}: unsupported embedding version {version}")
        vectors = np.empty((n, dim), dtype=np.float64)
        labels = np.empty(n, dtype=np.int32)
        for i in range(n):
            (labels[i],) = struct.unpack("<i", fh.read(4))
            vectors[i] = np.frombuffer(fh.read(8 * dim), dtype="<f8")
    return vectors, labels


def write_manifest(path, entries) -> None:
    """entries: iterable of (index, domain, image_relpath, label_relpath)."""
    lines = ["# index domain image label"]
    for idx, domain, image_rel, label_rel in entries:
        lines.append(f"{idx} {domain} {image_rel} {label_rel}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path):
    entries = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        idx, domain, image_rel, label_rel = line.split()
        entries.append((int(idx), domain, image_rel, label_rel))
    return entries
