"""Binary checkpoint format.

Layout, all integers little-endian:

    bytes 0..3   magic "SRNN"
    u32          format version (currently 1)
    u32          metadata byte length, then that many bytes of UTF-8
                 "key=value" lines (newline separated)
    u32          tensor count
    per tensor:  u16 name length, name bytes (UTF-8),
                 u8 dtype tag (0 = float32, 1 = float64),
                 u8 ndim, ndim x u32 dims,
                 raw element bytes

Values are written exactly, so a load followed by a save reproduces the
file byte for byte.  Writes go through a temp file and os.replace so a
crash never leaves a half-written checkpoint at the target path.
"""

import io
import os
import struct

import numpy as np

from .errors import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import SampleRnn, TierConfig

MAGIC = b"SRNN"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.float32, 1: np.float64}


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"unexpected end of file while reading {what}")
    return buf


def write_checkpoint(path, metadata: dict, tensors: dict) -> None:
    """Write metadata (str values) and named float arrays to ``path``."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))

    lines = []
    for k, v in metadata.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise CheckpointFormatError(f"metadata key/value not encodable: {k!r}")
        lines.append(f"{k}={v}")
    meta = "\n".join(lines).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)

    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise CheckpointFormatError(f"tensor name too long: {name!r}")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Read back (metadata, tensors) written by ``write_checkpoint``."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            if MAGIC.startswith(magic):
                raise CheckpointTruncatedError("unexpected end of file while reading magic")
            raise CheckpointFormatError(
                f"not a checkpoint file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(
                f"checkpoint format version {version} (this build reads {VERSION})")

        (meta_len,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        raw = _read_exact(f, meta_len, "metadata")
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"metadata is not valid UTF-8: {e}") from e
        metadata = {}
        for line in text.splitlines():
            if not line:
                continue
            if "=" not in line:
                raise CheckpointFormatError(f"malformed metadata line {line!r}")
            k, _, v = line.partition("=")
            metadata[k] = v

        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
            name = _read_exact(f, name_len, "tensor name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(f, 2, "tensor header"))
            if tag not in _TAG_DTYPES:
                raise CheckpointFormatError(f"tensor {name!r} has unknown dtype tag {tag}")
            dims = struct.unpack(
                f"<{ndim}I", _read_exact(f, 4 * ndim, f"dims of {name!r}"))
            dtype = np.dtype(_TAG_DTYPES[tag]).newbyteorder("<")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            data = _read_exact(f, nbytes, f"data of {name!r}")
            tensors[name] = np.frombuffer(data, dtype=dtype).reshape(dims).astype(
                _TAG_DTYPES[tag])
        trailing = f.read(1)
        if trailing:
            raise CheckpointFormatError("trailing bytes after last tensor")
    return metadata, tensors


# ---- model-level helpers ----

def save_model(path, model: SampleRnn, metadata: dict | None = None) -> None:
    meta = {"kind": "model", "config": model.cfg.to_json()}
    if model.norm_stats is not None:
        meta["norm_mean"] = repr(model.norm_stats.mean)
        meta["norm_std"] = repr(model.norm_stats.std)
    if metadata:
        meta.update(metadata)
    write_checkpoint(path, meta, {n: p.data for n, p in model.parameters().items()})


def restore_parameters(model: SampleRnn, tensors: dict) -> None:
    """Copy stored arrays into the model, name and shape checked."""
    params = model.parameters()
    stored = {n: t for n, t in tensors.items() if not n.startswith(("state.", "opt."))
              and not n.endswith((".adam_m", ".adam_v"))}
    missing = set(params) - set(stored)
    extra = set(stored) - set(params)
    if missing or extra:
        raise CheckpointShapeError(
            f"parameter set mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, p in params.items():
        arr = stored[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise CheckpointShapeError(
                f"{name}: stored shape {arr.shape} != model shape {p.data.shape}")
        p.data[...] = arr.astype(p.data.dtype)


def load_model(path) -> tuple[SampleRnn, dict]:
    metadata, tensors = read_checkpoint(path)
    if "config" not in metadata:
        raise CheckpointFormatError("checkpoint has no model config")
    cfg = TierConfig.from_json(metadata["config"])
    model = SampleRnn(cfg, seed=0)
    if "norm_mean" in metadata:
        from .quantize import NormStats

        model.norm_stats = NormStats(float(metadata["norm_mean"]),
                                     float(metadata["norm_std"]))
    restore_parameters(model, tensors)
    return model, metadata
