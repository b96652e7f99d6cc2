"""Binary checkpoints.

Layout (little-endian)::

    b"NPCK" | u32 version | u32 len, family (utf-8) | u32 len, config (utf-8 key=value lines)
    | u32 n_tensors | per tensor: u32 len, name | u32 ndim | u32 dims... | f64 values
    | u32 CRC32 of every preceding byte

Values are always stored as float64 so a save/load round trip is exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .models import ModelConfig, NeuralProcess, model_from_params

MAGIC = b"NPCK"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class FamilyMismatchError(CheckpointError):
    pass


def _blob(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _U32.pack(len(raw)) + raw


def encode_checkpoint(model: NeuralProcess) -> bytes:
    cfg_text = "\n".join(f"{k}={v}" for k, v in model.cfg.to_dict().items())
    parts = [MAGIC, _U32.pack(VERSION), _blob(model.cfg.family), _blob(cfg_text), _U32.pack(len(model.params))]
    for name in sorted(model.params):
        arr = np.asarray(model.params[name])
        parts.append(_blob(name))
        parts.append(_U32.pack(arr.ndim))
        parts.extend(_U32.pack(d) for d in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return payload + _U32.pack(zlib.crc32(payload) & 0xFFFFFFFF)


def save_checkpoint(model: NeuralProcess, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(model))


class _Reader:
    def __init__(self, raw: bytes, end: int):
        self.raw, self.pos, self.end = raw, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedCheckpointError("checkpoint is truncated")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def text(self) -> str:
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ChecksumError("checkpoint text field is corrupt") from exc


def decode_checkpoint(raw: bytes, family: str | None = None) -> NeuralProcess:
    if len(raw) < 12:
        raise TruncatedCheckpointError("checkpoint is truncated")
    if raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = _U32.unpack_from(raw, 4)[0]
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body_end = len(raw) - 4
    r = _Reader(raw, body_end)
    r.take(8)
    tag = r.text()
    cfg_text = r.text()
    n_tensors = r.u32()
    params = {}
    for _ in range(n_tensors):
        name = r.text()
        ndim = r.u32()
        if ndim > 8:
            raise ChecksumError("checkpoint tensor header is corrupt")
        shape = tuple(r.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        params[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != body_end:
        raise TruncatedCheckpointError("checkpoint length does not match its contents")
    stored = _U32.unpack_from(raw, body_end)[0]
    if stored != (zlib.crc32(raw[:body_end]) & 0xFFFFFFFF):
        raise ChecksumError("checkpoint checksum mismatch")
    if family is not None and tag != family:
        raise FamilyMismatchError(f"checkpoint holds a {tag!r} model, not {family!r}")
    values = dict(line.split("=", 1) for line in cfg_text.splitlines() if line)
    cfg = ModelConfig.from_dict(values)
    if cfg.family != tag:
        raise CheckpointError("checkpoint family tag disagrees with its config block")
    return model_from_params(cfg, params)


def load_checkpoint(path: str | Path, family: str | None = None) -> NeuralProcess:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), family)
