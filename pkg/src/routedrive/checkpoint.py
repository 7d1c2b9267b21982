"""Binary checkpoint format.

Layout (little-endian)::

    b"VDRV"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, name (UTF-8), u8 rank, u64 dims[rank], f32 data
    u32 text_len, text (UTF-8 JSON: model config, vocabulary, normalization)

Parameters are stored as float32, so the first save quantizes; a second
save of the loaded model reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tokenizer as tk
from .errors import DataFormatError
from .model import Model, ModelConfig, init_params
from .numerics import ParamStore
from .tokenizer import SymbolVocab

MAGIC = b"VDRV"
VERSION = 1


def normalization_constants() -> dict[str, float]:
    return {
        "position_scale": tk.POSITION_SCALE,
        "speed_scale": tk.SPEED_SCALE,
        "accel_scale": tk.ACCEL_SCALE,
    }


def encode_checkpoint(model: Model, vocab: SymbolVocab, norms: dict[str, float] | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(model.store))]
    for name, t in model.store.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    meta = {
        "model": model.cfg.to_dict(),
        "vocab": vocab.to_text(),
        "norms": norms if norms is not None else normalization_constants(),
    }
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(text)))
    parts.append(text)
    return b"".join(parts)


def save_checkpoint(model: Model, vocab: SymbolVocab, path: str | Path, norms: dict[str, float] | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, vocab, norms))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataFormatError(
                f"truncated checkpoint: need {n} bytes for {what} at byte offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> tuple[Model, SymbolVocab, dict[str, float]]:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DataFormatError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}, expected {VERSION}")
    store = ParamStore()
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"tensor {i} name is not UTF-8 (byte offset {r.pos - nlen})") from None
        (rank,) = r.unpack("<B", f"rank of {name!r}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        try:
            store.add(name, data.astype(np.float64))
        except KeyError as exc:
            raise DataFormatError(str(exc)) from None
    (tlen,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(tlen, "metadata").decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["model"])
        vocab = SymbolVocab.from_text(meta["vocab"])
        norms = {k: float(v) for k, v in meta["norms"].items()}
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"bad checkpoint metadata: {exc}") from None
    if r.pos != len(buf):
        raise DataFormatError(f"trailing bytes after checkpoint end at byte offset {r.pos}")
    if norms != normalization_constants():
        raise DataFormatError(f"checkpoint normalization {norms} differs from this build")
    expected = init_params(cfg)
    if set(expected.names()) != set(store.names()):
        missing = sorted(set(expected.names()) - set(store.names()))
        extra = sorted(set(store.names()) - set(expected.names()))
        raise DataFormatError(f"checkpoint tensors do not match config: missing {missing}, extra {extra}")
    for name, t in expected.items():
        if store[name].shape != t.shape:
            raise DataFormatError(f"tensor {name!r} has shape {store[name].shape}, expected {t.shape}")
    return Model(cfg, store), vocab, norms


def load_checkpoint(path: str | Path) -> tuple[Model, SymbolVocab, dict[str, float]]:
    return decode_checkpoint(Path(path).read_bytes())
