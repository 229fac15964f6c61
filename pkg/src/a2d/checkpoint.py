"""Binary checkpoint format.

Layout: 8-byte magic ``A2DCKPT1``, little-endian uint64 header length, the
UTF-8 JSON header, then little-endian float32 blobs in manifest order.
The header holds the model config, the vocabulary, a manifest of
``{name, shape, offset, nbytes}`` (offsets relative to the first blob),
the names of parameters that are not needed for inference, and free-form
metadata.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocab
from .errors import FormatError
from .transformer import ModelConfig, Transformer

MAGIC = b"A2DCKPT1"
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    vocab: Vocab | None = None
    non_inference: set[str] = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    def build_model(self, dtype=np.float32) -> Transformer:
        model = Transformer(self.config, seed=0, dtype=dtype)
        for name, p in model.params.items():
            if name not in self.params:
                raise FormatError(f"checkpoint lacks parameter {name!r}")
            arr = self.params[name]
            if arr.shape != p.shape:
                raise FormatError(f"parameter {name!r} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.astype(dtype)
        return model.eval()

    @property
    def has_aam(self) -> bool:
        return any(n.startswith("aam.") for n in self.params)


def save_checkpoint(path: str | Path, model: Transformer, vocab: Vocab | None = None,
                    extra: dict | None = None, meta: dict | None = None) -> Path:
    """Write ``model`` parameters plus ``extra`` (non-inference) arrays."""
    path = Path(path)
    named = [(n, np.asarray(t.data)) for n, t in model.named_parameters()]
    extra_named = [(n, np.asarray(getattr(t, "data", t))) for n, t in (extra or {}).items()]
    manifest, blobs, offset = [], [], 0
    for name, arr in named + extra_named:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format": 1,
        "config": model.config.to_dict(),
        "vocab": vocab.content_tokens if vocab is not None else None,
        "params": manifest,
        "non_inference": [n for n, _ in extra_named],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_LEN.pack(len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an A2D checkpoint")
    pos = len(MAGIC)
    if len(buf) < pos + _LEN.size:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    base = pos + hlen
    params = {}
    for entry in header["params"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(buf):
            raise FormatError(f"{path}: truncated blob for {entry['name']!r}")
        arr = np.frombuffer(buf[start:end], dtype="<f4").reshape(entry["shape"])
        params[entry["name"]] = arr.copy()
    vocab = Vocab(header["vocab"]) if header.get("vocab") is not None else None
    return Checkpoint(ModelConfig.from_dict(header["config"]), params, vocab,
                      set(header.get("non_inference", [])), header.get("meta", {}))
