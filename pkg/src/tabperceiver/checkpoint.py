"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TABP"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_blocks
    per block: u16 name_len, name, u8 ndim, ndim x u32 dims, float32 data

The JSON header holds the model config, the data-dependent model state
(schema, bin boundaries or scaling), and any caller-supplied extras.
"""
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, model_from_meta

MAGIC = b"TABP"
VERSION = 1


def _header_bytes(model, extra):
    header = {"config": model.cfg.to_dict(), "meta": model.meta(), "extra": extra or {}}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dumps(model, extra=None):
    header = _header_bytes(model, extra)
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", p.ndim) + struct.pack(f"<{p.ndim}I", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, model, extra=None):
    """Write atomically: a temporary sibling is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(model, extra))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf):
    """Parse checkpoint bytes -> (model, header)."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError("not a checkpoint: bad magic bytes")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    (n_blocks,) = r.unpack("<I")
    state = {}
    for _ in range(n_blocks):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float64)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after parameter blocks")
    model = model_from_meta(cfg, header["meta"])
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"parameter blocks do not match the config: {exc}") from exc
    return model, header


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
