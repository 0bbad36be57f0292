"""Model checkpoints: a little-endian binary file, bit-exact on roundtrip.

Layout:

    magic       4 bytes  "BTRU"
    version     u32      currently 1
    config_len  u32
    config      utf-8 key=value lines (ModelConfig.to_text)
    n_params    u32
    per parameter, in registry order:
        name_len u32, name utf-8, rank u32, dims u32 * rank,
        data float32 * prod(dims)

Parameters are stored as 32-bit floats; loading yields a float32 model.
Every parse failure reports the byte offset it happened at.
"""

import struct

import numpy as np

from .model import BiTrUnetModel, ModelConfig

MAGIC = b"BTRU"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class _Reader:
    def __init__(self, buf, label):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"{self.label}: truncated while reading {what} at byte {self.pos} "
                f"(need {n} bytes, {len(self.buf) - self.pos} left)"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def save_checkpoint(model, path):
    """Write all parameters (cast to float32) plus the config."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    cfg = model.config.to_text().encode()
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    chunks.append(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", t.ndim))
        chunks.append(struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    """Rebuild the model from a checkpoint written by ``save_checkpoint``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, str(path))
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(
            f"{path}: bad magic {magic!r} at byte 0, expected {MAGIC!r}"
        )
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported version {version} at byte 4, expected {VERSION}"
        )
    cfg_len = r.u32("config length")
    config = ModelConfig.from_text(r.take(cfg_len, "config").decode())
    model = BiTrUnetModel(config, seed=0, dtype=np.float32)
    n_params = r.u32("parameter count")
    if n_params != len(model.params):
        raise CheckpointError(
            f"{path}: {n_params} parameters in file, model needs "
            f"{len(model.params)}"
        )
    for _ in range(n_params):
        name_len = r.u32("name length")
        name = r.take(name_len, "name").decode()
        if name not in model.params:
            raise CheckpointError(
                f"{path}: unknown parameter {name!r} near byte {r.pos}"
            )
        rank = r.u32(f"{name} rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        t = model.params[name]
        if dims != t.shape:
            raise CheckpointError(
                f"{path}: parameter {name} has dims {dims} in file, "
                f"expected {t.shape}"
            )
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"{name} data")
        t.data = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if r.pos != len(buf):
        raise CheckpointError(
            f"{path}: {len(buf) - r.pos} trailing bytes at byte {r.pos}"
        )
    return model
