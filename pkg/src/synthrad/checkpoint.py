"""Binary checkpoint format.

Layout, all integers little-endian u32::

    b"SXR1" | version | len + kind (utf-8) | len + config text (utf-8)
    | block count | blocks... | crc32

Each block is ``len + name | ndim | dims... | float32 LE payload``.  The
trailing CRC32 (zlib polynomial) covers every preceding byte.  The config
text holds one ``key=value`` line per entry, keys sorted, values JSON encoded.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SXR1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_text(config: dict) -> str:
    return "".join(f"{k}={json.dumps(config[k], sort_keys=True, separators=(',', ':'))}\n" for k in sorted(config))


def parse_config_text(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        key, sep, val = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        out[key] = json.loads(val)
    return out


@dataclass
class Checkpoint:
    kind: str
    config: dict
    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", VERSION)]

        def put_str(s: str) -> None:
            b = s.encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)

        put_str(self.kind)
        put_str(config_text(self.config))
        parts.append(struct.pack("<I", len(self.blocks)))
        for name, arr in self.blocks.items():
            a = np.asarray(arr)
            put_str(name)
            parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < 12 or raw[:4] != MAGIC:
            raise CheckpointError("not a checkpoint (bad magic)")
        body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint CRC mismatch; file is corrupt")
        pos = 4

        def take(fmt: str):
            nonlocal pos
            size = struct.calcsize(fmt)
            if pos + size > len(body):
                raise CheckpointError("checkpoint truncated")
            vals = struct.unpack_from(fmt, body, pos)
            pos += size
            return vals

        def take_str() -> str:
            nonlocal pos
            (n,) = take("<I")
            if pos + n > len(body):
                raise CheckpointError("checkpoint truncated")
            s = body[pos:pos + n].decode("utf-8")
            pos += n
            return s

        (version,) = take("<I")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        kind = take_str()
        config = parse_config_text(take_str())
        (count,) = take("<I")
        blocks = {}
        for _ in range(count):
            name = take_str()
            (ndim,) = take("<I")
            shape = take(f"<{ndim}I")
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(body):
                raise CheckpointError(f"block {name!r} truncated")
            blocks[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
        if pos != len(body):
            raise CheckpointError(f"{len(body) - pos} trailing bytes after the last block")
        return cls(kind, config, blocks)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            raw = Path(path).read_bytes()
        except OSError as e:
            raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
        return cls.from_bytes(raw)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Blocks whose names start with ``prefix + '.'``, with the prefix removed."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.blocks.items() if k.startswith(p)}


def pack_module(prefix: str, module) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in module.state_dict().items()}


def pack_adam(prefix: str, names: list[str], state) -> dict[str, np.ndarray]:
    out = {}
    for name, m, v in zip(names, state.m, state.v):
        out[f"{prefix}.m.{name}"] = m
        out[f"{prefix}.v.{name}"] = v
    return out


def unpack_adam(ckpt: Checkpoint, prefix: str, names: list[str], state, t: int) -> None:
    m, v = ckpt.section(prefix + ".m"), ckpt.section(prefix + ".v")
    if t and (set(m) != set(names) or set(v) != set(names)):
        raise CheckpointError(f"optimizer state {prefix!r} does not match the model parameters")
    state.m = [m[n].copy() for n in names] if t else []
    state.v = [v[n].copy() for n in names] if t else []
    state.t = t
