"""Sectioned binary checkpoints.

Layout::

    magic     b"VCKP"
    version   uint16
    count     uint32   number of sections
    sections  count x (name_len uint16, name utf-8, size uint64, payload)

Sections are ``config`` (INI text), ``meta`` (JSON: step, epoch, seed, RNG
states, code version), ``params`` and ``optim`` (a uint32 count followed by
pairs of length-prefixed name and tensor block, see ``tensor.serialize``).
Forward-incompatible layout changes bump ``VERSION``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CheckpointVersionError, ParseError
from .tensor.serialize import read_tensor, write_tensor

MAGIC = b"VCKP"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _pack_named(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    return buf.getvalue()


def _unpack_named(payload: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(payload)
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", buf.read(2))
        name = buf.read(n).decode()
        out[name] = read_tensor(buf)
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    meta = dict(ckpt.meta)
    meta.setdefault("code_version", __version__)
    sections = [("config", ckpt.config_text.encode()),
                ("meta", json.dumps(meta, sort_keys=True).encode()),
                ("params", _pack_named(ckpt.params)),
                ("optim", _pack_named(ckpt.optim))]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(sections)))
    for name, payload in sections:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def read_checkpoint_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise ParseError("not a checkpoint (bad magic)", offset=0)
    if len(data) < 10:
        raise ParseError("truncated checkpoint header", offset=len(data))
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    pos = 10
    sections = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (size,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            if pos + size > len(data):
                raise ParseError(f"section {name!r} truncated", offset=pos)
            sections[name] = data[pos:pos + size]
            pos += size
    except struct.error as exc:
        raise ParseError("truncated checkpoint", offset=pos) from exc
    missing = {"config", "meta", "params"} - set(sections)
    if missing:
        raise ParseError(f"checkpoint lacks section(s) {sorted(missing)}", offset=pos)
    return Checkpoint(sections["config"].decode(), _unpack_named(sections["params"]),
                      _unpack_named(sections["optim"]) if "optim" in sections else {},
                      json.loads(sections["meta"]))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return read_checkpoint_bytes(Path(path).read_bytes())
