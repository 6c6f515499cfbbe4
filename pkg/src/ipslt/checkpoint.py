"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"IPSLT1" | u32 version | u32 entry count | entries...

    entry := u16 name length | name (utf-8) | u8 kind | body
    kind 0 (text):  u64 byte length | utf-8 JSON
    kind 1 (array): u8 ndim | u32 dims[ndim] | u64 byte length | float32 payload

Entry names: ``config``, ``param/<dotted name>``, ``optim/meta``,
``optim/m/<name>``, ``optim/v/<name>``, ``rng``, ``train_state``.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"IPSLT1"
VERSION = 1
TEXT, ARRAY = 0, 1


@dataclass
class Checkpoint:
    config: dict
    params: OrderedDict
    optimizer: dict = None
    rng_state: dict = None
    train_state: dict = None
    extra: dict = field(default_factory=dict)


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _entries(ckpt):
    yield "config", TEXT, _dumps(ckpt.config)
    for name, arr in ckpt.params.items():
        yield f"param/{name}", ARRAY, arr
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        meta = {k: v for k, v in opt.items() if k not in ("m", "v")}
        yield "optim/meta", TEXT, _dumps(meta)
        for name in opt["m"]:
            yield f"optim/m/{name}", ARRAY, opt["m"][name]
            yield f"optim/v/{name}", ARRAY, opt["v"][name]
    if ckpt.rng_state is not None:
        yield "rng", TEXT, _dumps(ckpt.rng_state)
    if ckpt.train_state is not None:
        yield "train_state", TEXT, _dumps(ckpt.train_state)
    for name, value in ckpt.extra.items():
        yield f"extra/{name}", TEXT, _dumps(value)


def to_bytes(ckpt):
    entries = list(_entries(ckpt))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(entries)))
    for name, kind, value in entries:
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<B", kind))
        if kind == TEXT:
            out.write(struct.pack("<Q", len(value)))
            out.write(value)
        else:
            arr = np.ascontiguousarray(value, dtype="<f4")
            out.write(struct.pack("<B", arr.ndim))
            out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload = arr.tobytes()
            out.write(struct.pack("<Q", len(payload)))
            out.write(payload)
    return out.getvalue()


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError("checkpoint truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(raw):
    r = _Reader(raw)
    if r.take(len(MAGIC)) != MAGIC:
        raise FormatError("not an IPSLT checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config, params = None, OrderedDict()
    meta, moments = None, {"m": OrderedDict(), "v": OrderedDict()}
    rng_state = train_state = None
    extra = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (kind,) = r.unpack("<B")
        if kind == TEXT:
            (n,) = r.unpack("<Q")
            value = json.loads(r.take(n).decode("utf-8"))
        elif kind == ARRAY:
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I") if ndim else ()
            (n,) = r.unpack("<Q")
            if n != 4 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"entry {name}: payload size does not match shape {shape}")
            value = np.frombuffer(r.take(n), dtype="<f4").reshape(shape).astype(np.float32)
        else:
            raise FormatError(f"entry {name}: unknown kind {kind}")
        if name == "config":
            config = value
        elif name.startswith("param/"):
            params[name[6:]] = value
        elif name == "optim/meta":
            meta = value
        elif name.startswith("optim/m/"):
            moments["m"][name[8:]] = value
        elif name.startswith("optim/v/"):
            moments["v"][name[8:]] = value
        elif name == "rng":
            rng_state = value
        elif name == "train_state":
            train_state = value
        elif name.startswith("extra/"):
            extra[name[6:]] = value
        else:
            raise FormatError(f"unknown checkpoint entry {name!r}")
    if r.pos != len(raw):
        raise FormatError("trailing bytes after last checkpoint entry")
    if config is None:
        raise FormatError("checkpoint has no config entry")
    optimizer = None
    if meta is not None:
        optimizer = dict(meta, m=moments["m"], v=moments["v"])
    return Checkpoint(config, params, optimizer, rng_state, train_state, extra)


def save_checkpoint(path, ckpt):
    raw = to_bytes(ckpt)
    with open(path, "wb") as fh:
        fh.write(raw)
    return len(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
