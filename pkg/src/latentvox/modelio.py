"""Binary serialization for network models (LBNM).

Layout (all little-endian, CRC32 of everything before it appended last):

  magic "LBNM" | version u16 | layer_count u16
  per layer:
    kind u8 | in u32 | out u32 | kernel u8 | stride u8 | padding u8 |
    has_bias u8 | negative_slope f32 | factor u8 | frozen u8 | provenance u8 |
    tensor_count u8
    per tensor (sorted by name): name_len u8 + utf8 | dtype u8 | ndim u8 |
      dims u32 each | raw bytes
  meta_len u32 | canonical-JSON utf8 (optional metadata dict)
  crc32 u32

Save is deterministic: save(load(save(m))) is byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import CrcMismatchError, FormatError, TruncatedStreamError, UnsupportedVersionError
from .net import KINDS, LayerSpec, NetworkModel

MAGIC = b"LBNM"
VERSION = 1

_PROV = ("FreshInit", "FromReference", "Retrained")
_PAD = ("same", "valid")
_DTYPES = (np.dtype("<f4"), np.dtype("<f8"))


class ByteWriter:
    def __init__(self):
        self.buf = bytearray()

    def raw(self, b):
        self.buf += b

    def pack(self, fmt, *vals):
        self.buf += struct.pack("<" + fmt, *vals)

    def string(self, s, lenfmt="B"):
        b = s.encode("utf-8")
        self.pack(lenfmt, len(b))
        self.raw(b)

    def blob(self, b):
        self.pack("I", len(b))
        self.raw(b)

    def bytes(self):
        return bytes(self.buf)


class ByteReader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def raw(self, n):
        if self.pos + n > len(self.data):
            raise TruncatedStreamError(f"need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.raw(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def string(self, lenfmt="B"):
        n = self.unpack(lenfmt)
        return self.raw(n).decode("utf-8")

    def blob(self):
        return self.raw(self.unpack("I"))

    def done(self):
        return self.pos >= len(self.data)


def _write_tensor(w, name, arr):
    w.string(name)
    if arr.dtype == np.float32:
        dt = 0
    elif arr.dtype == np.float64:
        dt = 1
    else:
        raise FormatError(f"unsupported tensor dtype {arr.dtype}")
    w.pack("BB", dt, arr.ndim)
    for d in arr.shape:
        w.pack("I", d)
    w.raw(np.ascontiguousarray(arr, dtype=_DTYPES[dt]).tobytes())


def _read_tensor(r):
    name = r.string()
    dt, ndim = r.unpack("BB")
    if dt >= len(_DTYPES):
        raise FormatError(f"unknown tensor dtype code {dt}")
    shape = tuple(r.unpack("I") for _ in range(ndim))
    n = int(np.prod(shape)) if shape else 1
    arr = np.frombuffer(r.raw(n * _DTYPES[dt].itemsize), dtype=_DTYPES[dt]).reshape(shape).copy()
    return name, arr


def model_bytes(model: NetworkModel, meta: dict | None = None) -> bytes:
    w = ByteWriter()
    w.raw(MAGIC)
    w.pack("HH", VERSION, len(model.layers))
    for spec, params, frozen, prov in zip(model.layers, model.params,
                                          model.frozen, model.provenance):
        w.pack("B", KINDS.index(spec.kind))
        w.pack("IIBBB", spec.in_channels, spec.out_channels, spec.kernel,
               spec.stride, _PAD.index(spec.padding))
        w.pack("Bd", int(spec.has_bias), spec.negative_slope)
        w.pack("BBB", spec.factor, int(frozen), _PROV.index(prov))
        w.pack("B", len(params))
        for name in sorted(params):
            _write_tensor(w, name, params[name])
    meta_json = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    w.blob(meta_json)
    w.pack("I", zlib.crc32(w.buf) & 0xFFFFFFFF)
    return w.bytes()


def model_from_bytes(data: bytes) -> tuple[NetworkModel, dict]:
    if len(data) < 12:
        raise TruncatedStreamError("model blob shorter than header")
    stored = struct.unpack("<I", data[-4:])[0]
    computed = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != computed:
        raise CrcMismatchError("model blob", stored, computed)
    r = ByteReader(data[:-4])
    if r.raw(4) != MAGIC:
        raise FormatError("bad model magic")
    version, n_layers = r.unpack("HH")
    if version != VERSION:
        raise UnsupportedVersionError(f"model version {version}, expected {VERSION}")
    layers, params, frozen, prov = [], [], [], []
    for _ in range(n_layers):
        kind = KINDS[r.unpack("B")]
        cin, cout, kernel, stride, pad = r.unpack("IIBBB")
        has_bias, slope = r.unpack("Bd")
        factor, frz, pv = r.unpack("BBB")
        layers.append(LayerSpec(kind, cin, cout, kernel, stride, _PAD[pad],
                                bool(has_bias), float(slope), factor))
        n_tensors = r.unpack("B")
        p = {}
        for _ in range(n_tensors):
            name, arr = _read_tensor(r)
            p[name] = arr
        params.append(p)
        frozen.append(bool(frz))
        prov.append(_PROV[pv])
    meta = json.loads(r.blob().decode("utf-8"))
    return NetworkModel(layers, params, frozen, prov), meta


def save_model(path, model: NetworkModel, meta: dict | None = None):
    with open(path, "wb") as f:
        f.write(model_bytes(model, meta))


def load_model(path) -> tuple[NetworkModel, dict]:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
