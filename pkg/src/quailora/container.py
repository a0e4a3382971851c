"""Bit-exact on-disk container for named tensors (QTNZ format).

File layout, all multi-byte numerics little-endian::

    magic   "QTNZ"                      4 bytes
    version u32 = 1                     4 bytes
    manifest_len u64                    8 bytes
    manifest                            UTF-8 JSON array
    payload                             raw tensor bytes

Each manifest element is ``{name, dtype, shape, offset, nbytes}`` with
offsets relative to the start of the payload.  Supported dtypes are
f64, f32, i8, u8 and u4packed (two 4-bit codes per byte, odd element
counts padded into the final byte).
"""

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .quantizer import DoubleQuantScales, QuantizedTensor

__all__ = [
    "TensorEntry",
    "TensorContainer",
    "write_container",
    "read_container",
    "write_quantized",
    "read_quantized",
]

MAGIC = b"QTNZ"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")

_NUMPY_DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "i8": np.dtype("i1"),
    "u8": np.dtype("u1"),
}


def _expected_nbytes(dtype: str, shape) -> int:
    count = math.prod(shape)
    if dtype == "u4packed":
        return (count + 1) // 2
    return count * _NUMPY_DTYPES[dtype].itemsize


def _check_name(name):
    if not isinstance(name, str) or not name:
        raise FormatError(f"name: must be a non-empty string, got {name!r}")
    if "\x00" in name:
        raise FormatError(f"name: {name!r} contains NUL")


@dataclass(frozen=True)
class TensorEntry:
    dtype: str
    shape: tuple
    data: bytes

    def __post_init__(self):
        if self.dtype not in _NUMPY_DTYPES and self.dtype != "u4packed":
            raise FormatError(f"dtype: unknown dtype {self.dtype!r}")
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if any(d < 0 for d in shape):
            raise FormatError(f"shape: negative dimension in {shape}")
        expected = _expected_nbytes(self.dtype, shape)
        if len(self.data) != expected:
            raise FormatError(
                f"nbytes: {len(self.data)} bytes for dtype {self.dtype} shape "
                f"{shape}, expected {expected}"
            )


class TensorContainer:
    """Ordered map from tensor name to (dtype, shape, raw bytes)."""

    def __init__(self):
        self.entries: dict[str, TensorEntry] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list:
        return list(self.entries)

    def set_entry(self, name: str, entry: TensorEntry):
        _check_name(name)
        self.entries[name] = entry

    def set_array(self, name: str, arr):
        """Store a numpy array under its natural container dtype."""
        arr = np.ascontiguousarray(arr)
        by_kind = {"float64": "f64", "float32": "f32", "int8": "i8", "uint8": "u8"}
        dtype = by_kind.get(arr.dtype.name)
        if dtype is None:
            raise FormatError(f"dtype: unsupported array dtype {arr.dtype}")
        self.set_entry(
            name,
            TensorEntry(
                dtype=dtype,
                shape=arr.shape,
                data=arr.astype(_NUMPY_DTYPES[dtype]).tobytes(),
            ),
        )

    def set_packed4(self, name: str, shape, packed):
        """Store packed 4-bit codes for a tensor of logical ``shape``."""
        data = np.ascontiguousarray(packed, dtype=np.uint8).tobytes()
        self.set_entry(name, TensorEntry(dtype="u4packed", shape=tuple(shape), data=data))

    def set_json(self, name: str, obj):
        blob = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.set_entry(name, TensorEntry(dtype="u8", shape=(len(blob),), data=blob))

    def get_entry(self, name: str) -> TensorEntry:
        if name not in self.entries:
            raise KeyError(f"container has no tensor named {name!r}")
        return self.entries[name]

    def get_array(self, name: str) -> np.ndarray:
        entry = self.get_entry(name)
        if entry.dtype == "u4packed":
            raise FormatError(f"dtype: {name!r} is packed 4-bit, use get_packed4")
        arr = np.frombuffer(entry.data, dtype=_NUMPY_DTYPES[entry.dtype])
        return arr.reshape(entry.shape).copy()

    def get_packed4(self, name: str):
        entry = self.get_entry(name)
        if entry.dtype != "u4packed":
            raise FormatError(f"dtype: {name!r} is {entry.dtype}, not u4packed")
        return entry.shape, np.frombuffer(entry.data, dtype=np.uint8).copy()

    def get_json(self, name: str):
        entry = self.get_entry(name)
        return json.loads(entry.data.decode("utf-8"))


def write_container(path, container: TensorContainer):
    """Serialize a container; see the module docstring for the layout."""
    manifest = []
    offset = 0
    for name, entry in container.entries.items():
        manifest.append(
            {
                "name": name,
                "dtype": entry.dtype,
                "shape": list(entry.shape),
                "offset": offset,
                "nbytes": len(entry.data),
            }
        )
        offset += len(entry.data)
    blob = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        f.write(blob)
        for entry in container.entries.values():
            f.write(entry.data)


def read_container(path) -> TensorContainer:
    """Parse and validate a QTNZ file; malformed input raises FormatError."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"header: file is {len(raw)} bytes, need {_HEADER.size}")
    magic, version, manifest_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError(f"version: expected {VERSION}, got {version}")
    if _HEADER.size + manifest_len > len(raw):
        raise FormatError(
            f"manifest_len: {manifest_len} exceeds remaining {len(raw) - _HEADER.size} bytes"
        )
    try:
        manifest = json.loads(raw[_HEADER.size : _HEADER.size + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest: not valid UTF-8 JSON ({e})") from e
    if not isinstance(manifest, list):
        raise FormatError("manifest: top level must be an array")

    payload = raw[_HEADER.size + manifest_len :]
    container = TensorContainer()
    spans = []
    for i, item in enumerate(manifest):
        if not isinstance(item, dict):
            raise FormatError(f"manifest[{i}]: must be an object")
        missing = {"name", "dtype", "shape", "offset", "nbytes"} - set(item)
        if missing:
            raise FormatError(f"manifest[{i}]: missing fields {sorted(missing)}")
        name, dtype, shape = item["name"], item["dtype"], item["shape"]
        offset, nbytes = item["offset"], item["nbytes"]
        _check_name(name)
        if name in container:
            raise FormatError(f"name: duplicate tensor name {name!r}")
        if not isinstance(shape, list) or not all(isinstance(d, int) for d in shape):
            raise FormatError(f"shape: {name!r} has non-integer shape {shape!r}")
        if not isinstance(offset, int) or not isinstance(nbytes, int) or offset < 0 or nbytes < 0:
            raise FormatError(f"offset: {name!r} has invalid offset/nbytes")
        if offset + nbytes > len(payload):
            raise FormatError(
                f"offset: {name!r} spans [{offset}, {offset + nbytes}) beyond "
                f"payload of {len(payload)} bytes"
            )
        entry = TensorEntry(dtype=dtype, shape=tuple(shape), data=payload[offset : offset + nbytes])
        if nbytes != len(entry.data) or nbytes != _expected_nbytes(dtype, entry.shape):
            raise FormatError(f"nbytes: {name!r} declares {nbytes}, expected "
                              f"{_expected_nbytes(dtype, entry.shape)}")
        spans.append((offset, offset + nbytes, name))
        container.set_entry(name, entry)

    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"offset: tensors {n0!r} and {n1!r} overlap")
    return container


def write_quantized(container: TensorContainer, name: str, q: QuantizedTensor):
    """Store a quantized tensor under the three-entry convention.

    Codes land in ``<name>/q_codes`` (u4packed or i8) and metadata in a
    ``<name>/q_meta`` JSON blob.  Plain scales go to ``<name>/q_scales``
    as f32; double-quantized scales expand into the code/scale/offset
    triplet ``<name>/q_scale_codes|q_scale_level2_scale|q_scale_level2_offset``.
    """
    if q.bits == 4:
        container.set_packed4(f"{name}/q_codes", q.shape, q.codes)
    else:
        container.set_array(f"{name}/q_codes", np.asarray(q.codes, dtype=np.int8).reshape(q.shape))
    meta = {
        "bits": q.bits,
        "block_size": q.block_size,
        "shape": list(q.shape),
        "double_quant": isinstance(q.scales, DoubleQuantScales),
    }
    if isinstance(q.scales, DoubleQuantScales):
        meta["block2_size"] = q.scales.block2_size
        container.set_array(f"{name}/q_scale_codes", q.scales.scale_codes)
        container.set_array(f"{name}/q_scale_level2_scale", q.scales.level2_scale)
        container.set_array(f"{name}/q_scale_level2_offset", q.scales.level2_offset)
    else:
        container.set_array(f"{name}/q_scales", np.asarray(q.scales, dtype=np.float32))
    container.set_json(f"{name}/q_meta", meta)


def read_quantized(container: TensorContainer, name: str) -> QuantizedTensor:
    """Rebuild a quantized tensor stored by :func:`write_quantized`."""
    meta = container.get_json(f"{name}/q_meta")
    bits = int(meta["bits"])
    shape = tuple(int(d) for d in meta["shape"])
    if bits == 4:
        _, codes = container.get_packed4(f"{name}/q_codes")
    else:
        codes = container.get_array(f"{name}/q_codes").reshape(-1)
    if meta.get("double_quant"):
        scales = DoubleQuantScales(
            scale_codes=container.get_array(f"{name}/q_scale_codes").reshape(-1),
            block2_size=int(meta["block2_size"]),
            level2_scale=container.get_array(f"{name}/q_scale_level2_scale").reshape(-1),
            level2_offset=container.get_array(f"{name}/q_scale_level2_offset").reshape(-1),
        )
    else:
        scales = container.get_array(f"{name}/q_scales").reshape(-1)
    return QuantizedTensor(
        shape=shape,
        bits=bits,
        block_size=int(meta["block_size"]),
        codes=codes,
        scales=scales,
    )
