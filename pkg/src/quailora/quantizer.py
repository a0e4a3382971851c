"""Blockwise low-bit weight quantization.

Two element formats are supported over a shared blockwise absmax scheme:

* 4-bit codebook quantization against the fixed 16-entry NF4 table,
  with codes packed two per byte;
* symmetric 8-bit integer quantization (codes in [-127, 127]).

Blocks run over the row-major flattening of the matrix; the last block
may be short.  Per-block scales are kept in float32 (the on-disk format
for scales), and all arithmetic is done in float64.  First-level scales
can additionally be compressed to 8-bit with a second level of affine
scaling ("double quantization").
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, NumericError, ShapeError
from .linalg import as_matrix

__all__ = [
    "Codebook",
    "DoubleQuantScales",
    "QuantizedTensor",
    "build_nf4_codebook",
    "pack_4bit",
    "unpack_4bit",
    "quantize_blockwise",
    "double_quantize",
    "with_double_quant",
    "dequantize",
    "quant_error",
]

# The 16 NF4 levels, embedded verbatim (float32 constants of the reference
# table, widened to float64).  Covered by a constants test that re-derives
# them from the normal-quantile construction.
_NF4_VALUES = (
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
)


@dataclass(frozen=True)
class Codebook:
    """A strictly increasing 16-entry value table spanning [-1, +1]."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != (16,):
            raise ShapeError(f"codebook must have 16 entries, got shape {v.shape}")
        if not np.all(np.diff(v) > 0):
            raise ShapeError("codebook values must be strictly increasing")
        if v[0] != -1.0 or v[-1] != 1.0:
            raise ShapeError("codebook endpoints must be exactly -1.0 and +1.0")
        if not np.any(v == 0.0):
            raise ShapeError("codebook must contain an exact 0.0")

    @property
    def zero_index(self) -> int:
        return int(np.flatnonzero(self.values == 0.0)[0])


def build_nf4_codebook() -> Codebook:
    """The fixed 16-entry NF4 table used for 4-bit quantization."""
    return Codebook(values=np.array(_NF4_VALUES, dtype=np.float64))


def pack_4bit(codes: np.ndarray) -> np.ndarray:
    """Pack 4-bit code indices two per byte.

    Element ``2k`` goes in the low nibble and ``2k+1`` in the high nibble;
    an odd tail is padded with 0 in the high nibble.
    """
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 1:
        raise ShapeError("codes must be 1-D")
    if codes.size and codes.max() > 0x0F:
        raise ShapeError("4-bit codes must be < 16")
    if codes.size % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    lo = codes[0::2]
    hi = codes[1::2]
    return (lo | (hi << 4)).astype(np.uint8)


def unpack_4bit(packed: np.ndarray, count: int) -> np.ndarray:
    """Inverse of :func:`pack_4bit`, trimming to ``count`` elements."""
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.size != (count + 1) // 2:
        raise FormatError(
            f"packed length {packed.size} does not match {count} 4-bit elements"
        )
    out = np.empty(packed.size * 2, dtype=np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


@dataclass(frozen=True)
class DoubleQuantScales:
    """First-level scales stored as signed bytes plus per-block affine params.

    Reconstruction is ``scale_codes[i] * level2_scale[b] + level2_offset[b]``
    with ``b = i // block2_size``; the result is non-negative.
    """

    scale_codes: np.ndarray
    block2_size: int
    level2_scale: np.ndarray
    level2_offset: np.ndarray

    def reconstruct(self) -> np.ndarray:
        n = self.scale_codes.size
        idx = np.arange(n) // self.block2_size
        return (
            self.scale_codes.astype(np.float64) * self.level2_scale[idx]
            + self.level2_offset[idx]
        )


@dataclass(frozen=True)
class QuantizedTensor:
    """Blockwise-quantized matrix: packed codes plus per-block scales."""

    shape: tuple
    bits: int
    block_size: int
    codes: np.ndarray
    scales: "np.ndarray | DoubleQuantScales"

    @property
    def num_elements(self) -> int:
        return int(self.shape[0]) * int(self.shape[1])

    @property
    def num_blocks(self) -> int:
        return math.ceil(self.num_elements / self.block_size)


def _resolve_codebook(bits: int, codebook) -> "Codebook | None":
    if bits == 4:
        return codebook if codebook is not None else build_nf4_codebook()
    if codebook is not None:
        raise ShapeError("a codebook applies to 4-bit quantization only")
    return None


def quantize_blockwise(w, bits: int, block_size: int = 64, codebook=None) -> QuantizedTensor:
    """Quantize a matrix blockwise with per-block absmax scaling.

    Each block of ``block_size`` consecutive elements (row-major order)
    is scaled by its maximum absolute value.  4-bit elements get the
    codebook index nearest to ``w/scale`` (ties resolved toward the
    lower index); 8-bit elements get ``round(w/scale * 127)`` clamped to
    [-127, 127].  An all-zero block gets scale 0 and the zero code.
    """
    if bits not in (4, 8):
        raise ShapeError(f"bits must be 4 or 8, got {bits}")
    if block_size < 1:
        raise ShapeError(f"block_size must be >= 1, got {block_size}")
    cb = _resolve_codebook(bits, codebook)
    w = as_matrix(w, "w")

    flat = w.ravel()
    total = flat.size
    nblocks = math.ceil(total / block_size) if total else 0
    pad = nblocks * block_size - total
    blocks = np.concatenate([flat, np.zeros(pad)]).reshape(nblocks, block_size)

    absmax = np.max(np.abs(blocks), axis=1) if nblocks else np.zeros(0)
    safe = np.where(absmax > 0.0, absmax, 1.0)
    normalized = blocks / safe[:, None]

    if bits == 4:
        dist = np.abs(normalized[:, :, None] - cb.values[None, None, :])
        codes = np.argmin(dist, axis=2).astype(np.uint8)
        codes[absmax == 0.0, :] = cb.zero_index
        codes = pack_4bit(codes.ravel()[:total])
    else:
        codes = np.clip(np.rint(normalized * 127.0), -127, 127).astype(np.int8)
        codes[absmax == 0.0, :] = 0
        codes = codes.ravel()[:total].copy()

    return QuantizedTensor(
        shape=w.shape,
        bits=bits,
        block_size=block_size,
        codes=codes,
        scales=absmax.astype(np.float32),
    )


def double_quantize(scales, block2_size: int = 256) -> DoubleQuantScales:
    """Compress non-negative first-level scales to signed bytes.

    Within each block of ``block2_size`` scales, the [min, max] range is
    mapped affinely onto the 255 codes [-127, 127]; a zero-range block
    uses unit step so its codes reconstruct exactly.
    """
    s = np.asarray(scales, dtype=np.float64).ravel()
    if not np.all(np.isfinite(s)):
        raise NumericError("scales contain non-finite entries")
    if np.any(s < 0):
        raise ShapeError("scales must be non-negative")
    if block2_size < 1:
        raise ShapeError(f"block2_size must be >= 1, got {block2_size}")

    nblocks = math.ceil(s.size / block2_size) if s.size else 0
    codes = np.empty(s.size, dtype=np.int8)
    l2_scale = np.empty(nblocks)
    l2_offset = np.empty(nblocks)
    for b in range(nblocks):
        blk = s[b * block2_size : (b + 1) * block2_size]
        lo, hi = blk.min(), blk.max()
        step = (hi - lo) / 254.0 if hi > lo else 1.0
        codes[b * block2_size : (b + 1) * block2_size] = (
            np.rint((blk - lo) / step) - 127
        ).astype(np.int8)
        l2_scale[b] = step
        # shifted so that code * scale + offset reconstructs directly
        l2_offset[b] = lo + 127.0 * step
    return DoubleQuantScales(
        scale_codes=codes,
        block2_size=block2_size,
        level2_scale=l2_scale,
        level2_offset=l2_offset,
    )


def with_double_quant(q: QuantizedTensor, block2_size: int = 256) -> QuantizedTensor:
    """Return a copy of ``q`` whose scales are double-quantized."""
    if isinstance(q.scales, DoubleQuantScales):
        raise ShapeError("scales are already double-quantized")
    return QuantizedTensor(
        shape=q.shape,
        bits=q.bits,
        block_size=q.block_size,
        codes=q.codes,
        scales=double_quantize(q.scales, block2_size),
    )


def dequantize(q: QuantizedTensor, codebook=None) -> np.ndarray:
    """Reconstruct the dense float64 matrix encoded by ``q``."""
    cb = _resolve_codebook(q.bits, codebook)
    total = q.num_elements
    if isinstance(q.scales, DoubleQuantScales):
        scales = q.scales.reconstruct()
    else:
        scales = np.asarray(q.scales, dtype=np.float64)
    if scales.size != q.num_blocks:
        raise FormatError(
            f"{scales.size} scales for {q.num_blocks} blocks of {total} elements"
        )

    if q.bits == 4:
        values = cb.values[unpack_4bit(q.codes, total)]
    else:
        codes = np.asarray(q.codes)
        if codes.size != total:
            raise FormatError(f"{codes.size} codes for {total} elements")
        values = codes.astype(np.float64) / 127.0

    per_element = np.repeat(scales, q.block_size)[:total]
    return (values * per_element).reshape(q.shape)


def quant_error(w, q: QuantizedTensor, codebook=None) -> np.ndarray:
    """Quantization error ``w - dequantize(q)``."""
    w = as_matrix(w, "w")
    if w.shape != tuple(q.shape):
        raise ShapeError(f"shape mismatch: weights {w.shape} vs quantized {q.shape}")
    return w - dequantize(q, codebook)
