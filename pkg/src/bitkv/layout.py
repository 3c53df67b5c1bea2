"""Bit-exact layout math: interleaved 16-bit packing and tiling formulas.

A 16-bit word holds ``pack_num = 16 // bits`` codes.  Inside the word the
codes are not stored in logical order: odd logical indices come first
(descending), then even ones (descending), most-significant field first.
For eight 2-bit codes that is the 7,5,3,1,6,4,2,0 order.

Within an ``n_r``-token block, word row ``r`` packs the tokens
``r, r + S, ..., r + (pack_num - 1) * S`` of one channel, ``S = n_r / pack_num``
(a stride of ``8 * warp_n``).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .core import BitKVError, ShapeError

SUPPORTED_BITS = (2, 4, 8)


class UnsupportedBits(BitKVError, ValueError):
    pass


class CodeOverflow(BitKVError, ValueError):
    pass


@dataclass(frozen=True)
class InterleavePerm:
    bits: int
    order: tuple[int, ...]

    @property
    def pack_num(self) -> int:
        return 16 // self.bits

    @property
    def shifts(self) -> np.ndarray:
        """Bit offset of each logical element, indexed by logical position."""
        out = np.empty(self.pack_num, dtype=np.int64)
        for k, elem in enumerate(self.order):
            out[elem] = self.bits * (self.pack_num - 1 - k)
        return out


def _check_bits(bits: int, allow_passthrough: bool = False) -> None:
    if bits in SUPPORTED_BITS or (allow_passthrough and bits == 16):
        return
    raise UnsupportedBits(f"unsupported bit width {bits}; expected one of {SUPPORTED_BITS}")


@lru_cache(maxsize=None)
def interleave_order(bits: int, interleave: bool = True) -> InterleavePerm:
    _check_bits(bits, allow_passthrough=True)
    n = 16 // bits
    if not interleave:
        return InterleavePerm(bits, tuple(range(n)))
    odd = [i for i in range(n - 1, -1, -1) if i % 2]
    even = [i for i in range(n - 1, -1, -1) if i % 2 == 0]
    return InterleavePerm(bits, tuple(odd + even))


def pack_words(codes: np.ndarray, bits: int, perm: InterleavePerm | None = None) -> np.ndarray:
    """Pack ``codes[..., pack_num]`` into ``uint16[...]`` words."""
    _check_bits(bits)
    perm = perm or interleave_order(bits)
    codes = np.asarray(codes)
    if codes.shape[-1] != perm.pack_num:
        raise ShapeError(f"last axis must hold {perm.pack_num} codes, got {codes.shape[-1]}")
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise CodeOverflow(f"codes must lie in [0, {1 << bits}) for {bits}-bit packing")
    c = codes.astype(np.uint32)
    shifts = perm.shifts.astype(np.uint32)
    return np.bitwise_or.reduce(c << shifts, axis=-1).astype(np.uint16)


def unpack_words(words: np.ndarray, bits: int, perm: InterleavePerm | None = None) -> np.ndarray:
    """Inverse of :func:`pack_words`: ``uint16[...]`` to ``uint8[..., pack_num]``."""
    _check_bits(bits)
    perm = perm or interleave_order(bits)
    return kernels.unpack_words(np.asarray(words, dtype=np.uint16), perm.shifts, bits)


def pack_word(codes, bits: int) -> int:
    return int(pack_words(np.asarray(codes), bits))


def unpack_word(word: int, bits: int) -> list[int]:
    return unpack_words(np.uint16(word), bits).tolist()


def pack_block(codes: np.ndarray, bits: int, perm: InterleavePerm | None = None) -> np.ndarray:
    """Pack ``[..., n_r, d]`` token-major codes into ``[..., n_r / pack_num, d]`` words."""
    perm = perm or interleave_order(bits)
    n_r, d = codes.shape[-2:]
    if n_r % perm.pack_num:
        raise ShapeError(f"block of {n_r} tokens is not a multiple of pack_num={perm.pack_num}")
    stride = n_r // perm.pack_num
    grouped = codes.reshape(codes.shape[:-2] + (perm.pack_num, stride, d))
    return pack_words(np.moveaxis(grouped, -3, -1), bits, perm)


def unpack_block(words: np.ndarray, bits: int, perm: InterleavePerm | None = None) -> np.ndarray:
    perm = perm or interleave_order(bits)
    stride, d = words.shape[-2:]
    codes = np.moveaxis(unpack_words(words, bits, perm), -1, -3)
    return codes.reshape(words.shape[:-2] + (stride * perm.pack_num, d))


def residual_block_size(bits: int, warp_n: int) -> int:
    """Tokens per residual flush, ``8 * warp_n * (16 / bits)``."""
    _check_bits(bits, allow_passthrough=True)
    if warp_n < 1:
        raise ShapeError(f"warp_n must be >= 1, got {warp_n}")
    return 8 * warp_n * (16 // bits)


def iteration_count(tile_n: int, warp_n: int) -> int:
    if warp_n < 1 or tile_n % (warp_n * 8):
        raise ShapeError(f"tile_n={tile_n} is not a multiple of 8 * warp_n={8 * warp_n}")
    return tile_n // (warp_n * 8)


def swizzle_col(row, col):
    """XOR swizzle of a column index; a bijection on columns for any fixed row."""
    return row ^ col
