"""Group-wise asymmetric integer quantization of K/V tiles.

``zero`` is the group minimum and ``scale`` spreads the group range over
``2**bits - 1`` steps; both are kept as 16-bit floats and stored as adjacent
``(scale, zero)`` pairs in the last axis of the params array.

Param layouts for a ``[T, d]`` tile:

* channel-wise (K only): ``(T // group_size, d, 2)``
* token-wise: ``(T, d // group_size, 2)``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import ConfigError, ShapeError

K_CHANNEL = "k-channel"
K_TOKEN = "k-token"
AXES = (K_CHANNEL, K_TOKEN)

# 2**-14: smallest normal float16 magnitude, used when a group has zero range
SCALE_EPS = np.float32(2.0 ** -14)


@dataclass(frozen=True)
class QuantSpec:
    """Bit width and grouping for one cache.

    ``bits == 16`` is passthrough: values are kept as 16-bit floats and never
    quantized.  ``group_size`` applies to K along ``axis``; V is always
    grouped token-wise with ``v_group_size``.
    """

    bits: int = 4
    axis: str = K_CHANNEL
    group_size: int = 64
    v_group_size: int = 128

    @property
    def passthrough(self) -> bool:
        return self.bits == 16

    @property
    def k_channel(self) -> bool:
        return self.axis == K_CHANNEL

    def validate(self, head_dim: int, block_tokens: int) -> "QuantSpec":
        if self.bits not in (2, 4, 8, 16):
            raise ConfigError(f"bits must be one of 2, 4, 8, 16; got {self.bits}")
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES}; got {self.axis!r}")
        if self.group_size <= 0 or self.v_group_size <= 0:
            raise ConfigError("group sizes must be positive")
        if self.passthrough:
            return self
        k_extent = block_tokens if self.k_channel else head_dim
        if k_extent % self.group_size:
            raise ConfigError(
                f"K group_size={self.group_size} does not divide the grouped extent {k_extent}")
        if head_dim % self.v_group_size:
            raise ConfigError(
                f"V group_size={self.v_group_size} does not divide head_dim={head_dim}")
        return self


def default_spec(bits: int, axis: str, head_dim: int, block_tokens: int,
                 group_size: int | None = None) -> QuantSpec:
    """Spec with one group per tile dimension, capped at 64 tokens / 128 channels."""
    if group_size is None:
        group_size = min(64, block_tokens) if axis == K_CHANNEL else min(128, head_dim)
    return QuantSpec(bits, axis, group_size, min(128, head_dim))


def compute_group_params(group, bits: int) -> tuple[float, float]:
    g = np.asarray(group, dtype=np.float32)
    if g.size == 0:
        raise ShapeError("cannot quantize an empty group")
    scale, zero = _params(g.reshape(1, -1), bits, axis=-1)
    return float(scale[0]), float(zero[0])


def _params(x: np.ndarray, bits: int, axis: int) -> tuple[np.ndarray, np.ndarray]:
    lo = x.min(axis=axis)
    hi = x.max(axis=axis)
    scale = (hi - lo) / np.float32((1 << bits) - 1)
    scale = np.maximum(scale, SCALE_EPS)
    return kernels.round_fp16(scale), kernels.round_fp16(lo)


def quantize_group(group, scale, zero, bits: int) -> np.ndarray:
    g = np.asarray(group, dtype=np.float32)
    return _codes(g, np.float32(scale), np.float32(zero), bits)


def _codes(x, scale, zero, bits):
    q = np.rint((x - zero) / scale)
    return np.clip(q, 0, (1 << bits) - 1).astype(np.uint8)


def dequantize_group(codes, scale, zero) -> np.ndarray:
    # float32 multiply-add; dequantized values are scratch and stay 32-bit
    c = np.asarray(codes).astype(np.float32)
    return c * np.float32(scale) + np.float32(zero)


def _grouped(tile: np.ndarray, channel: bool, group_size: int) -> np.ndarray:
    t, d = tile.shape[-2:]
    lead = tile.shape[:-2]
    if channel:
        if t % group_size:
            raise ShapeError(f"group_size={group_size} does not divide {t} tokens")
        # [..., T/g, g, d] -> reduce over axis -2
        return tile.reshape(lead + (t // group_size, group_size, d))
    if d % group_size:
        raise ShapeError(f"group_size={group_size} does not divide head_dim={d}")
    return tile.reshape(lead + (t, d // group_size, group_size))


def quantize_tile(tile, bits: int, channel: bool, group_size: int):
    """Quantize ``[..., T, d]`` values; returns ``(codes uint8, params float16)``."""
    x = np.asarray(tile, dtype=np.float32)
    g = _grouped(x, channel, group_size)
    red = -2 if channel else -1
    scale, zero = _params(g, bits, axis=red)
    codes = _codes(g, np.expand_dims(scale, red), np.expand_dims(zero, red), bits)
    params = np.stack([scale, zero], axis=-1).astype(np.float16)
    return codes.reshape(x.shape), params


def dequantize_tile(codes, params, channel: bool, group_size: int) -> np.ndarray:
    c = np.asarray(codes)
    g = _grouped(c, channel, group_size).astype(np.float32)
    p = np.asarray(params, dtype=np.float32)
    red = -2 if channel else -1
    scale = np.expand_dims(p[..., 0], red)
    zero = np.expand_dims(p[..., 1], red)
    return (g * scale + zero).reshape(c.shape)


def quantize_kv_tile(tile, spec: QuantSpec, is_key: bool):
    if is_key:
        return quantize_tile(tile, spec.bits, spec.k_channel, spec.group_size)
    return quantize_tile(tile, spec.bits, False, spec.v_group_size)
