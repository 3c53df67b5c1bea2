"""Shared types, configuration checks and the query-group transform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class BitKVError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(BitKVError, ValueError):
    pass


class ShapeError(BitKVError, ValueError):
    pass


class CapacityError(BitKVError):
    pass


class StateError(BitKVError):
    pass


class FormatError(BitKVError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EmptyInput(BitKVError, ValueError):
    pass


@dataclass(frozen=True)
class AttentionConfig:
    """Batch, head and tiling geometry for one decode workload.

    ``warp_n`` is the number of logical partitions along the key axis of a
    tile; each partition covers multiples of 8 keys, so ``tile_n`` has to be
    divisible by ``8 * warp_n``.
    """

    batch: int = 1
    heads_q: int = 32
    heads_kv: int = 8
    head_dim: int = 128
    tile_m: int = 16
    tile_n: int = 64
    num_splits: int = 1
    warp_n: int = 4
    warp_m: int = 1

    @property
    def n_group(self) -> int:
        return self.heads_q // self.heads_kv

    @property
    def iterations(self) -> int:
        return self.tile_n // (self.warp_n * 8)


def validate_config(cfg: AttentionConfig) -> AttentionConfig:
    for name in ("batch", "heads_q", "heads_kv", "head_dim", "tile_m",
                 "tile_n", "num_splits", "warp_n", "warp_m"):
        value = getattr(cfg, name)
        if not isinstance(value, (int, np.integer)) or value <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {value!r}")
    if cfg.heads_q % cfg.heads_kv:
        raise ConfigError(
            f"heads_q={cfg.heads_q} is not a multiple of heads_kv={cfg.heads_kv}")
    if cfg.tile_n % (cfg.warp_n * 8):
        raise ConfigError(
            f"tile_n={cfg.tile_n} is not a multiple of 8 * warp_n={8 * cfg.warp_n}")
    return cfg


def as_fp16_values(x) -> np.ndarray:
    """Round ``x`` to the nearest 16-bit float and return it as float32."""
    return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def gqa_transform(q: np.ndarray, n_group: int) -> np.ndarray:
    """Regroup ``[1, heads_q, d]`` queries into ``[n_group, heads_kv, d]``.

    Query head ``h * n_group + g`` lands at ``[g, h]``: consecutive query
    heads share one KV head.
    """
    q = np.asarray(q)
    if q.ndim != 3 or q.shape[0] != 1:
        raise ShapeError(f"expected a [1, heads_q, d] query, got shape {q.shape}")
    heads_q = q.shape[1]
    if n_group <= 0 or heads_q % n_group:
        raise ShapeError(f"heads_q={heads_q} is not divisible by n_group={n_group}")
    heads_kv = heads_q // n_group
    return q[0].reshape(heads_kv, n_group, q.shape[2]).transpose(1, 0, 2).copy()


def gqa_inverse(x: np.ndarray) -> np.ndarray:
    """Undo :func:`gqa_transform`, returning ``[1, heads_q, d]``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [n_group, heads_kv, d], got shape {x.shape}")
    n_group, heads_kv, d = x.shape
    return x.transpose(1, 0, 2).reshape(1, heads_kv * n_group, d).copy()
