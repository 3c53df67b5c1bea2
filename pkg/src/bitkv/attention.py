"""Tiled decode attention over the hybrid cache.

Every path produces a :class:`PartialOutput` (unnormalised accumulator, row
max, row exp-sum).  The residual tail and each split of the packed store are
attended independently, then merged by :func:`combine` with a log-sum-exp
rescale.  All accumulation is float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import AttentionConfig, EmptyInput, ShapeError, gqa_inverse, gqa_transform
from .kvcache import KVCache, PackedSegment, flush_residual, qpack_store, append_token


@dataclass
class PartialOutput:
    o: np.ndarray  # [H, M, d]
    m: np.ndarray  # [H, M]
    l: np.ndarray  # [H, M]

    @classmethod
    def empty(cls, heads: int, rows: int, d: int) -> "PartialOutput":
        return cls(np.zeros((heads, rows, d), np.float32),
                   np.full((heads, rows), -np.inf, np.float32),
                   np.zeros((heads, rows), np.float32))

    def normalized(self) -> np.ndarray:
        return self.o / self.l[..., None]


@dataclass
class StagingBuffer:
    """Cross-partition scratch: one row-max slot per key partition."""

    row_max: np.ndarray  # [..., warp_n]

    @classmethod
    def for_scores(cls, s: np.ndarray, warp_n: int) -> "StagingBuffer":
        return cls(np.empty(s.shape[:-1] + (warp_n,), np.float32))


def _as_heads(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x[None] if x.ndim == 2 else x


def partitioned_rowmax(s: np.ndarray, warp_n: int, buf: StagingBuffer | None = None) -> np.ndarray:
    """Row max of ``s[..., T_n]`` computed as ``warp_n`` partition maxima merged via ``buf``."""
    s = np.asarray(s, dtype=np.float32)
    if warp_n < 1 or s.shape[-1] % warp_n:
        raise ShapeError(f"T_n={s.shape[-1]} is not divisible by warp_n={warp_n}")
    buf = buf or StagingBuffer.for_scores(s, warp_n)
    return kernels.partitioned_rowmax(s, warp_n, buf.row_max)


def attend_tile(state: PartialOutput, q, k, v, scale_factor: float | None = None,
                warp_n: int = 1) -> PartialOutput:
    """Fold one key/value tile into ``state`` (online softmax update).

    Accepts ``[M, d]`` / ``[T, d]`` single-head inputs or ``[H, ...]`` stacks.
    ``scale_factor`` defaults to ``1/sqrt(d)``.
    """
    q, k, v = _as_heads(q), _as_heads(k), _as_heads(v)
    if k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"mismatched tile shapes q{q.shape} k{k.shape} v{v.shape}")
    if scale_factor is None:
        scale_factor = 1.0 / math.sqrt(q.shape[-1])
    qs = np.ascontiguousarray(q * np.float32(scale_factor))
    o, m, l = state.o.copy(), state.m.copy(), state.l.copy()
    kernels.attend_tile(qs, np.ascontiguousarray(k), np.ascontiguousarray(v), warp_n, o, m, l)
    return PartialOutput(o, m, l)


def combine(partials: list[PartialOutput]) -> np.ndarray:
    """Merge partial outputs into the normalised ``[H, M, d]`` attention output."""
    if not partials:
        raise EmptyInput("combine needs at least one partial output")
    m_star = np.max(np.stack([p.m for p in partials]), axis=0)
    o = np.zeros_like(partials[0].o)
    l = np.zeros_like(partials[0].l)
    for p in partials:
        w = np.where(np.isneginf(p.m), np.float32(0.0), np.exp(p.m - m_star))
        o += p.o * w[..., None]
        l += p.l * w
    return o / l[..., None]


def _row_tiles(rows: int, tile_m: int):
    for r0 in range(0, rows, tile_m):
        yield r0, min(r0 + tile_m, rows)


def residual_attend(q_scaled: np.ndarray, cache: KVCache, cfg: AttentionConfig
                    ) -> tuple[PartialOutput, PackedSegment | None]:
    """Attend over the residual tail; pack it as well when it is exactly full."""
    H, M, d = q_scaled.shape
    state = PartialOutput.empty(H, M, d)
    n = cache.res_len
    if n:
        k = cache.k_res[:, :n].astype(np.float32)
        v = cache.v_res[:, :n].astype(np.float32)
        for r0, r1 in _row_tiles(M, cfg.tile_m):
            o, m, l = state.o[:, r0:r1].copy(), state.m[:, r0:r1].copy(), state.l[:, r0:r1].copy()
            kernels.attend_dense(np.ascontiguousarray(q_scaled[:, r0:r1]), k, v, 0, n,
                                 cfg.tile_n, cfg.warp_n, o, m, l)
            state.o[:, r0:r1], state.m[:, r0:r1], state.l[:, r0:r1] = o, m, l
    segment = None
    if n == cache.n_r:
        segment = qpack_store(cache.k_res, cache.v_res, cache.layout)
    return state, segment


def split_ranges(packed_len: int, tile_n: int, num_splits: int) -> list[tuple[int, int]]:
    """Contiguous token ranges, whole tiles each, one per non-empty split."""
    n_tiles = -(-packed_len // tile_n)
    out = []
    for s in range(num_splits):
        a, b = s * n_tiles // num_splits, (s + 1) * n_tiles // num_splits
        if b > a:
            out.append((a * tile_n, min(b * tile_n, packed_len)))
    return out


def packed_attend(q_scaled: np.ndarray, cache: KVCache, cfg: AttentionConfig,
                  num_splits: int | None = None) -> list[PartialOutput]:
    """One partial output per non-empty split of the packed store."""
    if cache.packed_len % cache.n_r:
        raise ShapeError(f"packed_len={cache.packed_len} is not a multiple of n_r={cache.n_r}")
    if cache.packed_len == 0:
        return []
    num_splits = num_splits or cfg.num_splits
    lay = cache.layout
    spec = lay.spec
    kw, vw = cache.store.words()
    kp, vp = cache.store.params()
    kp = np.ascontiguousarray(kp, dtype=np.float32)
    vp = np.ascontiguousarray(vp, dtype=np.float32)
    kw, vw = np.ascontiguousarray(kw), np.ascontiguousarray(vw)
    shifts = lay.perm.shifts
    H, M, d = q_scaled.shape
    out = []
    for t0, t1 in split_ranges(cache.packed_len, cfg.tile_n, num_splits):
        state = PartialOutput.empty(H, M, d)
        for r0, r1 in _row_tiles(M, cfg.tile_m):
            o, m, l = state.o[:, r0:r1].copy(), state.m[:, r0:r1].copy(), state.l[:, r0:r1].copy()
            kernels.attend_packed(np.ascontiguousarray(q_scaled[:, r0:r1]), kw, kp, spec.k_channel,
                                  spec.group_size, vw, vp, spec.v_group_size, shifts, lay.bits,
                                  lay.n_r, t0, t1, cfg.tile_n, cfg.warp_n, o, m, l)
            state.o[:, r0:r1], state.m[:, r0:r1], state.l[:, r0:r1] = o, m, l
        out.append(state)
    return out


def group_queries(q: np.ndarray, n_group: int) -> np.ndarray:
    """``[heads_q, d]`` decode queries to per-KV-head rows ``[heads_kv, n_group, d]``."""
    return gqa_transform(np.asarray(q, np.float32)[None], n_group).transpose(1, 0, 2)


def ungroup_output(o: np.ndarray) -> np.ndarray:
    return gqa_inverse(o.transpose(1, 0, 2))[0]


def decode_step(q_new, k_new, v_new, cache: KVCache, cfg: AttentionConfig
                ) -> tuple[np.ndarray, KVCache]:
    """One decode step for one sequence; returns ``[heads_q, d]`` output.

    Order: append the new token, attend residual and packed segments, combine,
    then commit the residual block if it just became full.
    """
    q_new = np.asarray(q_new, np.float32)
    if q_new.shape != (cfg.heads_q, cfg.head_dim):
        raise ShapeError(f"expected [{cfg.heads_q}, {cfg.head_dim}] query, got {q_new.shape}")
    append_token(cache, k_new, v_new)
    qg = group_queries(q_new, cfg.n_group)
    qs = np.ascontiguousarray(qg * np.float32(1.0 / math.sqrt(cfg.head_dim)))
    res_state, segment = residual_attend(qs, cache, cfg)
    partials = [res_state] + packed_attend(qs, cache, cfg)
    out = combine(partials)
    if segment is not None:
        flush_residual(cache, segment)
    return ungroup_output(out), cache
