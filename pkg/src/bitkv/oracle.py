"""Brute-force references for the engine.

Nothing here tiles, and every reduction runs left to right in float32
(``np.cumsum`` is sequential), so results do not depend on BLAS or on the
kernel backend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeError
from .kvcache import CacheLayout
from .quant import dequantize_tile, quantize_tile


def _dot_left_to_right(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a [M, d], b [L, d] -> [M, L], summing over d in index order
    acc = np.zeros((a.shape[0], b.shape[0]), np.float32)
    for c in range(a.shape[1]):
        acc += a[:, c, None] * b[None, :, c]
    return acc


def naive_attention(q, k, v) -> np.ndarray:
    """Materialised ``softmax(q k^T / sqrt(d)) v`` for ``[M, d]`` / ``[L, d]`` inputs.

    Leading head axes are handled by looping; shapes ``[H, M, d]`` and
    ``[H, L, d]`` are accepted too.
    """
    q = np.asarray(q, np.float32)
    k = np.asarray(k, np.float32)
    v = np.asarray(v, np.float32)
    if q.ndim == 3:
        return np.stack([naive_attention(q[h], k[h], v[h]) for h in range(q.shape[0])])
    if q.ndim != 2 or k.shape != v.shape or k.shape[1] != q.shape[1] or k.shape[0] == 0:
        raise ShapeError(f"bad shapes q{q.shape} k{k.shape} v{v.shape}")
    s = _dot_left_to_right(q, k) / np.float32(np.sqrt(q.shape[1]))
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    denom = np.cumsum(p, axis=1)[:, -1]
    weighted = np.cumsum(p[:, :, None] * v[None], axis=1)[:, -1]
    return weighted / denom[:, None]


def gqa_naive_attention(q, k, v, n_group: int) -> np.ndarray:
    """Per-query-head reference: ``q [heads_q, d]``, ``k, v [heads_kv, L, d]``.

    Query head ``j`` reads KV head ``j // n_group`` (KV repeated per group).
    """
    q = np.asarray(q, np.float32)
    k_rep = np.repeat(np.asarray(k, np.float32), n_group, axis=0)
    v_rep = np.repeat(np.asarray(v, np.float32), n_group, axis=0)
    return np.stack([naive_attention(q[j:j + 1], k_rep[j], v_rep[j])[0] for j in range(q.shape[0])])


def offline_quant_reference(k, v, layout: CacheLayout) -> tuple[np.ndarray, np.ndarray]:
    """Quantize+dequantize every full ``n_r`` block of ``[H, L, d]`` K/V independently.

    The trailing ``L % n_r`` tokens are returned as their 16-bit values, the
    way they sit in the residual buffer.  Codes go straight from quantize to
    dequantize without being packed.
    """
    k16 = np.asarray(k).astype(np.float16)
    v16 = np.asarray(v).astype(np.float16)
    L = k16.shape[1]
    n_p = L - L % layout.n_r
    spec = layout.spec
    ks, vs = [], []
    for a in range(0, n_p, layout.n_r):
        kb = k16[:, a:a + layout.n_r].astype(np.float32)
        vb = v16[:, a:a + layout.n_r].astype(np.float32)
        if spec.passthrough:
            ks.append(kb)
            vs.append(vb)
            continue
        kc, kp = quantize_tile(kb, spec.bits, spec.k_channel, spec.group_size)
        vc, vp = quantize_tile(vb, spec.bits, False, spec.v_group_size)
        ks.append(dequantize_tile(kc, kp, spec.k_channel, spec.group_size))
        vs.append(dequantize_tile(vc, vp, False, spec.v_group_size))
    ks.append(k16[:, n_p:].astype(np.float32))
    vs.append(v16[:, n_p:].astype(np.float32))
    return np.concatenate(ks, axis=1), np.concatenate(vs, axis=1)


def step_view_reference(k, v, layout: CacheLayout) -> tuple[np.ndarray, np.ndarray]:
    """K/V as seen by the decode step that appends the last of ``L`` tokens.

    That step attends before committing a residual block that it just
    filled, so the last token and the unflushed tail are still 16-bit even
    when ``L`` is a multiple of ``n_r``.
    """
    k = np.asarray(k)
    v = np.asarray(v)
    kd, vd = offline_quant_reference(k[:, :-1], v[:, :-1], layout)
    last_k = k[:, -1:].astype(np.float16).astype(np.float32)
    last_v = v[:, -1:].astype(np.float16).astype(np.float32)
    return np.concatenate([kd, last_k], axis=1), np.concatenate([vd, last_v], axis=1)


@dataclass(frozen=True)
class OracleReport:
    max_abs_err: float
    rel_l2_err: float
    cosine_similarity: float

    def as_dict(self) -> dict[str, float]:
        return {"max_abs_err": self.max_abs_err, "rel_l2_err": self.rel_l2_err,
                "cosine_similarity": self.cosine_similarity}


def compare(engine_out, oracle_out) -> OracleReport:
    a = np.asarray(engine_out, np.float64).ravel()
    b = np.asarray(oracle_out, np.float64).ravel()
    if np.shape(engine_out) != np.shape(oracle_out):
        raise ShapeError(f"shape mismatch {np.shape(engine_out)} vs {np.shape(oracle_out)}")
    diff = a - b
    nb = np.linalg.norm(b)
    na = np.linalg.norm(a)
    rel = float(np.linalg.norm(diff) / nb) if nb > 0 else float(np.linalg.norm(diff))
    if na == 0 or nb == 0:
        cos = 1.0 if na == nb else 0.0
    else:
        cos = float(np.clip(a @ b / (na * nb), -1.0, 1.0))
    return OracleReport(float(np.abs(diff).max()) if diff.size else 0.0, rel, cos)
