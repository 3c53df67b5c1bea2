"""Vectorised numpy implementations of the hot kernels.

Every function here has a twin in ``_numba.py`` with the same signature.
Arrays are assumed to be C-contiguous; dtypes are as documented in
``bitkv.kernels``.
"""

from __future__ import annotations

import numpy as np

NEG_INF = np.float32(-np.inf)


def round_fp16(x):
    with np.errstate(over="ignore"):  # out-of-range values become inf, as in the cast itself
        return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def unpack_words(words, shifts, bits):
    mask = np.uint16((1 << bits) - 1) if bits < 16 else np.uint16(0xFFFF)
    w = words[..., None]
    return ((w >> shifts.astype(np.uint16)) & mask).astype(np.uint8)


def _block_codes(words, shifts, bits, n_r):
    # [..., S, d] words -> [..., n_r, d] codes in token order
    pack_num = 16 // bits
    codes = unpack_words(words, shifts, bits)          # [..., S, d, pack_num]
    codes = np.moveaxis(codes, -1, -3)                 # [..., pack_num, S, d]
    return codes.reshape(codes.shape[:-3] + (n_r, words.shape[-1]))


def dequant_range(words, params, channel_axis, group_size, shifts, bits, n_r, t0, t1):
    """Dequantise tokens ``[t0, t1)`` of a block store into float32 values.

    ``words`` is ``[H, nb, S, d]``; ``params`` is ``[H, nb, P0, P1, 2]``
    (float32 copies of the stored 16-bit pairs).  Values are the float32
    ``code * scale + zero`` result and are not rounded back to 16 bits.
    Passthrough stores (``bits == 16``) hold raw 16-bit float patterns.
    """
    b0, b1 = t0 // n_r, (t1 + n_r - 1) // n_r
    w = words[:, b0:b1]
    H, nb, _, d = w.shape
    if bits == 16:
        vals = w.view(np.float16).astype(np.float32).reshape(H, nb * n_r, d)
    else:
        codes = _block_codes(w, shifts, bits, n_r).astype(np.float32)  # [H, nb, n_r, d]
        p = params[:, b0:b1]
        if channel_axis:
            scale = np.repeat(p[..., 0], group_size, axis=2)
            zero = np.repeat(p[..., 1], group_size, axis=2)
        else:
            scale = np.repeat(p[..., 0], group_size, axis=3)
            zero = np.repeat(p[..., 1], group_size, axis=3)
        vals = (codes * scale + zero).reshape(H, nb * n_r, d)
    off = t0 - b0 * n_r
    return np.ascontiguousarray(vals[:, off:off + (t1 - t0)])


def partitioned_rowmax(s, warp_n, staging):
    """Row maximum of ``s[..., T_n]`` reduced per key partition.

    Each of ``warp_n`` partitions writes its local row max into
    ``staging[..., warp_n]``; the result is the max over the staging slots.
    """
    t = s.shape[-1]
    part = s.reshape(s.shape[:-1] + (warp_n, t // warp_n))
    staging[...] = part.max(axis=-1)
    return staging.max(axis=-1)


def attend_tile(q, k, v, warp_n, o, m, l):
    """One online-softmax update with a single key tile.

    ``q`` is ``[H, M, d]`` and already carries the 1/sqrt(d) factor; ``k`` and
    ``v`` are ``[H, T, d]``.  ``o``, ``m`` and ``l`` are updated in place.
    """
    s = np.matmul(q, k.transpose(0, 2, 1))             # [H, M, T] float32
    t = s.shape[-1]
    wn = warp_n if t % warp_n == 0 else 1
    staging = np.empty(s.shape[:-1] + (wn,), dtype=np.float32)
    m_new = np.maximum(m, partitioned_rowmax(s, wn, staging))
    alpha = np.where(np.isneginf(m), np.float32(0.0), np.exp(m - m_new))
    p = np.exp(s - m_new[..., None])
    l *= alpha
    l += p.sum(axis=-1, dtype=np.float32)
    o *= alpha[..., None]
    o += np.matmul(p, v)
    m[...] = m_new


def attend_dense(q, k, v, t0, t1, tile_n, warp_n, o, m, l):
    for a in range(t0, t1, tile_n):
        b = min(a + tile_n, t1)
        attend_tile(q, k[:, a:b], v[:, a:b], warp_n, o, m, l)


def attend_packed(q, kw, kp, k_channel, k_gs, vw, vp, v_gs, shifts, bits, n_r,
                  t0, t1, tile_n, warp_n, o, m, l):
    for a in range(t0, t1, tile_n):
        b = min(a + tile_n, t1)
        k = dequant_range(kw, kp, k_channel, k_gs, shifts, bits, n_r, a, b)
        v = dequant_range(vw, vp, False, v_gs, shifts, bits, n_r, a, b)
        attend_tile(q, k, v, warp_n, o, m, l)
