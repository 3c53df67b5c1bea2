"""Loop kernels compiled with numba; same signatures as ``_numpy.py``.

numba has no host-side float16, so 16-bit rounding and decoding are done
arithmetically on float32/float64 scalars.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# attention loops may reassociate and fuse float32 sums; no nnan/ninf since
# the running row max starts at -inf.  Dequantization stays strict so its
# results match the numpy backend bit for bit.
_FAST = {"reassoc", "contract"}


@njit(cache=True)
def _round_fp16_scalar(x):
    ax = abs(x)
    if ax == 0.0 or ax != ax:
        return np.float32(x)
    if ax >= 65520.0:
        return np.float32(math.copysign(math.inf, x))
    _, e = math.frexp(ax)
    # 11 significant bits for normals, fixed 2**-24 quantum for subnormals
    qexp = max(e - 11, -24)
    r = np.rint(math.ldexp(ax, -qexp))
    return np.float32(math.copysign(math.ldexp(r, qexp), x))


@njit(cache=True)
def _fp16_bits_to_f32(w):
    sign = -1.0 if (w >> 15) & 1 else 1.0
    e = (w >> 10) & 0x1F
    f = w & 0x3FF
    if e == 0:
        return np.float32(sign * math.ldexp(f, -24))
    if e == 31:
        return np.float32(sign * math.inf) if f == 0 else np.float32(math.nan)
    return np.float32(sign * math.ldexp(f + 1024, e - 25))


@njit(cache=True)
def _round_fp16_flat(flat, out):
    for i in range(flat.size):
        out[i] = _round_fp16_scalar(flat[i])


def round_fp16(x):
    x = np.asarray(x, dtype=np.float32)
    out = np.empty(x.size, dtype=np.float32)
    _round_fp16_flat(np.ascontiguousarray(x).ravel(), out)
    return out.reshape(x.shape)


@njit(cache=True)
def _unpack_flat(flat, shifts, bits):
    pack_num = shifts.size
    mask = (1 << bits) - 1 if bits < 16 else 0xFFFF
    out = np.empty((flat.size, pack_num), dtype=np.uint8)
    for i in range(flat.size):
        w = np.int64(flat[i])
        for p in range(pack_num):
            out[i, p] = (w >> shifts[p]) & mask
    return out


def unpack_words(words, shifts, bits):
    words = np.asarray(words, dtype=np.uint16)
    out = _unpack_flat(np.ascontiguousarray(words).ravel(), shifts.astype(np.int64), bits)
    return out.reshape(words.shape + (shifts.size,))


@njit(cache=True)
def _dequant_into(words, params, channel_axis, group_size, shifts, bits, n_r, t0, t1, out):
    H = words.shape[0]
    S = words.shape[2]
    d = words.shape[3]
    mask = (1 << bits) - 1 if bits < 16 else 0xFFFF
    for h in range(H):
        for t in range(t0, t1):
            blk = t // n_r
            tl = t - blk * n_r
            r = tl % S
            p = tl // S
            for c in range(d):
                w = np.int64(words[h, blk, r, c])
                if bits == 16:
                    out[h, t - t0, c] = _fp16_bits_to_f32(w)
                    continue
                code = np.float32((w >> shifts[p]) & mask)
                if channel_axis:
                    scale = params[h, blk, tl // group_size, c, 0]
                    zero = params[h, blk, tl // group_size, c, 1]
                else:
                    scale = params[h, blk, tl, c // group_size, 0]
                    zero = params[h, blk, tl, c // group_size, 1]
                out[h, t - t0, c] = code * scale + zero


def dequant_range(words, params, channel_axis, group_size, shifts, bits, n_r, t0, t1):
    out = np.empty((words.shape[0], t1 - t0, words.shape[3]), dtype=np.float32)
    _dequant_into(words, params, channel_axis, group_size, shifts.astype(np.int64),
                  bits, n_r, t0, t1, out)
    return out


@njit(cache=True)
def _partitioned_rowmax_kernel(s, warp_n, staging, out):
    rows = s.shape[0]
    t = s.shape[1]
    width = t // warp_n
    for i in range(rows):
        best = -np.inf
        for w in range(warp_n):
            pm = -np.inf
            for j in range(w * width, (w + 1) * width):
                if s[i, j] > pm:
                    pm = s[i, j]
            staging[i, w] = pm
        for w in range(warp_n):
            if staging[i, w] > best:
                best = staging[i, w]
        out[i] = best


def partitioned_rowmax(s, warp_n, staging):
    lead = s.shape[:-1]
    s2 = np.ascontiguousarray(s, dtype=np.float32).reshape(-1, s.shape[-1])
    st2 = np.empty((s2.shape[0], warp_n), dtype=np.float32)
    out = np.empty(s2.shape[0], dtype=np.float32)
    _partitioned_rowmax_kernel(s2, warp_n, st2, out)
    staging[...] = st2.reshape(lead + (warp_n,))
    return out.reshape(lead)


@njit(cache=True, fastmath=_FAST)
def _tile_update(q, k, v, a, b, warp_n, o, m, l, s, stage):
    # q [H, M, d]; k, v [H, T, d] rows a..b form the tile
    H = q.shape[0]
    M = q.shape[1]
    d = q.shape[2]
    tn = b - a
    wn = warp_n if tn % warp_n == 0 else 1
    width = tn // wn
    for h in range(H):
        for i in range(M):
            for j in range(tn):
                acc = np.float32(0.0)
                for c in range(d):
                    acc += q[h, i, c] * k[h, a + j, c]
                s[j] = acc
            for w in range(wn):
                pm = np.float32(-np.inf)
                for j in range(w * width, (w + 1) * width):
                    if s[j] > pm:
                        pm = s[j]
                stage[w] = pm
            m_old = m[h, i]
            m_new = m_old
            for w in range(wn):
                if stage[w] > m_new:
                    m_new = stage[w]
            if m_old == -np.inf:
                alpha = np.float32(0.0)
            else:
                alpha = np.float32(np.exp(m_old - m_new))
            rowsum = np.float32(0.0)
            for j in range(tn):
                s[j] = np.exp(s[j] - m_new)
                rowsum += s[j]
            l[h, i] = l[h, i] * alpha + rowsum
            for c in range(d):
                o[h, i, c] *= alpha
            # row-major over V keeps the inner loop contiguous
            for j in range(tn):
                p = s[j]
                for c in range(d):
                    o[h, i, c] += p * v[h, a + j, c]
            m[h, i] = m_new


@njit(cache=True, fastmath=_FAST)
def _attend_dense_kernel(q, k, v, t0, t1, tile_n, warp_n, o, m, l):
    s = np.empty(tile_n, dtype=np.float32)
    stage = np.empty(warp_n, dtype=np.float32)
    for a in range(t0, t1, tile_n):
        b = min(a + tile_n, t1)
        _tile_update(q, k, v, a, b, warp_n, o, m, l, s, stage)


def attend_tile(q, k, v, warp_n, o, m, l):
    _attend_dense_kernel(q, k, v, 0, k.shape[1], k.shape[1], warp_n, o, m, l)


def attend_dense(q, k, v, t0, t1, tile_n, warp_n, o, m, l):
    _attend_dense_kernel(q, k, v, t0, t1, tile_n, warp_n, o, m, l)


@njit(cache=True, fastmath=_FAST)
def _attend_packed_kernel(q, kw, kp, k_channel, k_gs, vw, vp, v_gs, shifts, bits, n_r,
                          t0, t1, tile_n, warp_n, o, m, l):
    H = q.shape[0]
    d = q.shape[2]
    kt = np.empty((H, tile_n, d), dtype=np.float32)
    vt = np.empty((H, tile_n, d), dtype=np.float32)
    s = np.empty(tile_n, dtype=np.float32)
    stage = np.empty(warp_n, dtype=np.float32)
    for a in range(t0, t1, tile_n):
        b = min(a + tile_n, t1)
        _dequant_into(kw, kp, k_channel, k_gs, shifts, bits, n_r, a, b, kt)
        _dequant_into(vw, vp, False, v_gs, shifts, bits, n_r, a, b, vt)
        _tile_update(q, kt, vt, 0, b - a, warp_n, o, m, l, s, stage)


def attend_packed(q, kw, kp, k_channel, k_gs, vw, vp, v_gs, shifts, bits, n_r,
                  t0, t1, tile_n, warp_n, o, m, l):
    _attend_packed_kernel(q, kw, kp, k_channel, k_gs, vw, vp, v_gs,
                          shifts.astype(np.int64), bits, n_r, t0, t1, tile_n, warp_n,
                          o, m, l)
