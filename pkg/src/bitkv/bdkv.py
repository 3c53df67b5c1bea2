"""BDKV cache dump format.

Layout (all integers little-endian)::

    b"BDKV"  u8 version
    u32 bits, axis, group_size, n_r, head_dim, packed_len, res_len
    u32 heads_kv, v_group_size, flags           # flags bit 0: interleaved packing
    K words    u16[heads_kv, packed_len / n_r, n_r / pack_num, head_dim]
    K params   f16[heads_kv, packed_len / n_r, P0, P1, 2]
    V words, V params (same scheme, V params token-wise)
    residual K f16[heads_kv, res_len, head_dim], residual V likewise

``axis`` is 0 for channel-wise K, 1 for token-wise K.  Passthrough caches
(``bits == 16``) store raw 16-bit float patterns as words and no params.
"""

from __future__ import annotations

import struct

import numpy as np

from .core import FormatError
from .kvcache import CacheLayout, KVCache, PackedSegment
from .quant import AXES, QuantSpec

MAGIC = b"BDKV"
VERSION = 1
_FIELDS = struct.Struct("<10I")
FLAG_INTERLEAVE = 1


def dumps(cache: KVCache) -> bytes:
    lay = cache.layout
    s = lay.spec
    header = MAGIC + bytes([VERSION]) + _FIELDS.pack(
        s.bits, AXES.index(s.axis), s.group_size, lay.n_r, lay.head_dim,
        cache.packed_len, cache.res_len, lay.heads_kv, s.v_group_size,
        FLAG_INTERLEAVE if lay.interleave else 0)
    kw, vw = cache.store.words()
    kp, vp = cache.store.params()
    parts = [header]
    for arr, dt in ((kw, "<u2"), (kp, "<f2"), (vw, "<u2"), (vp, "<f2"),
                    (cache.k_res[:, : cache.res_len], "<f2"),
                    (cache.v_res[:, : cache.res_len], "<f2")):
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def dump_cache(cache: KVCache, path) -> int:
    data = dumps(cache)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}: need {n} bytes, "
                              f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def array(self, shape, dtype: str, what: str) -> np.ndarray:
        dt = np.dtype(dtype)
        n = int(np.prod(shape)) * dt.itemsize
        return np.frombuffer(self.take(n, what), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def loads(buf: bytes) -> KVCache:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a BDKV file", 0)
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported BDKV version {version}", 4)
    hdr_at = r.pos
    (bits, axis, gs, n_r, d, packed_len, res_len,
     heads, v_gs, flags) = _FIELDS.unpack(r.take(_FIELDS.size, "header"))
    if axis >= len(AXES):
        raise FormatError(f"bad axis code {axis}", hdr_at + 4)
    try:
        spec = QuantSpec(bits, AXES[axis], gs, v_gs)
        lay = CacheLayout(heads, d, n_r, spec, bool(flags & FLAG_INTERLEAVE))
    except Exception as exc:
        raise FormatError(f"invalid header: {exc}", hdr_at) from exc
    if packed_len % n_r or res_len >= n_r:
        raise FormatError(f"inconsistent lengths packed_len={packed_len} res_len={res_len}", hdr_at)
    nb = packed_len // n_r
    S = lay.rows_per_block
    kw = r.array((heads, nb, S, d), "<u2", "K words")
    kp = r.array((heads, nb) + lay.param_shape(True), "<f2", "K params")
    vw = r.array((heads, nb, S, d), "<u2", "V words")
    vp = r.array((heads, nb) + lay.param_shape(False), "<f2", "V params")
    k_res = r.array((heads, res_len, d), "<f2", "residual K")
    v_res = r.array((heads, res_len, d), "<f2", "residual V")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    cache = KVCache(lay)
    for b in range(nb):
        cache.store.append(PackedSegment(kw[:, b], kp[:, b], vw[:, b], vp[:, b]))
    cache.k_res[:, :res_len] = k_res
    cache.v_res[:, :res_len] = v_res
    cache.res_len = res_len
    return cache


def load_cache(path) -> KVCache:
    with open(path, "rb") as fh:
        return loads(fh.read())


def caches_equal(a: KVCache, b: KVCache) -> bool:
    """Field-by-field bitwise comparison of two cache states."""
    if a.layout != b.layout or a.packed_len != b.packed_len or a.res_len != b.res_len:
        return False
    pairs = list(zip(a.store.words() + a.store.params(), b.store.words() + b.store.params()))
    pairs += [(a.k_res[:, : a.res_len], b.k_res[:, : b.res_len]),
              (a.v_res[:, : a.res_len], b.v_res[:, : b.res_len])]
    return all(x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in pairs)

