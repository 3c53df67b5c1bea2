"""Hybrid KV cache: packed low-bit blocks plus a high-precision residual tail.

A sequence of ``L`` tokens is held as ``packed_len = L - L % n_r`` quantized
tokens (whole ``n_r``-token blocks) and ``res_len = L % n_r`` tokens kept
as 16-bit floats.  Decoding appends into the residual; when it reaches
``n_r`` tokens the block is quantized, packed and moved to the packed store.

Two packed-store backends share one interface:

* :class:`ContiguousStore` keeps growable ``[H, n_blocks, ...]`` arrays;
* :class:`PagedStore` places packed word rows in fixed-size pages drawn from
  a shared :class:`PagePool` and addressed through a :class:`PageTable`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import CapacityError, ConfigError, ShapeError, StateError
from .layout import InterleavePerm, interleave_order, pack_block, unpack_block
from .quant import QuantSpec, dequantize_tile, quantize_kv_tile


@dataclass(frozen=True)
class CacheLayout:
    """Per-sequence cache geometry shared by all KV heads."""

    heads_kv: int
    head_dim: int
    n_r: int
    spec: QuantSpec
    interleave: bool = True

    def __post_init__(self):
        if self.heads_kv <= 0 or self.head_dim <= 0:
            raise ConfigError("heads_kv and head_dim must be positive")
        if self.n_r <= 0 or self.n_r % self.pack_num:
            raise ConfigError(f"n_r={self.n_r} must be a positive multiple of pack_num={self.pack_num}")
        self.spec.validate(self.head_dim, self.n_r)

    @property
    def bits(self) -> int:
        return self.spec.bits

    @property
    def pack_num(self) -> int:
        return 16 // self.spec.bits

    @property
    def rows_per_block(self) -> int:
        return self.n_r // self.pack_num

    @property
    def perm(self) -> InterleavePerm:
        return interleave_order(self.spec.bits, self.interleave)

    def param_shape(self, is_key: bool) -> tuple[int, int, int]:
        s, d, n = self.spec, self.head_dim, self.n_r
        if s.passthrough:
            return (0, 0, 2)
        if is_key and s.k_channel:
            return (n // s.group_size, d, 2)
        gs = s.group_size if is_key else s.v_group_size
        return (n, d // gs, 2)


@dataclass
class PackedSegment:
    """One quantized+packed ``n_r``-token block for every KV head."""

    k_words: np.ndarray   # [H, S, d] uint16
    k_params: np.ndarray  # [H, P0, P1, 2] float16
    v_words: np.ndarray
    v_params: np.ndarray


def qpack_store(k_block: np.ndarray, v_block: np.ndarray, layout: CacheLayout) -> PackedSegment:
    """Quantize and pack ``[H, n_r, d]`` K/V blocks."""
    H, d = layout.heads_kv, layout.head_dim
    if k_block.shape != (H, layout.n_r, d) or v_block.shape != k_block.shape:
        raise ShapeError(f"expected [{H}, {layout.n_r}, {d}] blocks, got {k_block.shape}, {v_block.shape}")
    if layout.spec.passthrough:
        empty = np.zeros((H, 0, 0, 2), dtype=np.float16)
        kw = np.ascontiguousarray(k_block, dtype=np.float16).view(np.uint16)
        vw = np.ascontiguousarray(v_block, dtype=np.float16).view(np.uint16)
        return PackedSegment(kw, empty, vw, empty.copy())
    perm = layout.perm
    kc, kp = quantize_kv_tile(k_block, layout.spec, is_key=True)
    vc, vp = quantize_kv_tile(v_block, layout.spec, is_key=False)
    return PackedSegment(pack_block(kc, layout.bits, perm), kp,
                         pack_block(vc, layout.bits, perm), vp)


def unpack_segment(seg: PackedSegment, layout: CacheLayout) -> tuple[np.ndarray, np.ndarray]:
    """Dequantized ``[H, n_r, d]`` K and V of one packed block."""
    if layout.spec.passthrough:
        return (seg.k_words.view(np.float16).astype(np.float32),
                seg.v_words.view(np.float16).astype(np.float32))
    s, perm = layout.spec, layout.perm
    kc = unpack_block(seg.k_words, layout.bits, perm)
    vc = unpack_block(seg.v_words, layout.bits, perm)
    return (dequantize_tile(kc, seg.k_params, s.k_channel, s.group_size),
            dequantize_tile(vc, seg.v_params, False, s.v_group_size))


class ContiguousStore:
    """Packed blocks in growable ``[H, n_blocks, ...]`` arrays."""

    kind = "contiguous"

    def __init__(self, layout: CacheLayout, capacity_blocks: int = 4):
        self.layout = layout
        self.n_blocks = 0
        H, S, d = layout.heads_kv, layout.rows_per_block, layout.head_dim
        cap = max(1, capacity_blocks)
        self._kw = np.zeros((H, cap, S, d), np.uint16)
        self._vw = np.zeros((H, cap, S, d), np.uint16)
        self._kp = np.zeros((H, cap) + layout.param_shape(True), np.float16)
        self._vp = np.zeros((H, cap) + layout.param_shape(False), np.float16)

    def _grow(self):
        def grow(a):
            out = np.zeros((a.shape[0], a.shape[1] * 2) + a.shape[2:], a.dtype)
            out[:, : a.shape[1]] = a
            return out
        self._kw, self._vw = grow(self._kw), grow(self._vw)
        self._kp, self._vp = grow(self._kp), grow(self._vp)

    def append(self, seg: PackedSegment) -> None:
        if self.n_blocks == self._kw.shape[1]:
            self._grow()
        b = self.n_blocks
        self._kw[:, b], self._vw[:, b] = seg.k_words, seg.v_words
        self._kp[:, b], self._vp[:, b] = seg.k_params, seg.v_params
        self.n_blocks += 1

    def words(self):
        n = self.n_blocks
        return self._kw[:, :n], self._vw[:, :n]

    def params(self):
        n = self.n_blocks
        return self._kp[:, :n], self._vp[:, :n]

    def segment(self, b: int) -> PackedSegment:
        return PackedSegment(self._kw[:, b], self._kp[:, b], self._vw[:, b], self._vp[:, b])

    def release(self) -> None:
        pass


class PagePool:
    """Fixed pool of pages; each page holds ``page_rows`` rows per field."""

    def __init__(self, num_pages: int, page_rows: int, row_shape: tuple[int, ...],
                 dtype=np.uint16, fields: tuple[str, ...] = ("data",)):
        if num_pages <= 0 or page_rows <= 0:
            raise ConfigError("page pool needs a positive page count and page size")
        self.num_pages = num_pages
        self.page_rows = page_rows
        self.storage = {f: np.zeros((num_pages, page_rows) + tuple(row_shape), dtype) for f in fields}
        self._free = list(range(num_pages - 1, -1, -1))

    @property
    def free_pages(self) -> int:
        return len(self._free)

    def allocate(self) -> int:
        if not self._free:
            raise CapacityError(f"page pool exhausted ({self.num_pages} pages)")
        return self._free.pop()

    def release(self, pages) -> None:
        self._free.extend(reversed(list(pages)))


@dataclass
class PageTable:
    page_size: int
    pages: list[int] = field(default_factory=list)
    length: int = 0

    def locate(self, token: int) -> tuple[int, int]:
        return self.pages[token // self.page_size], token % self.page_size


def paged_append(pt: PageTable, pool: PagePool, token=None, name: str = "data") -> PageTable:
    """Append one logical token, allocating a page only when the last is full."""
    if pt.length == len(pt.pages) * pt.page_size:
        pt.pages.append(pool.allocate())
    if token is not None:
        page, off = pt.locate(pt.length)
        pool.storage[name][page, off] = token
    pt.length += 1
    return pt


def gather_rows(pt: PageTable, pool: PagePool, r0: int, r1: int, name: str = "data") -> np.ndarray:
    """Rows ``[r0, r1)`` of a paged stream in logical order."""
    rpp = pool.page_rows
    data = pool.storage[name]
    if r1 <= r0:
        return data[:0, 0][:0]
    p0, p1 = r0 // rpp, (r1 - 1) // rpp + 1
    chunk = data[pt.pages[p0:p1]]
    chunk = chunk.reshape((-1,) + data.shape[2:])
    return chunk[r0 - p0 * rpp: r1 - p0 * rpp]


def make_page_pool(layout: CacheLayout, page_size: int, num_pages: int) -> PagePool:
    if page_size % layout.pack_num:
        raise ConfigError(f"page_size={page_size} must be a multiple of pack_num={layout.pack_num}")
    if page_size % layout.n_r and layout.n_r % page_size:
        raise ConfigError(f"page_size={page_size} and n_r={layout.n_r} must divide one another")
    return PagePool(num_pages, page_size // layout.pack_num,
                    (layout.heads_kv, layout.head_dim), np.uint16, fields=("k", "v"))


class PagedStore:
    """Packed word rows kept in pages of a shared pool.

    A page holds the words of ``page_size`` tokens (``page_size / pack_num``
    word rows for every KV head).  Quantization params are small and stay in
    a per-sequence block-indexed table.
    """

    kind = "paged"

    def __init__(self, layout: CacheLayout, pool: PagePool, page_size: int):
        if pool.page_rows * layout.pack_num != page_size:
            raise ConfigError("page pool geometry does not match page_size")
        self.layout = layout
        self.pool = pool
        self.table = PageTable(page_size)
        self.n_blocks = 0
        self._kp: list[np.ndarray] = []
        self._vp: list[np.ndarray] = []
        self._stacked = None

    def reserve_token(self) -> None:
        paged_append(self.table, self.pool)

    def append(self, seg: PackedSegment) -> None:
        S = self.layout.rows_per_block
        r0 = self.n_blocks * S
        need = (self.n_blocks + 1) * self.layout.n_r
        while self.table.length < need:
            self.reserve_token()
        rpp = self.pool.page_rows
        for name, words in (("k", seg.k_words), ("v", seg.v_words)):
            rows = np.moveaxis(words, 1, 0)  # [S, H, d]
            for i in range(S):
                page, off = divmod(r0 + i, rpp)
                self.pool.storage[name][self.table.pages[page], off] = rows[i]
        self._kp.append(np.asarray(seg.k_params, np.float16))
        self._vp.append(np.asarray(seg.v_params, np.float16))
        self._stacked = None
        self.n_blocks += 1

    def words(self):
        H, S, d = self.layout.heads_kv, self.layout.rows_per_block, self.layout.head_dim
        n = self.n_blocks

        def one(name):
            rows = gather_rows(self.table, self.pool, 0, n * S, name)  # [n*S, H, d]
            return np.ascontiguousarray(np.moveaxis(rows.reshape(n, S, H, d), 2, 0))
        return one("k"), one("v")

    def params(self):
        if self._stacked is None:
            H = self.layout.heads_kv
            kp = (np.stack(self._kp, axis=1) if self._kp else
                  np.zeros((H, 0) + self.layout.param_shape(True), np.float16))
            vp = (np.stack(self._vp, axis=1) if self._vp else
                  np.zeros((H, 0) + self.layout.param_shape(False), np.float16))
            self._stacked = (kp, vp)
        return self._stacked

    def segment(self, b: int) -> PackedSegment:
        S = self.layout.rows_per_block
        kp, vp = self.params()

        def rows(name):
            r = gather_rows(self.table, self.pool, b * S, (b + 1) * S, name)
            return np.ascontiguousarray(np.moveaxis(r, 0, 1))
        return PackedSegment(rows("k"), kp[:, b], rows("v"), vp[:, b])

    def release(self) -> None:
        self.pool.release(self.table.pages)
        self.table = PageTable(self.table.page_size)
        self.n_blocks = 0
        self._kp, self._vp, self._stacked = [], [], None


class KVCache:
    """Cache state for one sequence across all of its KV heads."""

    def __init__(self, layout: CacheLayout, store=None):
        self.layout = layout
        self.store = store if store is not None else ContiguousStore(layout)
        H, n_r, d = layout.heads_kv, layout.n_r, layout.head_dim
        self.k_res = np.zeros((H, n_r, d), np.float16)
        self.v_res = np.zeros((H, n_r, d), np.float16)
        self.res_len = 0

    @property
    def n_r(self) -> int:
        return self.layout.n_r

    @property
    def packed_len(self) -> int:
        return self.store.n_blocks * self.layout.n_r

    @property
    def length(self) -> int:
        return self.packed_len + self.res_len

    def _reserve(self):
        if isinstance(self.store, PagedStore):
            self.store.reserve_token()

    # memory accounting, in bytes
    def packed_word_bytes(self) -> int:
        kw, vw = self.store.words()
        return kw.nbytes + vw.nbytes

    def packed_k_word_bytes(self) -> int:
        return self.store.words()[0].nbytes

    def param_bytes(self) -> int:
        kp, vp = self.store.params()
        return kp.nbytes + vp.nbytes

    def residual_bytes(self) -> int:
        return self.k_res.nbytes + self.v_res.nbytes

    def memory(self) -> dict[str, int]:
        return {"packed_word_bytes": self.packed_word_bytes(),
                "param_bytes": self.param_bytes(),
                "residual_bytes": self.residual_bytes()}

    def check(self) -> None:
        """Raise StateError if the cache bookkeeping is inconsistent."""
        if self.packed_len % self.n_r:
            raise StateError(f"packed_len={self.packed_len} is not a multiple of n_r={self.n_r}")
        if not 0 <= self.res_len <= self.n_r:
            raise StateError(f"res_len={self.res_len} outside [0, {self.n_r}]")

    def reconstruct(self) -> tuple[np.ndarray, np.ndarray]:
        """Full ``[H, L, d]`` float32 K/V as attention sees them."""
        parts_k, parts_v = [], []
        for b in range(self.store.n_blocks):
            k, v = unpack_segment(self.store.segment(b), self.layout)
            parts_k.append(k)
            parts_v.append(v)
        parts_k.append(self.k_res[:, : self.res_len].astype(np.float32))
        parts_v.append(self.v_res[:, : self.res_len].astype(np.float32))
        return np.concatenate(parts_k, axis=1), np.concatenate(parts_v, axis=1)

    def release(self) -> None:
        self.store.release()


def prefill(k: np.ndarray, v: np.ndarray, layout: CacheLayout, store=None) -> KVCache:
    """Split ``[H, L, d]`` prompt K/V into packed blocks and a residual tail."""
    k = np.asarray(k)
    v = np.asarray(v)
    H, d = layout.heads_kv, layout.head_dim
    if k.ndim != 3 or k.shape[0] != H or k.shape[2] != d or v.shape != k.shape:
        raise ShapeError(f"expected [{H}, L, {d}] K/V, got {k.shape} and {v.shape}")
    cache = KVCache(layout, store)
    L = k.shape[1]
    res_len = L % layout.n_r
    n_p = L - res_len
    k16 = k.astype(np.float16)
    v16 = v.astype(np.float16)
    for a in range(0, n_p, layout.n_r):
        for _ in range(layout.n_r):
            cache._reserve()
        cache.store.append(qpack_store(k16[:, a:a + layout.n_r], v16[:, a:a + layout.n_r], layout))
    for _ in range(res_len):
        cache._reserve()
    cache.k_res[:, :res_len] = k16[:, n_p:]
    cache.v_res[:, :res_len] = v16[:, n_p:]
    cache.res_len = res_len
    return cache


def append_token(cache: KVCache, k_new: np.ndarray, v_new: np.ndarray) -> KVCache:
    """Write one ``[H, d]`` token into the residual buffer."""
    if cache.res_len >= cache.n_r:
        raise CapacityError(f"residual buffer full (res_len={cache.res_len}); flush first")
    shape = (cache.layout.heads_kv, cache.layout.head_dim)
    if np.shape(k_new) != shape or np.shape(v_new) != shape:
        raise ShapeError(f"expected {shape} token, got {np.shape(k_new)} and {np.shape(v_new)}")
    cache._reserve()
    cache.k_res[:, cache.res_len] = k_new
    cache.v_res[:, cache.res_len] = v_new
    cache.res_len += 1
    return cache


def flush_residual(cache: KVCache, segment: PackedSegment | None = None) -> KVCache:
    """Commit a full residual buffer to the packed store.

    ``segment`` lets the caller hand over the block already packed during the
    residual attention pass; otherwise it is produced here.
    """
    if cache.res_len != cache.n_r:
        raise StateError(f"flush requires res_len == n_r ({cache.n_r}), got {cache.res_len}")
    if segment is None:
        segment = qpack_store(cache.k_res, cache.v_res, cache.layout)
    # paged stores reserved these tokens on append; count stays the same
    cache.store.append(segment)
    cache.k_res[...] = 0
    cache.v_res[...] = 0
    cache.res_len = 0
    return cache
