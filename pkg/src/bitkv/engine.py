"""Batched decode driver: one :class:`KVCache` per sequence."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .attention import decode_step
from .core import AttentionConfig, ConfigError, validate_config
from .kvcache import CacheLayout, KVCache, PagedStore, make_page_pool, prefill
from .layout import residual_block_size
from .quant import QuantSpec


def max_threads() -> int:
    raw = os.environ.get("BITKV_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError as exc:
        raise ConfigError(f"BITKV_THREADS must be an integer, got {raw!r}") from exc


class DecodeEngine:
    """Prefill and step a batch of sequences through the hybrid cache.

    ``store="paged"`` draws every sequence's packed words from one shared
    page pool of ``num_pages`` pages of ``page_size`` tokens.
    """

    def __init__(self, cfg: AttentionConfig, spec: QuantSpec, *, n_r: int | None = None,
                 store: str = "contiguous", page_size: int = 16, num_pages: int | None = None,
                 interleave: bool = True):
        self.cfg = validate_config(cfg)
        self.n_r = n_r or residual_block_size(spec.bits, cfg.warp_n)
        self.layout = CacheLayout(cfg.heads_kv, cfg.head_dim, self.n_r, spec, interleave)
        if store not in ("contiguous", "paged"):
            raise ConfigError(f"unknown store {store!r}")
        self.store_kind = store
        self.page_size = page_size
        self.num_pages = num_pages
        self.pool = None
        self.caches: list[KVCache] = []

    def _new_store(self, tokens_hint: int):
        if self.store_kind == "contiguous":
            return None
        if self.pool is None:
            pages = self.num_pages or self.cfg.batch * (-(-tokens_hint // self.page_size) + 1)
            self.pool = make_page_pool(self.layout, self.page_size, pages)
        return PagedStore(self.layout, self.pool, self.page_size)

    def prefill(self, k: np.ndarray, v: np.ndarray, max_len: int | None = None) -> None:
        """``k``/``v`` are ``[batch, heads_kv, L, d]`` prompt tensors."""
        if k.shape[0] != self.cfg.batch:
            raise ConfigError(f"expected batch {self.cfg.batch}, got {k.shape[0]}")
        for c in self.caches:
            c.release()
        hint = max_len if max_len is not None else k.shape[2]
        self.caches = [prefill(k[b], v[b], self.layout, self._new_store(hint))
                       for b in range(self.cfg.batch)]

    def step(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``q [batch, heads_q, d]``, ``k, v [batch, heads_kv, d]`` -> ``[batch, heads_q, d]``."""
        def one(b):
            return decode_step(q[b], k[b], v[b], self.caches[b], self.cfg)[0]

        n = min(max_threads(), self.cfg.batch)
        if n > 1:
            with ThreadPoolExecutor(n) as ex:
                outs = list(ex.map(one, range(self.cfg.batch)))
        else:
            outs = [one(b) for b in range(self.cfg.batch)]
        return np.stack(outs)

    def memory(self) -> dict[str, int]:
        totals = {"packed_word_bytes": 0, "param_bytes": 0, "residual_bytes": 0}
        for c in self.caches:
            for key, val in c.memory().items():
                totals[key] += val
        return totals
