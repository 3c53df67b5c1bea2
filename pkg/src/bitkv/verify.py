"""Invariant sweep behind ``bitkv verify``.

Each check returns a :class:`CheckResult`; failures are data, not
exceptions.  Sizes are kept small so a sweep over a handful of seeds runs in
seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import PartialOutput, attend_tile, combine, partitioned_rowmax
from .core import AttentionConfig, as_fp16_values
from .engine import DecodeEngine
from .kvcache import CacheLayout, append_token, flush_residual, prefill
from .layout import pack_words, residual_block_size, unpack_words
from .oracle import gqa_naive_attention, naive_attention, offline_quant_reference, \
    step_view_reference
from .quant import K_CHANNEL, K_TOKEN, compute_group_params, default_spec, dequantize_group, \
    quantize_group


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    skipped: bool = False


def check_pack_roundtrip(bits: int) -> CheckResult:
    words = np.arange(1 << 16, dtype=np.uint16)
    ok = np.array_equal(pack_words(unpack_words(words, bits), bits), words)
    return CheckResult(f"pack_roundtrip[B={bits}]", bool(ok))


def check_quant_bound(bits: int, seed: int, groups: int = 200, group_size: int = 64) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(groups):
        x = as_fp16_values(rng.standard_normal(group_size) * rng.uniform(0.1, 4.0))
        s, z = compute_group_params(x, bits)
        err = np.abs(dequantize_group(quantize_group(x, s, z, bits), s, z) - x)
        worst = max(worst, float((err / (s / 2 * (1 + 2 ** -10))).max()))
    return CheckResult(f"quant_bound[B={bits},seed={seed}]", worst <= 1.0, f"worst ratio {worst:.4f}")


def check_tiled_vs_naive(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tile_m, tile_n in ((1, 8), (4, 16), (16, 64)):
        d, L = 64, int(rng.integers(1, 600))
        q = rng.standard_normal((tile_m, d), np.float32)
        k = as_fp16_values(rng.standard_normal((L, d)))
        v = as_fp16_values(rng.standard_normal((L, d)))
        st = PartialOutput.empty(1, tile_m, d)
        for a in range(0, L, tile_n):
            st = attend_tile(st, q, k[a:a + tile_n], v[a:a + tile_n])
        worst = max(worst, float(np.abs(st.normalized()[0] - naive_attention(q, k, v)).max()))
    return CheckResult(f"tiled_vs_naive[seed={seed}]", worst < 1e-5, f"max_abs_err {worst:.2e}")


def check_rowmax(seed: int) -> CheckResult:
    s = np.random.default_rng(seed).standard_normal((16, 64)).astype(np.float32)
    ok = all(np.array_equal(partitioned_rowmax(s, w), s.max(axis=1)) for w in (1, 2, 4, 8))
    return CheckResult(f"partitioned_rowmax[seed={seed}]", ok)


def _random_stream(rng, heads, d, L):
    k = as_fp16_values(rng.standard_normal((heads, L, d)))
    v = as_fp16_values(rng.standard_normal((heads, L, d)))
    return k, v


def check_replay(bits: int, seed: int, inject_fault: bool = False) -> CheckResult:
    """Stream prefill + appends through the cache and compare with offline quantization."""
    rng = np.random.default_rng(seed)
    warp_n = int(rng.choice([1, 2, 4]))
    n_r = residual_block_size(bits, warp_n)
    axis = K_CHANNEL if rng.random() < 0.5 else K_TOKEN
    layout = CacheLayout(2, 64, n_r, default_spec(bits, axis, 64, n_r))
    L = int(rng.integers(1, 3 * n_r + 5))
    L0 = int(rng.integers(0, L + 1))
    k, v = _random_stream(rng, 2, 64, L)
    cache = prefill(k[:, :L0], v[:, :L0], layout)
    for t in range(L0, L):
        append_token(cache, k[:, t], v[:, t])
        if cache.res_len == n_r:
            flush_residual(cache)
        if cache.packed_len % n_r or cache.res_len >= n_r:
            return CheckResult(f"replay[B={bits},seed={seed}]", False, "state invariant broken")
    if inject_fault and cache.store.n_blocks:
        kw, _ = cache.store.words()
        kw[0, 0, 0, 0] ^= np.uint16(1 << (bits - 1))
    kr, vr = cache.reconstruct()
    ko, vo = offline_quant_reference(k, v, layout)
    ok = kr.tobytes() == ko.tobytes() and vr.tobytes() == vo.tobytes()
    return CheckResult(f"replay[B={bits},seed={seed}]", ok,
                       f"L={L} n_r={n_r} packed_len={cache.packed_len} res_len={cache.res_len}")


def _engine_case(bits: int, seed: int, store: str = "contiguous", splits: int = 2):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(batch=1, heads_q=8, heads_kv=2, head_dim=64, tile_m=4, tile_n=32,
                          num_splits=splits, warp_n=2)
    n_r = residual_block_size(bits, cfg.warp_n)
    eng = DecodeEngine(cfg, default_spec(bits, K_CHANNEL, 64, n_r), n_r=n_r, store=store)
    L = int(rng.integers(1, 700))
    k, v = _random_stream(rng, 2, 64, L + 1)
    q = rng.standard_normal((8, 64), np.float32)
    eng.prefill(k[None, :, :L], v[None, :, :L])
    out = eng.step(q[None], k[None, :, L], v[None, :, L])[0]
    return eng, q, k, v, out


def check_attribution(bits: int, seed: int) -> CheckResult:
    eng, q, k, v, out = _engine_case(bits, seed)
    kd, vd = step_view_reference(k, v, eng.layout)
    err = float(np.abs(out - gqa_naive_attention(q, kd, vd, 4)).max())
    return CheckResult(f"error_attribution[B={bits},seed={seed}]", err < 1e-5, f"max_abs_err {err:.2e}")


def check_split_invariance(bits: int, seed: int) -> CheckResult:
    outs = [_engine_case(bits, seed, splits=s)[-1] for s in (1, 2, 4, 8)]
    err = max(float(np.abs(o - outs[0]).max()) for o in outs)
    return CheckResult(f"split_invariance[B={bits},seed={seed}]", err < 1e-5, f"max diff {err:.2e}")


def check_paged(bits: int, seed: int) -> CheckResult:
    a = _engine_case(bits, seed)
    b = _engine_case(bits, seed, store="paged")
    same_codes = all(x.tobytes() == y.tobytes() for x, y in
                     zip(a[0].caches[0].reconstruct(), b[0].caches[0].reconstruct()))
    err = float(np.abs(a[-1] - b[-1]).max())
    return CheckResult(f"paged_vs_contiguous[B={bits},seed={seed}]", same_codes and err < 1e-6,
                       f"max diff {err:.2e}")


def check_combine_order(seed: int) -> CheckResult:
    rng = np.random.default_rng(seed)
    parts = []
    for _ in range(4):
        st = PartialOutput.empty(1, 4, 32)
        parts.append(attend_tile(st, rng.standard_normal((4, 32)), rng.standard_normal((16, 32)),
                                 rng.standard_normal((16, 32))))
    a = combine(parts)
    b = combine(parts[::-1])
    err = float(np.abs(a - b).max())
    return CheckResult(f"combine_order[seed={seed}]", err < 1e-6, f"max diff {err:.2e}")


def run_verify(seeds, bits_list=(2, 4, 8), inject_fault: bool = False) -> list[CheckResult]:
    results: list[CheckResult] = []
    for bits in bits_list:
        if bits == 16:
            results.append(CheckResult("quant_checks[B=16]", True, "passthrough", skipped=True))
        else:
            results.append(check_pack_roundtrip(bits))
    for seed in seeds:
        results += [check_tiled_vs_naive(seed), check_rowmax(seed), check_combine_order(seed)]
        for bits in bits_list:
            if bits != 16:
                results.append(check_quant_bound(bits, seed))
                results.append(check_replay(bits, seed, inject_fault))
            results.append(check_attribution(bits, seed))
            results.append(check_split_invariance(bits, seed))
            results.append(check_paged(bits, seed))
    return results
