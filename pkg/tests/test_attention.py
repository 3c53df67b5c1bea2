import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitkv.attention import (PartialOutput, StagingBuffer, attend_tile, combine, decode_step,
                             packed_attend, partitioned_rowmax, residual_attend, split_ranges)
from bitkv.core import AttentionConfig, EmptyInput, ShapeError
from bitkv.kvcache import CacheLayout, KVCache, append_token, prefill, unpack_segment
from bitkv.oracle import gqa_naive_attention, naive_attention, offline_quant_reference, \
    step_view_reference
from bitkv.quant import K_CHANNEL, default_spec

from conftest import fp16_normal


def run_tiles(q, k, v, tile_n, order=None, warp_n=1):
    tiles = [(a, a + tile_n) for a in range(0, k.shape[0], tile_n)]
    if order is not None:
        tiles = [tiles[i] for i in order]
    st_ = PartialOutput.empty(1, q.shape[0], q.shape[1])
    for a, b in tiles:
        st_ = attend_tile(st_, q, k[a:b], v[a:b], warp_n=warp_n)
    return st_


def test_single_tile_equals_naive(backend, rng):
    q, k, v = rng.standard_normal((4, 32)), rng.standard_normal((64, 32)), rng.standard_normal((64, 32))
    out = run_tiles(q, k, v, 64).normalized()[0]
    np.testing.assert_allclose(out, naive_attention(q, k, v), atol=1e-5)


def test_identical_keys_give_mean_of_v(backend, rng):
    q = rng.standard_normal((3, 16))
    k = np.tile(rng.standard_normal((1, 16)), (40, 1))
    v = rng.standard_normal((40, 16))
    out = run_tiles(q, k, v, 8).normalized()[0]
    np.testing.assert_allclose(out, np.tile(v.mean(0), (3, 1)), atol=1e-6)


@given(st.integers(0, 10_000), st.sampled_from([8, 16, 64]), st.integers(1, 300))
def test_tile_order_does_not_matter(seed, tile_n, L):
    rng = np.random.default_rng(seed)
    q, k, v = rng.standard_normal((4, 16)), rng.standard_normal((L, 16)), rng.standard_normal((L, 16))
    n_tiles = -(-L // tile_n)
    fwd = run_tiles(q, k, v, tile_n).normalized()
    rev = run_tiles(q, k, v, tile_n, order=rng.permutation(n_tiles)).normalized()
    np.testing.assert_allclose(fwd, rev, atol=1e-5)
    np.testing.assert_allclose(fwd[0], naive_attention(q, k, v), atol=1e-5)


def test_warp_partitioned_tile_matches_single_partition(backend, rng):
    q, k, v = rng.standard_normal((4, 32)), rng.standard_normal((64, 32)), rng.standard_normal((64, 32))
    a = run_tiles(q, k, v, 64, warp_n=4).normalized()
    b = run_tiles(q, k, v, 64, warp_n=1).normalized()
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_tile_shape_mismatch():
    with pytest.raises(ShapeError):
        attend_tile(PartialOutput.empty(1, 2, 8), np.zeros((2, 8)), np.zeros((4, 8)), np.zeros((3, 8)))


@pytest.mark.parametrize("warp_n", [1, 2, 4, 8])
def test_partitioned_rowmax_exact(warp_n, backend, rng):
    s = rng.standard_normal((16, 64)).astype(np.float32)
    buf = StagingBuffer.for_scores(s, warp_n)
    out = partitioned_rowmax(s, warp_n, buf)
    np.testing.assert_array_equal(out, s.max(axis=1))
    np.testing.assert_array_equal(buf.row_max.max(axis=-1), out)


def test_partitioned_rowmax_constant(backend):
    s = np.full((4, 32), 2.5, np.float32)
    buf = StagingBuffer.for_scores(s, 4)
    partitioned_rowmax(s, 4, buf)
    assert np.all(buf.row_max == 2.5)


def test_partitioned_rowmax_indivisible():
    with pytest.raises(ShapeError):
        partitioned_rowmax(np.zeros((2, 30)), 4)


def test_combine_single_partial(rng):
    p = attend_tile(PartialOutput.empty(1, 2, 8), rng.standard_normal((2, 8)),
                    rng.standard_normal((5, 8)), rng.standard_normal((5, 8)))
    np.testing.assert_array_equal(combine([p]), p.normalized())


def test_combine_order_invariant(rng):
    parts = [attend_tile(PartialOutput.empty(1, 4, 8), rng.standard_normal((4, 8)) * 3,
                         rng.standard_normal((16, 8)), rng.standard_normal((16, 8))) for _ in range(5)]
    ref = combine(parts)
    for perm in (rng.permutation(5) for _ in range(5)):
        np.testing.assert_allclose(combine([parts[i] for i in perm]), ref, atol=1e-6)


def test_combine_skips_empty_partials(rng):
    p = attend_tile(PartialOutput.empty(1, 2, 8), rng.standard_normal((2, 8)),
                    rng.standard_normal((5, 8)), rng.standard_normal((5, 8)))
    np.testing.assert_array_equal(combine([PartialOutput.empty(1, 2, 8), p]), p.normalized())


def test_combine_empty():
    with pytest.raises(EmptyInput):
        combine([])


@pytest.mark.parametrize("n_tiles,splits", [(10, 3), (2, 8), (0, 4), (8, 1)])
def test_split_ranges_cover(n_tiles, splits):
    ranges = split_ranges(n_tiles * 16, 16, splits)
    covered = [t for a, b in ranges for t in range(a, b)]
    assert covered == list(range(n_tiles * 16))
    assert len(ranges) == min(n_tiles, splits)


def small_cfg(**kw):
    base = dict(batch=1, heads_q=4, heads_kv=2, head_dim=16, tile_m=2, tile_n=16, num_splits=2, warp_n=1)
    base.update(kw)
    return AttentionConfig(**base)


def test_residual_attend_single_key(backend, rng):
    lay = CacheLayout(2, 16, 32, default_spec(4, K_CHANNEL, 16, 32))
    cache = KVCache(lay)
    k, v = fp16_normal(rng, (2, 16)), fp16_normal(rng, (2, 16))
    append_token(cache, k, v)
    state, seg = residual_attend(rng.standard_normal((2, 2, 16)).astype(np.float32), cache, small_cfg())
    assert seg is None
    np.testing.assert_allclose(state.normalized(), np.repeat(v[:, None], 2, axis=1), atol=1e-6)


def test_residual_attend_full_block_packs(backend, rng):
    lay = CacheLayout(2, 16, 32, default_spec(4, K_CHANNEL, 16, 32))
    k = fp16_normal(rng, (2, 32, 16))
    cache = prefill(k[:, :31], k[:, :31], lay)
    append_token(cache, k[:, 31], k[:, 31])
    _, seg = residual_attend(np.zeros((2, 2, 16), np.float32), cache, small_cfg())
    kd, _ = unpack_segment(seg, lay)
    scale = seg.k_params[..., 0].astype(np.float32).max()
    assert np.abs(kd - k).max() <= scale / 2 * (1 + 2 ** -10)


@pytest.mark.parametrize("bits", [16, 8, 4, 2])
def test_split_counts_agree(bits, backend, rng):
    n_r = 8 * 16 // bits
    lay = CacheLayout(2, 16, n_r, default_spec(bits, K_CHANNEL, 16, n_r))
    L = 5 * n_r
    k, v = fp16_normal(rng, (2, L, 16)), fp16_normal(rng, (2, L, 16))
    cache = prefill(k, v, lay)
    q = rng.standard_normal((2, 2, 16)).astype(np.float32) / 4
    ref = combine(packed_attend(q, cache, small_cfg(), 1))
    for s in (2, 4, 8):
        np.testing.assert_allclose(combine(packed_attend(q, cache, small_cfg(), s)), ref, atol=1e-5)
    kd, vd = offline_quant_reference(k, v, lay)
    np.testing.assert_allclose(ref, naive_attention(q * 4, kd, vd), atol=1e-5)


def test_first_token_returns_v(backend, rng):
    cfg = small_cfg()
    lay = CacheLayout(2, 16, 32, default_spec(4, K_CHANNEL, 16, 32))
    v = fp16_normal(rng, (2, 16))
    out, _ = decode_step(rng.standard_normal((4, 16)), fp16_normal(rng, (2, 16)), v, KVCache(lay), cfg)
    np.testing.assert_allclose(out, np.repeat(v, 2, axis=0), atol=1e-6)


def test_nth_step_flushes_once(backend, rng):
    cfg = small_cfg()
    lay = CacheLayout(2, 16, 32, default_spec(4, K_CHANNEL, 16, 32))
    cache = prefill(fp16_normal(rng, (2, 20, 16)), fp16_normal(rng, (2, 20, 16)), lay)
    history = []
    for _ in range(32):
        decode_step(rng.standard_normal((4, 16)), fp16_normal(rng, (2, 16)), fp16_normal(rng, (2, 16)),
                    cache, cfg)
        history.append(cache.packed_len)
    # 20 residual tokens fill the 32-token block on the 12th step
    assert history[10] == 0 and history[11] == 32
    assert sum(b > a for a, b in zip(history, history[1:])) == 1
    assert history[-1] == 32 and cache.res_len == 20


def test_decode_step_bad_query():
    cache = KVCache(CacheLayout(2, 16, 32, default_spec(4, K_CHANNEL, 16, 32)))
    with pytest.raises(ShapeError):
        decode_step(np.zeros((3, 16)), np.zeros((2, 16)), np.zeros((2, 16)), cache, small_cfg())


@pytest.mark.parametrize("bits", [16, 4])
@pytest.mark.parametrize("tail", [7, 0])
def test_decode_matches_oracle(bits, tail, backend, rng):
    cfg = small_cfg(heads_q=8, num_splits=3)
    n_r = 8 * 16 // bits
    lay = CacheLayout(2, 16, n_r, default_spec(bits, K_CHANNEL, 16, n_r))
    L = 3 * n_r + tail
    k, v = fp16_normal(rng, (2, L, 16)), fp16_normal(rng, (2, L, 16))
    cache = prefill(k[:, :-1], v[:, :-1], lay)
    q = rng.standard_normal((8, 16)).astype(np.float32)
    out, _ = decode_step(q, k[:, -1], v[:, -1], cache, cfg)
    # with tail 0 this step fills the residual block and attends it unquantized
    kd, vd = step_view_reference(k, v, lay)
    np.testing.assert_allclose(out, gqa_naive_attention(q, kd, vd, 4), atol=1e-5)
    assert math.isclose(cache.length, L)
