import numpy as np
import pytest

from bitkv.attention import PartialOutput, attend_tile, combine
from bitkv.core import ShapeError
from bitkv.kvcache import CacheLayout, append_token, flush_residual, prefill
from bitkv.oracle import compare, gqa_naive_attention, naive_attention, offline_quant_reference, \
    step_view_reference
from bitkv.quant import K_CHANNEL, K_TOKEN, default_spec

from conftest import fp16_normal


def test_single_key_returns_value():
    v = np.array([[1.0, -2.0, 3.0]])
    out = naive_attention(np.ones((2, 3)), np.ones((1, 3)), v)
    np.testing.assert_array_equal(out, np.repeat(v, 2, axis=0))


def test_zero_scores_average_v(rng):
    q = np.zeros((1, 8))
    v = rng.standard_normal((10, 8))
    np.testing.assert_allclose(naive_attention(q, rng.standard_normal((10, 8)), v)[0], v.mean(0), atol=1e-6)


def test_large_scores_are_stable():
    q = np.full((1, 4), 1000.0)
    k = np.array([[1.0] * 4, [0.9] * 4])
    out = naive_attention(q, k, np.eye(2, 4))
    assert np.all(np.isfinite(out)) and out[0, 0] > 0.999


def test_oracle_rejects_bad_shapes():
    with pytest.raises(ShapeError):
        naive_attention(np.zeros((1, 4)), np.zeros((3, 4)), np.zeros((2, 4)))
    with pytest.raises(ShapeError):
        naive_attention(np.zeros((1, 4)), np.zeros((0, 4)), np.zeros((0, 4)))


def test_oracle_matches_tiled_on_seeded_cases():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        L, d = int(rng.integers(1, 200)), int(rng.choice([8, 32, 64]))
        q, k, v = rng.standard_normal((3, d)), rng.standard_normal((L, d)), rng.standard_normal((L, d))
        parts = [attend_tile(PartialOutput.empty(1, 3, d), q, k[a:a + 16], v[a:a + 16])
                 for a in range(0, L, 16)]
        np.testing.assert_allclose(combine(parts)[0], naive_attention(q, k, v), atol=1e-5)


def test_gqa_oracle_repeats_kv(rng):
    q = rng.standard_normal((6, 8))
    k, v = rng.standard_normal((2, 12, 8)), rng.standard_normal((2, 12, 8))
    out = gqa_naive_attention(q, k, v, 3)
    np.testing.assert_allclose(out[4], naive_attention(q[4:5], k[1], v[1])[0], atol=0)


def test_offline_reference_constant_is_exact():
    lay = CacheLayout(1, 16, 32, default_spec(4, K_CHANNEL, 16, 32))
    k = np.full((1, 70, 16), -0.5, np.float32)
    kd, vd = offline_quant_reference(k, k, lay)
    np.testing.assert_array_equal(kd, k)
    np.testing.assert_array_equal(vd, k)


def test_offline_reference_passthrough_identity(rng):
    lay = CacheLayout(2, 16, 8, default_spec(16, K_CHANNEL, 16, 8))
    k = fp16_normal(rng, (2, 30, 16))
    kd, _ = offline_quant_reference(k, k, lay)
    np.testing.assert_array_equal(kd, k)


@pytest.mark.parametrize("axis", [K_CHANNEL, K_TOKEN])
def test_offline_reference_matches_replay(axis, rng):
    lay = CacheLayout(2, 16, 64, default_spec(2, axis, 16, 64))
    k, v = fp16_normal(rng, (2, 200, 16)), fp16_normal(rng, (2, 200, 16))
    cache = prefill(k[:, :50], v[:, :50], lay)
    for t in range(50, 200):
        append_token(cache, k[:, t], v[:, t])
        if cache.res_len == cache.n_r:
            flush_residual(cache)
    kr, vr = cache.reconstruct()
    ko, vo = offline_quant_reference(k, v, lay)
    assert kr.tobytes() == ko.tobytes() and vr.tobytes() == vo.tobytes()


def test_compare_identical(rng):
    x = rng.standard_normal((4, 8))
    r = compare(x, x)
    assert r.max_abs_err == 0 and r.rel_l2_err == 0 and r.cosine_similarity == pytest.approx(1.0)


def test_compare_orthogonal():
    r = compare(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert r.cosine_similarity == 0.0 and r.max_abs_err == 1.0


def test_compare_shape_mismatch():
    with pytest.raises(ShapeError):
        compare(np.zeros(3), np.zeros(4))


def test_step_view_keeps_filled_block_unquantized(rng):
    lay = CacheLayout(1, 16, 32, default_spec(4, K_CHANNEL, 16, 32))
    k = fp16_normal(rng, (1, 64, 16))
    kd, _ = step_view_reference(k, k, lay)
    full, _ = offline_quant_reference(k, k, lay)
    np.testing.assert_array_equal(kd[:, :32], full[:, :32])
    np.testing.assert_array_equal(kd[:, 32:], k[:, 32:])
    assert not np.array_equal(full[:, 32:], k[:, 32:])
