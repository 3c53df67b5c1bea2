import numpy as np
import pytest

from bitkv.core import AttentionConfig, CapacityError, ConfigError
from bitkv.engine import DecodeEngine, max_threads
from bitkv.layout import residual_block_size
from bitkv.oracle import gqa_naive_attention, step_view_reference
from bitkv.quant import K_CHANNEL, default_spec

from conftest import fp16_normal


def engine(bits=4, batch=2, store="contiguous", **kw):
    cfg = AttentionConfig(batch=batch, heads_q=4, heads_kv=2, head_dim=32, tile_m=2, tile_n=16,
                          num_splits=2, warp_n=1)
    n_r = residual_block_size(bits, 1)
    return DecodeEngine(cfg, default_spec(bits, K_CHANNEL, 32, n_r), store=store, **kw)


def drive(eng, rng, L0=90, steps=40):
    B = eng.cfg.batch
    total = L0 + steps
    k, v = fp16_normal(rng, (B, 2, total, 32)), fp16_normal(rng, (B, 2, total, 32))
    eng.prefill(k[:, :, :L0], v[:, :, :L0], max_len=total)
    out = None
    for t in range(L0, total):
        q = rng.standard_normal((B, 4, 32)).astype(np.float32)
        out = eng.step(q, k[:, :, t], v[:, :, t])
    return q, k, v, out


@pytest.mark.parametrize("store", ["contiguous", "paged"])
def test_batch_matches_oracle(store, backend, rng):
    eng = engine(store=store)
    q, k, v, out = drive(eng, rng)
    for b in range(2):
        kd, vd = step_view_reference(k[b], v[b], eng.layout)
        np.testing.assert_allclose(out[b], gqa_naive_attention(q[b], kd, vd, 2), atol=1e-5)


def test_threads_do_not_change_output(monkeypatch):
    a = drive(engine(batch=3), np.random.default_rng(5))[-1]
    monkeypatch.setenv("BITKV_THREADS", "3")
    assert max_threads() == 3
    b = drive(engine(batch=3), np.random.default_rng(5))[-1]
    assert a.tobytes() == b.tobytes()


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("BITKV_THREADS", "many")
    with pytest.raises(ConfigError):
        max_threads()


def test_paged_pool_exhaustion(rng):
    eng = engine(store="paged", num_pages=4, page_size=32)
    with pytest.raises(CapacityError):
        drive(eng, rng, L0=100, steps=50)


def test_unknown_store():
    with pytest.raises(ConfigError):
        engine(store="ring")


def test_memory_sums_sequences(rng):
    eng = engine(batch=2)
    drive(eng, rng, L0=64, steps=1)
    one = eng.caches[0].memory()
    assert eng.memory() == {k: 2 * v for k, v in one.items()}


def test_reprefill_releases_pages(rng):
    eng = engine(store="paged", batch=1, num_pages=8, page_size=32)
    for _ in range(3):
        drive(eng, rng, L0=100, steps=10)
    assert eng.pool.free_pages == 8 - 4
