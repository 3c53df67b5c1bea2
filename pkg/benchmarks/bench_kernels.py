"""Time the hot kernels under each backend.

    python benchmarks/bench_kernels.py --seq-len 8192 --repeat 5

Prints one line per (kernel, backend) with the best wall time, plus the
numba speedup.  The first call per backend is a warm-up (JIT compile for
numba) and is not timed.
"""

import argparse
import time

import numpy as np

from bitkv import kernels
from bitkv.attention import PartialOutput
from bitkv.core import as_fp16_values
from bitkv.kvcache import CacheLayout, prefill
from bitkv.layout import interleave_order, residual_block_size
from bitkv.quant import K_CHANNEL, default_spec


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def make_cases(args):
    rng = np.random.default_rng(0)
    H, d, L = args.heads_kv, args.head_dim, args.seq_len
    n_r = residual_block_size(args.bits, 4)
    L -= L % n_r
    lay = CacheLayout(H, d, n_r, default_spec(args.bits, K_CHANNEL, d, n_r))
    k = as_fp16_values(rng.standard_normal((H, L, d)))
    v = as_fp16_values(rng.standard_normal((H, L, d)))
    cache = prefill(k, v, lay)
    kw, vw = (np.ascontiguousarray(w) for w in cache.store.words())
    kp, vp = (np.ascontiguousarray(p, np.float32) for p in cache.store.params())
    q = rng.standard_normal((H, args.group, d)).astype(np.float32) / np.sqrt(d)
    s, shifts = lay.spec, lay.perm.shifts
    words = np.arange(1 << 16, dtype=np.uint16)
    wshifts = interleave_order(args.bits).shifts

    def packed():
        st = PartialOutput.empty(H, args.group, d)
        kernels.attend_packed(q, kw, kp, s.k_channel, s.group_size, vw, vp, s.v_group_size,
                              shifts, args.bits, n_r, 0, L, 64, 4, st.o, st.m, st.l)

    def dense():
        st = PartialOutput.empty(H, args.group, d)
        kernels.attend_dense(q, k, v, 0, L, 64, 4, st.o, st.m, st.l)

    return {
        "unpack_words[65536]": lambda: kernels.unpack_words(words, wshifts, args.bits),
        f"dequant_range[L={L}]": lambda: kernels.dequant_range(kw, kp, s.k_channel, s.group_size,
                                                               shifts, args.bits, n_r, 0, L),
        f"attend_dense[L={L}]": dense,
        f"attend_packed[L={L},B={args.bits}]": packed,
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seq-len", type=int, default=8192)
    p.add_argument("--heads-kv", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--group", type=int, default=4, help="query rows per KV head")
    p.add_argument("--bits", type=int, choices=(2, 4, 8), default=4)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    results = {}
    for backend in kernels.available_backends():
        with kernels.use_backend(backend):
            for name, fn in make_cases(args).items():
                results[name, backend] = best_of(fn, args.repeat)

    names = list(dict.fromkeys(n for n, _ in results))
    print(f"{'kernel':40s} {'backend':8s} {'best ms':>10s}")
    for name in names:
        for backend in kernels.available_backends():
            print(f"{name:40s} {backend:8s} {results[name, backend] * 1e3:10.3f}")
        if "numba" in kernels.available_backends():
            ratio = results[name, "numpy"] / results[name, "numba"]
            print(f"{'':40s} {'speedup':8s} {ratio:9.1f}x")


if __name__ == "__main__":
    main()
