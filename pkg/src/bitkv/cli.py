"""``bitkv`` command line: bench, verify, dump, load."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys

import numpy as np

from .bdkv import dump_cache, load_cache
from .bench import MODES, WorkloadSpec, build_engine, run_bench
from .attention import decode_step
from .core import AttentionConfig, BitKVError, ConfigError, as_fp16_values, validate_config
from .quant import AXES
from .verify import run_verify

log = logging.getLogger("bitkv")


def _add_workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=MODES, default="single")
    p.add_argument("--seq-len", type=int, default=1024)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--heads-q", type=int, default=32)
    p.add_argument("--heads-kv", type=int, default=8)
    p.add_argument("--head-dim", type=int, default=128)
    p.add_argument("--bits", type=int, choices=(16, 8, 4, 2), default=4)
    p.add_argument("--group-size", type=int, default=None,
                   help="K group size (default: one group per tile dimension)")
    p.add_argument("--quant-axis", choices=AXES, default="k-channel")
    p.add_argument("--splits", type=int, default=4, dest="num_splits")
    p.add_argument("--page-size", type=int, default=16)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tile-m", type=int, default=16)
    p.add_argument("--tile-n", type=int, default=64)
    p.add_argument("--warp-n", type=int, default=4)
    p.add_argument("--no-interleave", action="store_true",
                   help="pack codes in natural order instead of the interleaved order")


def _workload(args) -> WorkloadSpec:
    return WorkloadSpec(mode=args.mode, seq_len=args.seq_len, batch=args.batch,
                        heads_q=args.heads_q, heads_kv=args.heads_kv, head_dim=args.head_dim,
                        bits=args.bits, group_size=args.group_size, quant_axis=args.quant_axis,
                        num_splits=args.num_splits, page_size=args.page_size, steps=args.steps,
                        seed=args.seed, tile_m=args.tile_m, tile_n=args.tile_n,
                        warp_n=args.warp_n, interleave=not args.no_interleave,
                        verify=getattr(args, "verify", False))


def _emit(text: str, path) -> None:
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_bench(args) -> int:
    report = run_bench(_workload(args))
    if args.csv:
        rows = [("step", "latency_ms")] + [(i, f"{ms:.6f}") for i, ms in enumerate(report.steps_ms)]
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        _emit(buf.getvalue(), args.output)
    else:
        _emit(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n", args.output)
    return 0


def _parse_seeds(text: str) -> range:
    if ":" in text:
        a, b = text.split(":", 1)
        return range(int(a), int(b))
    return range(int(text))


def cmd_verify(args) -> int:
    bits = tuple(int(b) for b in args.bits.split(","))
    results = run_verify(_parse_seeds(args.seeds), bits, inject_fault=args.inject_fault)
    failed = 0
    for r in results:
        status = "SKIP" if r.skipped else ("PASS" if r.passed else "FAIL")
        failed += not r.passed
        print(f"{status} {r.name} {r.detail}".rstrip())
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_dump(args) -> int:
    if not args.output:
        raise ConfigError("dump needs --output PATH")
    ws = _workload(args).validate()
    eng = build_engine(ws)
    rng = np.random.default_rng(ws.seed)
    shape = (ws.batch, ws.heads_kv, ws.seq_len, ws.head_dim)
    eng.prefill(as_fp16_values(rng.standard_normal(shape)), as_fp16_values(rng.standard_normal(shape)))
    for _ in range(ws.steps):
        q = rng.standard_normal((ws.batch, ws.heads_q, ws.head_dim), np.float32)
        kv_shape = (ws.batch, ws.heads_kv, ws.head_dim)
        eng.step(q, as_fp16_values(rng.standard_normal(kv_shape)),
                 as_fp16_values(rng.standard_normal(kv_shape)))
    n = dump_cache(eng.caches[0], args.output)
    print(json.dumps({"path": args.output, "bytes": n, "packed_len": eng.caches[0].packed_len,
                      "res_len": eng.caches[0].res_len}))
    return 0


def replay_decode(cache, seed: int, n_group: int = 1, tile_n: int = 64, num_splits: int = 4):
    """One seeded decode step on a loaded cache; returns the ``[heads_q, d]`` output."""
    lay = cache.layout
    cfg = AttentionConfig(1, lay.heads_kv * n_group, lay.heads_kv, lay.head_dim,
                          tile_m=16, tile_n=tile_n, num_splits=num_splits, warp_n=1)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((cfg.heads_q, lay.head_dim), np.float32)
    k = as_fp16_values(rng.standard_normal((lay.heads_kv, lay.head_dim)))
    v = as_fp16_values(rng.standard_normal((lay.heads_kv, lay.head_dim)))
    return decode_step(q, k, v, cache, validate_config(cfg))[0]


def cmd_load(args) -> int:
    cache = load_cache(args.path)
    lay = cache.layout
    k, v = cache.reconstruct()
    info = {"bits": lay.bits, "quant_axis": lay.spec.axis, "group_size": lay.spec.group_size,
            "v_group_size": lay.spec.v_group_size, "n_r": lay.n_r, "heads_kv": lay.heads_kv,
            "head_dim": lay.head_dim, "interleave": lay.interleave,
            "packed_len": cache.packed_len, "res_len": cache.res_len, "memory": cache.memory(),
            "k_abs_mean": float(np.abs(k).mean()) if k.size else 0.0,
            "v_abs_mean": float(np.abs(v).mean()) if v.size else 0.0}
    if args.decode_seed is not None:
        out = replay_decode(cache, args.decode_seed, args.n_group)
        info["decode_output_sha256"] = hashlib.sha256(out.tobytes()).hexdigest()[:16]
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bitkv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="run a synthetic decode workload")
    _add_workload_args(p)
    p.add_argument("--verify", action="store_true", help="check the last step against the oracle")
    p.add_argument("--csv", action="store_true", help="one CSV row per decode step")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the invariant suite over a seed range")
    p.add_argument("--seeds", default="3", help="N or A:B")
    p.add_argument("--bits", default="2,4,8,16")
    p.add_argument("--inject-fault", action="store_true",
                   help="corrupt one packed word before the replay comparison")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("dump", help="run a workload and write sequence 0's cache as BDKV")
    _add_workload_args(p)
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("load", help="read a BDKV file and print a summary")
    p.add_argument("path")
    p.add_argument("--decode-seed", type=int, default=None,
                   help="also run one seeded decode step and print its output digest")
    p.add_argument("--n-group", type=int, default=1, help="query heads per KV head for --decode-seed")
    p.set_defaults(func=cmd_load)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except BitKVError as exc:
        print(f"bitkv: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
