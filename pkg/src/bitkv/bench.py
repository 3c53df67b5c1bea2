"""Synthetic decode workloads and their latency / accuracy report."""

from __future__ import annotations

import hashlib
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .core import AttentionConfig, ConfigError, as_fp16_values
from .engine import DecodeEngine
from .layout import residual_block_size
from .oracle import compare, gqa_naive_attention, step_view_reference
from .quant import AXES, K_CHANNEL, default_spec

MODES = ("single", "batches", "page")


@dataclass
class WorkloadSpec:
    mode: str = "single"
    seq_len: int = 1024
    batch: int = 1
    heads_q: int = 32
    heads_kv: int = 8
    head_dim: int = 128
    bits: int = 4
    group_size: int | None = None
    quant_axis: str = K_CHANNEL
    num_splits: int = 4
    page_size: int = 16
    steps: int = 8
    seed: int = 0
    tile_m: int = 16
    tile_n: int = 64
    warp_n: int = 4
    interleave: bool = True
    verify: bool = False

    def validate(self) -> "WorkloadSpec":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bits not in (16, 8, 4, 2):
            raise ConfigError(f"bits must be one of 16, 8, 4, 2; got {self.bits}")
        if self.quant_axis not in AXES:
            raise ConfigError(f"quant_axis must be one of {AXES}")
        for name in ("seq_len", "batch", "heads_q", "heads_kv", "head_dim", "num_splits",
                     "page_size", "steps", "tile_m", "tile_n", "warp_n"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mode == "single" and self.batch != 1:
            raise ConfigError("single mode runs batch=1")
        return self

    def attention_config(self) -> AttentionConfig:
        return AttentionConfig(self.batch, self.heads_q, self.heads_kv, self.head_dim,
                               self.tile_m, self.tile_n, self.num_splits, self.warp_n)


@dataclass
class BenchReport:
    config: dict
    n_r: int
    latency_ms: dict
    throughput_tok_s: float
    memory: dict
    numerics: dict
    steps_ms: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, np.float32).tobytes()).hexdigest()[:16]


def build_engine(ws: WorkloadSpec) -> DecodeEngine:
    cfg = ws.attention_config()
    n_r = residual_block_size(ws.bits, ws.warp_n)
    spec = default_spec(ws.bits, ws.quant_axis, ws.head_dim, n_r, ws.group_size)
    return DecodeEngine(cfg, spec, n_r=n_r, store="paged" if ws.mode == "page" else "contiguous",
                        page_size=ws.page_size, interleave=ws.interleave)


def run_bench(ws: WorkloadSpec) -> BenchReport:
    """Prefill ``seq_len`` tokens, run ``steps`` decode steps, report.

    With ``verify`` the final step is checked against the fp16 oracle and
    against the oracle fed with offline-dequantized KV.
    """
    ws.validate()
    eng = build_engine(ws)
    rng = np.random.default_rng(ws.seed)
    B, Hk, Hq, d, L = ws.batch, ws.heads_kv, ws.heads_q, ws.head_dim, ws.seq_len
    total = L + ws.steps
    k_all = as_fp16_values(rng.standard_normal((B, Hk, total, d), np.float32))
    v_all = as_fp16_values(rng.standard_normal((B, Hk, total, d), np.float32))
    qs = rng.standard_normal((ws.steps, B, Hq, d), np.float32)

    eng.prefill(k_all[:, :, :L], v_all[:, :, :L], max_len=total)
    times = []
    out = None
    for s in range(ws.steps):
        t0 = time.perf_counter()
        out = eng.step(qs[s], k_all[:, :, L + s], v_all[:, :, L + s])
        times.append(time.perf_counter() - t0)

    numerics = {"output_sha256": _digest(out), "output_mean_abs": float(np.abs(out).mean()),
                "packed_len": eng.caches[0].packed_len, "res_len": eng.caches[0].res_len}
    if ws.verify:
        ref16, refq = [], []
        for b in range(B):
            ref16.append(gqa_naive_attention(qs[-1, b], k_all[b], v_all[b], Hq // Hk))
            kd, vd = step_view_reference(k_all[b], v_all[b], eng.layout)
            refq.append(gqa_naive_attention(qs[-1, b], kd, vd, Hq // Hk))
        numerics["oracle"] = compare(out, np.stack(ref16)).as_dict()
        numerics["oracle_dequant"] = compare(out, np.stack(refq)).as_dict()

    ms = np.array(times) * 1e3
    latency = {"mean": float(ms.mean()), "p50": float(np.percentile(ms, 50)),
               "p99": float(np.percentile(ms, 99)), "total_s": float(sum(times))}
    throughput = ws.steps * B / sum(times) if sum(times) > 0 else float("inf")
    config = asdict(ws)
    config["backend"] = kernels.get_backend()
    return BenchReport(config, eng.n_r, latency, throughput, eng.memory(), numerics,
                       [float(x) for x in ms])
