"""Benchmark tables: modelled and measured scaling, and training-memory accounting."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass

from deskdp.comm import GBIT, MB, CostModel, simulate_step_time
from deskdp.config import Config
from deskdp.data import make_synthetic_dataset
from deskdp.memopt import MemoryTrace, plan_checkpoints, run_checkpointed_backward, run_plain_backward
from deskdp.model import base_depth, build_chain, init_params
from deskdp.precision import to_half
from deskdp.tensor import FP32, Tensor
from deskdp.trainer import compute_grads, meter_static, train

CHAIN_DEPTH = 64


@dataclass(frozen=True)
class ScalingRow:
    K: int
    algorithm: str
    precision: str
    payload: float
    source: str  # "model" or "measured"
    step_time: float
    efficiency: float
    throughput: float


def model_scaling(cfg: Config, ks=(1, 2, 4, 8), algorithms=("ring", "ps"), precisions=("fp32", "fp16")):
    c = cfg.comm
    rows = []
    for alg in algorithms:
        for prec in precisions:
            payload = c.payload_mb * MB * (0.5 if prec == "fp16" else 1.0)
            for k in ks:
                est = simulate_step_time(CostModel(c.bandwidth_gbps * GBIT, c.latency, payload, k, alg,
                                                   c.compute_time, c.overlap))
                rows.append(ScalingRow(k, alg, prec, payload, "model", est.step_time, est.efficiency, est.throughput))
    return rows


def measured_scaling(cfg: Config, ks=(1, 2, 4), steps: int = 3, warmup: int = 1):
    """Weak scaling over the in-process transport: per-worker batch fixed, wall-clock per step."""
    rows, base = [], None
    for k in ks:
        c = cfg.replace(comm={"K": k}, train={"steps": warmup})
        train(c, write_outputs=False)  # JIT warm-up and thread start-up
        c = c.replace(train={"steps": steps})
        t0 = time.perf_counter()
        train(c, write_outputs=False)
        step = (time.perf_counter() - t0) / steps
        samples_per_s = k * cfg.train.batch_per_worker / step
        if base is None:
            base = samples_per_s
        eff = samples_per_s / (k * base)
        rows.append(ScalingRow(k, cfg.comm.backend, cfg.precision.mode, 0.0, "measured", step, eff, k * eff))
    return rows


def bench_scaling(cfg: Config, measure: bool = True, ks=(1, 2, 4, 8), measure_ks=(1, 2, 4), steps: int = 3):
    rows = model_scaling(cfg, ks)
    if measure:
        rows += measured_scaling(cfg, measure_ks, steps)
    return rows


@dataclass(frozen=True)
class MemoryRow:
    mode: str
    activation_peak: int
    total_peak: int
    activation_ratio: float
    total_ratio: float


MEMORY_MODES = (
    ("fp32", dict(precision={"mode": "fp32"}, memory={"checkpointing": False}, bn={"mode": "plain"})),
    ("+FP16", dict(precision={"mode": "mixed"}, memory={"checkpointing": False}, bn={"mode": "plain"})),
    ("+FP16+Chpt", dict(precision={"mode": "mixed"}, memory={"checkpointing": True}, bn={"mode": "plain"})),
    ("+FP16+Chpt+IABN", dict(precision={"mode": "mixed"}, memory={"checkpointing": True}, bn={"mode": "iabn"})),
)


def step_trace(cfg: Config) -> MemoryTrace:
    """Metered trace of one single-worker training step."""
    mc = cfg.model
    params = init_params(mc, cfg.train.seed)
    mixed = cfg.precision.mode == "mixed"
    shadows = {k: to_half(v) for k, v in params.items()} if mixed else params
    b = cfg.train.batch_per_worker
    data = make_synthetic_dataset(cfg.data_seed, b, (mc.in_channels, mc.image_size, mc.image_size), mc.classes,
                                  cfg.data.noise)
    trace = MemoryTrace()
    meter_static(trace, params, mixed)
    compute_grads(cfg, shadows, data.images, data.labels, 1.0, None, trace)
    return trace


def chain_activation_ratio(cfg: Config, depth: int = CHAIN_DEPTH) -> tuple[int, int]:
    """(unchecked, checkpointed) activation peaks of the reference model padded to ``depth`` layers."""
    mc = cfg.model.model_copy(update={"pad_layers": depth - base_depth("plain")})
    params = init_params(mc, cfg.train.seed)
    chain = build_chain(mc, params, "plain")
    b = cfg.train.batch_per_worker
    data = make_synthetic_dataset(cfg.data_seed, b, (mc.in_channels, mc.image_size, mc.image_size), mc.classes,
                                  cfg.data.noise)
    x = Tensor(data.images, FP32)
    plain = run_plain_backward(chain, x, input_grad=False).trace
    ckpt = run_checkpointed_backward(chain, x, plan_checkpoints(len(chain)), input_grad=False).trace
    return plain.peak("act"), ckpt.peak("act")


def bench_memory(cfg: Config, depth: int = CHAIN_DEPTH):
    rows = []
    base_act = base_total = None
    for name, overrides in MEMORY_MODES:
        trace = step_trace(cfg.replace(**overrides))
        act, total = trace.peak("act"), trace.peak()
        if base_act is None:
            base_act, base_total = act, total
        rows.append(MemoryRow(name, act, total, act / base_act, total / base_total))
    plain, ckpt = chain_activation_ratio(cfg, depth)
    rows.append(MemoryRow(f"chain{depth}", plain, plain, 1.0, 1.0))
    rows.append(MemoryRow(f"chain{depth}+Chpt", ckpt, ckpt, ckpt / plain, ckpt / plain))
    return rows


def to_csv(rows) -> str:
    out = io.StringIO()
    if not rows:
        return ""
    fields = list(asdict(rows[0]))
    w = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
    return out.getvalue()


def fmt_table(rows) -> str:
    if not rows:
        return ""
    fields = list(asdict(rows[0]))
    cells = [[f"{v:.6g}" if isinstance(v, float) else str(v) for v in asdict(r).values()] for r in rows]
    widths = [max(len(f), *(len(c[i]) for c in cells)) for i, f in enumerate(fields)]
    lines = ["  ".join(f.ljust(w) for f, w in zip(fields, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


__all__ = ["ScalingRow", "MemoryRow", "bench_scaling", "bench_memory", "model_scaling", "measured_scaling",
           "step_trace", "chain_activation_ratio", "to_csv", "fmt_table"]
