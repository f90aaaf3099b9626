"""Synchronous data-parallel training of the reference CNN over K in-process workers.

Each step every worker takes its slice of a global batch that depends only on
(seed, step), runs forward/backward on its FP16 or FP32 parameter copy, and
the flattened gradients are summed either by ring all-reduce (every worker
then applies the same FP32 master update) or by the parameter server (which
applies it once and hands back the new master weights). The loss is a mean
over the global batch, so the summed gradient is the global-batch gradient.

Metrics CSV columns, in order:

    step, loss, scale, skipped, step_time_model, peak_bytes

``scale`` is the loss scale used for the step, ``skipped`` is 1 when an
overflow suppressed the update, ``step_time_model`` is the cost model's
estimate for this payload, and ``peak_bytes`` is rank 0's metered peak.
"""

from __future__ import annotations

import csv
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from deskdp.autograd import record
from deskdp.checkpoint import TrainState, load_checkpoint, save_checkpoint
from deskdp.comm import CommGroup, CostModel, GBIT, make_transports, simulate_step_time
from deskdp.comm.ps import ps_pull, ps_push, start_server
from deskdp.config import Config, resolved_dump, validate_paths
from deskdp.data import Dataset, batch_indices, make_synthetic_dataset
from deskdp.errors import TransportError, WorkerError
from deskdp.memopt import MemoryTrace, plan_checkpoints, run_checkpointed_backward, run_plain_backward
from deskdp.model import build_chain, init_params
from deskdp.precision import LossScaleState, MasterWeights, sgd_step_master, to_half, unscale_and_check, update_scale
from deskdp.tensor import FP16, FP32, Tensor

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "loss", "scale", "skipped", "step_time_model", "peak_bytes")
PS_KEY = "grads"

GradHook = Callable[[int, int, dict], dict]


# ---------------------------------------------------------------- helpers


class Optimizer:
    """Loss-scale bookkeeping plus momentum SGD on FP32 master weights."""

    def __init__(self, mw: MasterWeights, scale: LossScaleState, lr: float, momentum: float):
        self.mw = mw
        self.scale = scale
        self.lr = lr
        self.momentum = momentum

    def apply(self, summed: dict[str, Tensor]) -> bool:
        grads, overflow = unscale_and_check(summed, self.scale)
        sgd_step_master(self.mw, grads, self.lr, self.momentum, skip=overflow)
        self.scale = update_scale(self.scale, overflow)
        return overflow


def flatten(names, tensors: dict[str, Tensor]) -> Tensor:
    dtype = tensors[names[0]].dtype
    return Tensor(np.concatenate([tensors[n].data.reshape(-1) for n in names]), dtype)


def unflatten(names, shapes: dict[str, tuple], flat: Tensor) -> dict[str, Tensor]:
    out, pos = {}, 0
    for n in names:
        size = int(np.prod(shapes[n]))
        out[n] = Tensor(flat.data[pos : pos + size].reshape(shapes[n]), flat.dtype)
        pos += size
    return out


def initial_state(cfg: Config) -> TrainState:
    seed = cfg.model.init_seed if cfg.model.init_seed is not None else cfg.train.seed
    master = init_params(cfg.model, seed)
    velocity = {k: Tensor(np.zeros(v.shape, np.float32), FP32) for k, v in master.items()}
    return TrainState(0, cfg, master, velocity, cfg.precision.loss_scale.state())


def _make_optimizer(cfg: Config, state: TrainState) -> Optimizer:
    mw = MasterWeights({k: Tensor(v.data.copy(), FP32) for k, v in state.master.items()}, {},
                       {k: Tensor(v.data.copy(), FP32) for k, v in state.velocity.items()},
                       half=cfg.precision.mode == "mixed")
    mw.refresh()
    return Optimizer(mw, state.loss_scale, cfg.train.lr, cfg.train.momentum)


def meter_static(trace: MemoryTrace, master: dict[str, Tensor], mixed: bool) -> None:
    """Parameters and optimizer state: FP32 master, FP16 shadow in mixed mode, momentum."""
    nbytes = sum(t.bytes for t in master.values())
    trace.alloc(nbytes, "weights")
    if mixed:
        trace.alloc(nbytes // 2, "shadow")
    trace.alloc(nbytes, "optim")


def compute_grads(cfg: Config, params: dict[str, Tensor], x: np.ndarray, labels: np.ndarray, scale: float,
                  group=None, trace: MemoryTrace | None = None, denom: int | None = None):
    """One worker's forward/backward. Returns ``(unscaled local loss, grads, trace)``."""
    mixed = cfg.precision.mode == "mixed"
    dtype = FP16 if mixed else FP32
    chain = build_chain(cfg.model, params, cfg.bn.mode, group, cfg.bn.eps)
    denom = denom or len(labels)

    def loss_fn(tape, h):
        xent = record(tape, "softmax_xent", [h], labels=labels, denom=denom)
        return record(tape, "loss_scale", [xent], factor=scale)

    xt = Tensor(x, dtype)
    if cfg.memory.checkpointing:
        plan = plan_checkpoints(len(chain), cfg.memory.policy)
        res = run_checkpointed_backward(chain, xt, plan, loss_fn, trace, input_grad=False)
    else:
        res = run_plain_backward(chain, xt, loss_fn, trace, input_grad=False)
    loss = float(np.float32(res.loss.data.reshape(())) / np.float32(scale))
    return loss, res.param_grads, res.trace


def _fmt(v: float) -> str:
    return f"{v:.9g}"


class MetricsSink:
    """Rank 0's CSV writer; on resume, keeps earlier rows up to the resumed step."""

    def __init__(self, path: Path | None, resume_step: int = 0):
        self.rows: list[dict] = []
        self.path = path
        self._fh = None
        if path is None:
            return
        kept = []
        if resume_step and path.exists():
            with path.open(newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if int(r["step"]) <= resume_step]
        self._fh = path.open("w", newline="")
        self._w = csv.DictWriter(self._fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        self._w.writeheader()
        self._w.writerows(kept)

    def write(self, row: dict) -> None:
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("metrics rows must be strictly increasing in step")
        self.rows.append(row)
        if self._fh is not None:
            self._w.writerow({k: row[k] if isinstance(row[k], (int, str)) else _fmt(row[k]) for k in METRIC_COLUMNS})
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class TrainResult:
    rows: list[dict]
    state: TrainState
    weights: list[np.ndarray] = field(default_factory=list)
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None


# ---------------------------------------------------------------- training loop


class _Run:
    def __init__(self, cfg: Config, state: TrainState, data: Dataset, grad_hook, record_weights, out_dir):
        self.cfg = cfg
        self.state = state
        self.data = data
        self.grad_hook = grad_hook
        self.record_weights = record_weights
        self.out_dir = out_dir
        k = cfg.comm.K
        self.names = sorted(state.master)
        self.shapes = {n: state.master[n].shape for n in self.names}
        self.transports = make_transports(k, cfg.comm.transport, cfg.comm.timeout)
        self.groups = [CommGroup(t) for t in self.transports]
        self.errors: list[tuple[int, BaseException]] = []
        self.weights: list[np.ndarray] = []
        self.sink = MetricsSink(out_dir / cfg.output.metrics if out_dir else None, state.step)
        self.server = None
        self.server_opt = None
        if cfg.comm.backend == "ps":
            self.server_opt = _make_optimizer(cfg, state)
            flat = flatten(self.names, self.server_opt.mw.master)
            self.server = start_server(self.transports[0], k, self._ps_update, {PS_KEY: flat})
        self.final_opt: Optimizer | None = None

    def _ps_update(self, key, weights, summed):
        opt = self.server_opt
        overflow = opt.apply(unflatten(self.names, self.shapes, summed))
        return flatten(self.names, opt.mw.master), {"overflow": overflow, "scale": opt.scale.scale}

    def cost(self, payload: int) -> float:
        c = self.cfg.comm
        m = CostModel(c.bandwidth_gbps * GBIT, c.latency, payload, c.K, c.backend, c.compute_time, c.overlap)
        return simulate_step_time(m).step_time

    def snapshot(self, opt: Optimizer, step: int) -> TrainState:
        return TrainState(step, self.cfg, {k: v for k, v in opt.mw.master.items()},
                          {k: v for k, v in opt.mw.velocity.items()}, opt.scale)

    def worker(self, rank: int) -> None:
        try:
            self._loop(rank)
        except BaseException as exc:
            self.errors.append((rank, exc))
            for t in self.transports:
                t.close()

    def _loop(self, rank: int) -> None:
        cfg, group = self.cfg, self.groups[rank]
        b, gb = cfg.train.batch_per_worker, cfg.global_batch
        mixed = cfg.precision.mode == "mixed"
        ps = cfg.comm.backend == "ps"
        opt = None if ps else _make_optimizer(cfg, self.state)
        ref = self.server_opt if ps else opt
        shadows = dict(ref.mw.shadow)
        scale = ref.scale.scale
        for step in range(self.state.step + 1, cfg.train.steps + 1):
            idx = batch_indices(cfg.data_seed, step, len(self.data), gb)[rank * b : (rank + 1) * b]
            trace = MemoryTrace()
            meter_static(trace, self.state.master, mixed)
            loss, grads, _ = compute_grads(cfg, shadows, self.data.images[idx], self.data.labels[idx], scale,
                                           group, trace, denom=gb)
            if self.grad_hook is not None:
                grads = self.grad_hook(step, rank, grads)
            flat = flatten(self.names, grads)
            total_loss = group.allreduce(Tensor(np.array([loss], np.float32), FP32)).item()
            used_scale = scale
            if ps:
                ps_push(group, PS_KEY, flat)
                weights, _, meta = ps_pull(group, PS_KEY)
                master = unflatten(self.names, self.shapes, weights)
                shadows = {k: to_half(v) for k, v in master.items()} if mixed else master
                overflow, scale = bool(meta["overflow"]), meta["scale"]
            else:
                overflow = opt.apply(unflatten(self.names, self.shapes, group.allreduce(flat)))
                shadows = dict(opt.mw.shadow)
                scale = opt.scale.scale
            if rank != 0:
                continue
            self.sink.write({"step": step, "loss": total_loss, "scale": used_scale, "skipped": int(overflow),
                             "step_time_model": self.cost(flat.bytes), "peak_bytes": trace.peak()})
            if self.record_weights:
                self.weights.append(flatten(self.names, ref.mw.master).data.copy())
            every = cfg.train.checkpoint_every
            if self.out_dir is not None and every and step % every == 0:
                save_checkpoint(self.snapshot(ref, step), self.out_dir / f"step{step:06d}.ckpt")
        if rank == 0:
            self.final_opt = ref

    def run(self) -> TrainState:
        threads = [threading.Thread(target=self.worker, args=(r,), name=f"worker-{r}", daemon=True)
                   for r in range(self.cfg.comm.K)]
        try:
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        finally:
            if self.server is not None:
                self.server.stop()
            for t in self.transports:
                t.close()
            self.sink.close()
        if self.errors:
            # the root cause, not the peers that lost their connection because of it
            primary = [e for e in self.errors if not isinstance(e[1], TransportError)] or self.errors
            rank, exc = primary[0]
            raise WorkerError(rank, exc) from exc
        return self.snapshot(self.final_opt, self.cfg.train.steps)


def train(cfg: Config, grad_hook: GradHook | None = None, record_weights: bool = False,
          resume_state: TrainState | None = None, write_outputs: bool = True) -> TrainResult:
    """Run (or continue) training; writes metrics, resolved config and final checkpoint."""
    out_dir = validate_paths(cfg) if write_outputs else None
    if out_dir is not None:
        (out_dir / cfg.output.resolved).write_text(resolved_dump(cfg))
    state = resume_state or initial_state(cfg)
    data = make_synthetic_dataset(cfg.data_seed, cfg.data.n,
                                  (cfg.model.in_channels, cfg.model.image_size, cfg.model.image_size),
                                  cfg.model.classes, cfg.data.noise)
    log.info("training %d steps, K=%d, backend=%s, precision=%s, bn=%s", cfg.train.steps, cfg.comm.K,
             cfg.comm.backend, cfg.precision.mode, cfg.bn.mode)
    run = _Run(cfg, state, data, grad_hook, record_weights, out_dir)
    final = run.run()
    ckpt = None
    if out_dir is not None:
        ckpt = out_dir / cfg.output.checkpoint
        save_checkpoint(final, ckpt)
    return TrainResult(run.sink.rows, final, run.weights, run.sink.path, ckpt)


def resume(path, cfg: Config | None = None, force: bool = False, **kwargs) -> TrainResult:
    state = load_checkpoint(path, expect=cfg, force=force)
    return train(state.config, resume_state=state, **kwargs)
