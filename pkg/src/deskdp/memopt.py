"""Activation-memory tools: metering, sqrt(L) gradient checkpointing and in-place activated BN."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from deskdp.autograd import OpRule, Tape, backward, record, register_op
from deskdp.errors import ContractError, NonInvertibleError, PlanError, TopologyError, TraceError
from deskdp.syncbn import DEFAULT_EPS, _channel_view, bn_backward_core, gather_stats
from deskdp.tensor import FP32, FP64, Tensor, from_compute

DEFAULT_SLOPE = 0.01

# ------------------------------------------------------------------ metering


@dataclass(frozen=True)
class MemoryEvent:
    event: str  # "alloc" | "free"
    bytes: int
    tag: str


@dataclass
class MemoryTrace:
    """Time-ordered alloc/free events.

    Tags in use: ``act`` (activations), ``loss`` (FP32 loss scalars),
    ``grad`` (activation gradients),
    ``wgrad`` (parameter gradients), ``stats`` (saved BN statistics) and, from
    the trainer, ``weights``, ``shadow`` and ``optim``.
    """

    events: list[MemoryEvent] = field(default_factory=list)

    def alloc(self, nbytes: int, tag: str = "act") -> None:
        self.events.append(MemoryEvent("alloc", int(nbytes), tag))

    def free(self, nbytes: int, tag: str = "act") -> None:
        self.events.append(MemoryEvent("free", int(nbytes), tag))

    def peak(self, tags=None) -> int:
        return peak_memory(self, tags)

    def rows(self):
        """``(event, bytes, tag, running, peak)`` per event."""
        running = peak = 0
        for ev in self.events:
            running += ev.bytes if ev.event == "alloc" else -ev.bytes
            peak = max(peak, running)
            yield ev.event, ev.bytes, ev.tag, running, peak

    def to_csv(self, fh=None) -> str | None:
        out = fh if fh is not None else io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["event", "bytes", "tag", "running", "peak"])
        w.writerows(self.rows())
        return None if fh is not None else out.getvalue()


def peak_memory(trace: MemoryTrace, tags=None) -> int:
    """Maximum prefix sum of signed byte events, optionally restricted to ``tags``.

    Raises :class:`TraceError` if any tag's running total would go negative
    (a free with no matching alloc).
    """
    if tags is not None:
        tags = {tags} if isinstance(tags, str) else set(tags)
    per_tag: dict[str, int] = {}
    running = peak = 0
    for k, ev in enumerate(trace.events):
        if ev.event not in ("alloc", "free"):
            raise TraceError(f"event {k}: unknown kind {ev.event!r}")
        delta = ev.bytes if ev.event == "alloc" else -ev.bytes
        per_tag[ev.tag] = per_tag.get(ev.tag, 0) + delta
        if per_tag[ev.tag] < 0:
            raise TraceError(f"event {k}: free of {ev.bytes} bytes ({ev.tag}) without matching alloc")
        if tags is None or ev.tag in tags:
            running += delta
            peak = max(peak, running)
    return peak


# ------------------------------------------------------------------ planning


@dataclass(frozen=True)
class CheckpointPlan:
    """Layers ``[0, L)`` cut after each boundary; segment inputs are retained."""

    num_layers: int
    boundaries: tuple[int, ...]

    @property
    def segments(self) -> list[tuple[int, int]]:
        cuts = (0,) + self.boundaries + (self.num_layers,)
        return list(zip(cuts[:-1], cuts[1:]))


def _ceil_sqrt(n: int) -> int:
    r = math.isqrt(n)
    return r if r * r == n else r + 1


def plan_checkpoints(num_layers: int, policy="sqrt") -> CheckpointPlan:
    """``sqrt``: ceil(sqrt(L)) segments whose lengths differ by at most one
    (longer ones first). A sequence is taken as explicit boundaries."""
    if not isinstance(num_layers, int) or num_layers < 1:
        raise PlanError(f"layer count must be a positive integer, got {num_layers!r}")
    if isinstance(policy, str):
        if policy != "sqrt":
            raise PlanError(f"unknown checkpoint policy {policy!r}")
        nseg = _ceil_sqrt(num_layers)
        base, extra = divmod(num_layers, nseg)
        cuts, pos = [], 0
        for s in range(nseg - 1):
            pos += base + (1 if s < extra else 0)
            cuts.append(pos)
        return CheckpointPlan(num_layers, tuple(cuts))
    cuts = tuple(policy)
    if any(not isinstance(b, (int, np.integer)) for b in cuts):
        raise PlanError(f"boundaries must be integers: {cuts}")
    cuts = tuple(int(b) for b in cuts)
    if any(b <= 0 or b >= num_layers for b in cuts):
        raise PlanError(f"boundaries must lie strictly inside (0, {num_layers}): {cuts}")
    if any(b2 <= b1 for b1, b2 in zip(cuts, cuts[1:])):
        raise PlanError(f"boundaries must be strictly increasing: {cuts}")
    return CheckpointPlan(num_layers, cuts)


# ------------------------------------------------------------------ layer chains


class Layer:
    """One link of a linear chain.

    ``params`` maps globally unique names to tensors; ``forward`` records ops
    on ``tape`` from input id ``x`` and returns the output id. ``p`` maps the
    same names to their leaf ids on that tape.
    """

    def __init__(self, fn: Callable[[Tape, int, dict], int], params: dict[str, Tensor] | None = None, name: str = ""):
        self.fn = fn
        self.params = dict(params or {})
        self.name = name

    def forward(self, tape: Tape, x: int, p: dict[str, int]) -> int:
        return self.fn(tape, x, p)

    def __repr__(self):
        return f"Layer({self.name or self.fn.__name__})"


def sum_loss(tape: Tape, out: int) -> int:
    return record(tape, "sum", [out])


@dataclass
class ChainResult:
    loss: Tensor
    input_grad: Tensor | None
    param_grads: dict[str, Tensor]
    trace: MemoryTrace


def _check_chain(chain) -> list[Layer]:
    if not isinstance(chain, Sequence) or isinstance(chain, (str, bytes)):
        raise TopologyError("checkpointing needs a linear sequence of layers")
    for layer in chain:
        if not isinstance(layer, Layer):
            raise TopologyError(f"chain element {layer!r} is not a Layer")
    return list(chain)


def _run_layer(tape: Tape, layer: Layer, x: int, pids: dict[str, int]) -> int:
    first_node = len(tape.nodes)
    out = layer.forward(tape, x, pids)
    if not isinstance(out, (int, np.integer)) or out not in tape.values:
        raise TopologyError(f"{layer!r} must return a single value id on the tape, got {out!r}")
    allowed = {x, *pids.values()}
    for node in tape.nodes[first_node:]:
        for i in node.inputs:
            if i not in allowed and not (i in tape.leaves and i > x):
                raise TopologyError(f"{layer!r} reads value {i} from outside its own input: graph is not a chain")
        allowed.add(node.output)
    return int(out)


def _param_leaves(tape: Tape, chain: list[Layer], lo: int, hi: int, requires_grad: bool) -> dict[str, int]:
    pids = {}
    for layer in chain[lo:hi]:
        for name, t in layer.params.items():
            if name not in pids:
                pids[name] = tape.leaf(t, requires_grad=requires_grad, tag="param")
    return pids


def run_plain_backward(chain, x: Tensor, loss_fn=sum_loss, trace: MemoryTrace | None = None,
                       input_grad: bool = True) -> ChainResult:
    """Reference path: one tape holding every saved activation."""
    chain = _check_chain(chain)
    trace = trace if trace is not None else MemoryTrace()
    tape = Tape(trace)
    xid = tape.leaf(x, requires_grad=input_grad, meter=True)
    pids = _param_leaves(tape, chain, 0, len(chain), True)
    h = xid
    for layer in chain:
        h = _run_layer(tape, layer, h, pids)
    loss_id = loss_fn(tape, h)
    loss = tape.value(loss_id)
    grads = backward(tape, loss_id)
    return ChainResult(loss, grads.get(xid) if input_grad else None,
                       {name: grads[i] for name, i in pids.items()}, trace)


def run_checkpointed_backward(chain, x: Tensor, plan: CheckpointPlan, loss_fn=sum_loss,
                              trace: MemoryTrace | None = None, input_grad: bool = True) -> ChainResult:
    """Backward with per-segment recomputation.

    Forward keeps only segment inputs; every intra-segment activation is
    dropped as soon as the next op has consumed it. Backward walks the
    segments in reverse, re-running each one from its retained input on a
    saving tape and back-propagating the upstream gradient through it.
    """
    chain = _check_chain(chain)
    if plan.num_layers != len(chain):
        raise PlanError(f"plan is for {plan.num_layers} layers, chain has {len(chain)}")
    trace = trace if trace is not None else MemoryTrace()
    segments = plan.segments
    last = len(segments) - 1

    trace.alloc(x.bytes, "act")
    retained = [x]
    tags = ["act"]
    for s, (lo, hi) in enumerate(segments):
        tape = Tape(trace, save=False)
        h = tape.leaf(retained[-1])
        pids = _param_leaves(tape, chain, lo, hi, False)
        for layer in chain[lo:hi]:
            h = _run_layer(tape, layer, h, pids)
        if s == last:
            h = loss_fn(tape, h)
        tape.close_forward(keep=(h,))
        retained.append(tape.value(h))
        tags.append(tape._tag_of(h))
    loss = retained[-1]

    param_grads: dict[str, Tensor] = {}
    upstream = None
    for s in range(last, -1, -1):
        lo, hi = segments[s]
        trace.free(retained[s + 1].bytes, tags[s + 1])
        retained[s + 1] = None
        tape = Tape(trace)
        need_in = s > 0 or input_grad
        bid = tape.leaf(retained[s], requires_grad=need_in)
        pids = _param_leaves(tape, chain, lo, hi, True)
        h = bid
        for layer in chain[lo:hi]:
            h = _run_layer(tape, layer, h, pids)
        if s == last:
            h = loss_fn(tape, h)
        init = {pids[name]: g for name, g in param_grads.items() if name in pids}
        grads = backward(tape, h, seed=upstream, init=init, adopt_seed=upstream is not None)
        for name, i in pids.items():
            param_grads[name] = grads[i]
        upstream = grads.get(bid) if need_in else None
    trace.free(x.bytes, "act")
    return ChainResult(loss, upstream, param_grads, trace)


# ------------------------------------------------------------------ in-place activated BN


@dataclass(frozen=True)
class IABNSaved:
    y: Tensor
    mean: np.ndarray
    invstd: np.ndarray
    gamma: Tensor
    beta: Tensor
    count: float
    membership: tuple | None = None


def _check_invertible(gamma: Tensor, slope: float) -> None:
    if slope <= 0:
        raise NonInvertibleError(f"leaky slope must be > 0 for an invertible activation, got {slope}")
    if np.any(gamma.data == 0):
        raise NonInvertibleError("gamma has zero entries; the affine step cannot be inverted")


def iabn_forward(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_EPS, slope: float = DEFAULT_SLOPE,
                 group=None) -> tuple[Tensor, IABNSaved]:
    """``y = leaky_relu(gamma * xhat + beta)``; keeps ``y`` and the statistics, never ``x``."""
    _check_invertible(gamma, slope)
    stats = gather_stats(x, group)
    acc = np.dtype(np.float64) if x.dtype is FP64 else np.dtype(np.float32)
    mean = stats.mean.astype(acc)
    invstd = stats.invstd(eps).astype(acc)
    xw = x.data.astype(acc)
    nd = xw.ndim
    z = _channel_view(gamma.data.astype(acc), nd) * ((xw - _channel_view(mean, nd)) * _channel_view(invstd, nd)) \
        + _channel_view(beta.data.astype(acc), nd)
    y = from_compute(np.where(z >= 0, z, z * acc.type(slope)), x.dtype)
    saved = IABNSaved(y, mean, invstd, gamma, beta, stats.count, group.membership if group is not None else None)
    return y, saved


def iabn_backward(dy: Tensor, saved: IABNSaved, eps: float = DEFAULT_EPS, slope: float = DEFAULT_SLOPE, group=None,
                  local_param_grads: bool = False):
    """``(dx, dgamma, dbeta)`` rebuilt from the output alone.

    The pre-activation is recovered by inverting the leaky ReLU, the
    normalized input by inverting the affine step, then the usual BN backward
    applies.
    """
    if saved is None or saved.y is None or saved.invstd is None or saved.gamma is None or saved.beta is None:
        raise ContractError("iabn backward needs the saved output, statistics, gamma and beta")
    _check_invertible(saved.gamma, slope)
    now = group.membership if group is not None else None
    if now != saved.membership:
        raise ContractError("group membership changed between iabn forward and backward")
    acc = saved.invstd.dtype
    y = saved.y.data.astype(acc)
    nd = y.ndim
    s = acc.type(slope)
    positive = y > 0
    z = np.where(y >= 0, y, y / s)
    gamma = saved.gamma.data.astype(acc)
    xhat = (z - _channel_view(saved.beta.data.astype(acc), nd)) / _channel_view(gamma, nd)
    dyw = dy.data.astype(acc)
    # subgradient at 0 follows the negative branch, as for leaky_relu
    dz = np.where(positive, dyw, dyw * s)
    dx, dgamma, dbeta = bn_backward_core(dz, xhat, gamma, saved.invstd, saved.count, group, local_param_grads)
    return (from_compute(dx, dy.dtype), from_compute(dgamma, saved.gamma.dtype), from_compute(dbeta, saved.beta.dtype))


def _iabn_fwd(xs, attrs):
    x, gamma, beta = xs
    y, saved = iabn_forward(x, gamma, beta, attrs.get("eps", DEFAULT_EPS), attrs.get("slope", DEFAULT_SLOPE),
                            attrs.get("group"))
    attrs["count"] = saved.count
    attrs["membership"] = saved.membership
    dt = FP64 if saved.mean.dtype == np.float64 else FP32
    return y, {"mean": Tensor._wrap(saved.mean, dt), "invstd": Tensor._wrap(saved.invstd, dt)}


def _iabn_bwd(g, saved, out, extras, attrs, needs):
    st = IABNSaved(out, extras["mean"].data, extras["invstd"].data, saved[1], saved[2], attrs["count"],
                   attrs["membership"])
    dx, dgamma, dbeta = iabn_backward(g, st, attrs.get("eps", DEFAULT_EPS), attrs.get("slope", DEFAULT_SLOPE),
                                      attrs.get("group"), local_param_grads=True)
    return [dx if needs[0] else None, dgamma if needs[1] else None, dbeta if needs[2] else None]


register_op("iabn", OpRule(_iabn_fwd, _iabn_bwd, saves_inputs=(1, 2), saves_output=True, arity=3))
