"""Define-by-run reverse-mode autodiff.

A :class:`Tape` computes each op eagerly as it is recorded. When the forward
pass is closed (explicitly, or implicitly by :func:`backward`) the tape runs a
liveness pass over its nodes: values nobody needs any more are dropped, and if
a :class:`~deskdp.memopt.MemoryTrace` is attached the alloc/free sequence of an
executor that frees every buffer at its last use is appended to it.

Op rules declare which inputs (and whether the output) their backward reads.
Backward rules only ever see those tensors, so a rule that forgets to declare
something fails loudly instead of silently keeping memory alive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from deskdp import kernels
from deskdp.errors import ContractError, GraphError, ShapeError
from deskdp.tensor import FP32, FP64, DType, Tensor, from_compute, leaky_relu_array


@dataclass(frozen=True)
class OpRule:
    forward: Callable
    backward: Callable
    saves_inputs: tuple[int, ...] = ()
    saves_output: bool = False
    arity: int = 1
    out_tag: str = "act"


OPS: dict[str, OpRule] = {}


def register_op(kind: str, rule: OpRule) -> None:
    OPS[kind] = rule


@dataclass
class TapeNode:
    kind: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    extras: dict = field(default_factory=dict)
    recompute: bool = False


@dataclass
class _Leaf:
    requires_grad: bool
    metered: bool
    tag: str
    shape: tuple
    dtype: DType


class Tape:
    """Ordered op record plus value table.

    ``save=False`` records for a forward-only pass (checkpoint segments): no
    tensors are retained for backward. ``cast`` forces every registered leaf
    to one dtype, which is how oracle evaluations in FP64 reuse model code.
    """

    def __init__(self, trace=None, save: bool = True, cast: DType | None = None):
        self.nodes: list[TapeNode] = []
        self.values: dict[int, Tensor] = {}
        self.leaves: dict[int, _Leaf] = {}
        self.requires_grad: dict[int, bool] = {}
        self.producer: dict[int, int] = {}
        self.trace = trace
        self.save = save
        self.cast = cast
        self.closed = False
        self._order: list[tuple[str, int]] = []
        self._next_id = 0
        self._savers: dict[int, list[int]] = {}

    def _new_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, t: Tensor, requires_grad: bool = False, meter: bool = False, tag: str = "act") -> int:
        """Register an externally owned tensor.

        ``meter=True`` makes the tape account for (and eventually free) it;
        parameters and segment boundaries are left to their owner.
        """
        if self.closed:
            raise GraphError("tape forward already closed")
        if self.cast is not None:
            t = t.astype(self.cast)
        i = self._new_id()
        self.values[i] = t
        self.leaves[i] = _Leaf(requires_grad, meter, tag, t.shape, t.dtype)
        self.requires_grad[i] = requires_grad
        self._order.append(("leaf", i))
        return i

    def value(self, i: int) -> Tensor:
        try:
            return self.values[i]
        except KeyError:
            raise GraphError(f"value {i} is not live on this tape") from None

    def __len__(self):
        return len(self.nodes)

    # ------------------------------------------------------------ liveness

    def close_forward(self, keep=()) -> None:
        """End the forward pass; drop dead values and emit forward memory events."""
        if self.closed:
            return
        self.closed = True
        keep = set(keep)
        last_use: dict[int, int] = {}
        for idx, node in enumerate(self.nodes):
            for i in node.inputs:
                last_use[i] = idx
        savers: dict[int, list[int]] = {}
        if self.save:
            for idx, node in enumerate(self.nodes):
                rule = OPS[node.kind]
                for pos in rule.saves_inputs:
                    savers.setdefault(node.inputs[pos], []).append(idx)
                if rule.saves_output:
                    savers.setdefault(node.output, []).append(idx)
        else:
            for node in self.nodes:
                node.recompute = True
                node.extras = {}
        self._savers = savers

        def owned(i):
            leaf = self.leaves.get(i)
            return leaf is None or leaf.metered

        def dead(i):
            return owned(i) and i not in keep and i not in savers

        frees_after: dict[int, list[int]] = {}
        for kind, i in self._order:
            if not dead(i):
                continue
            at = last_use.get(i)
            if at is None:
                at = self.producer.get(i, -1)
            frees_after.setdefault(at, []).append(i)

        tr = self.trace
        node_idx = 0
        for kind, i in self._order:
            if kind == "leaf":
                if tr is not None and self.leaves[i].metered:
                    tr.alloc(self.values[i].bytes, self.leaves[i].tag)
                continue
            if tr is not None:
                tr.alloc(self.values[i].bytes, OPS[self.nodes[node_idx].kind].out_tag)
                for t in self.nodes[node_idx].extras.values():
                    tr.alloc(t.bytes, "stats")
                for j in frees_after.get(node_idx, []):
                    tr.free(self.values[j].bytes, self._tag_of(j))
            node_idx += 1
        # metered leaves that nothing consumes or keeps
        if tr is not None:
            for j in frees_after.get(-1, []):
                tr.free(self.values[j].bytes, self._tag_of(j))
        for ids in frees_after.values():
            for j in ids:
                del self.values[j]

    def _tag_of(self, i: int) -> str:
        leaf = self.leaves.get(i)
        if leaf is not None:
            return leaf.tag
        return OPS[self.nodes[self.producer[i]].kind].out_tag

    def release(self, i: int) -> None:
        """Free a kept value the caller no longer needs."""
        t = self.values.pop(i, None)
        if t is not None and self.trace is not None and (i not in self.leaves or self.leaves[i].metered):
            self.trace.free(t.bytes, self._tag_of(i))


def record(tape: Tape, kind: str, inputs, **attrs) -> int:
    """Run op ``kind`` on tape values ``inputs`` and append it; returns the output id."""
    if tape.closed:
        raise GraphError("cannot record on a tape whose forward pass is closed")
    rule = OPS.get(kind)
    if rule is None:
        raise GraphError(f"unknown op {kind!r}")
    inputs = tuple(inputs)
    if len(inputs) != rule.arity:
        raise GraphError(f"{kind} takes {rule.arity} inputs, got {len(inputs)}")
    for i in inputs:
        if i not in tape.values:
            raise GraphError(f"unknown input id {i} for {kind}")
    xs = [tape.values[i] for i in inputs]
    out, extras = rule.forward(xs, attrs)
    oid = tape._new_id()
    tape.values[oid] = out
    tape.requires_grad[oid] = any(tape.requires_grad[i] for i in inputs)
    tape.producer[oid] = len(tape.nodes)
    tape.nodes.append(TapeNode(kind, inputs, oid, attrs, extras if tape.save else {}))
    tape._order.append(("node", oid))
    return oid


def _accumulate(grads: dict, i: int, g: Tensor) -> bool:
    """Add ``g`` into ``grads[i]``; True when a new buffer was created."""
    prev = grads.get(i)
    if prev is None:
        grads[i] = g
        return True
    grads[i] = from_compute(prev.widen() + g.widen(), prev.dtype)
    return False


def backward(tape: Tape, out_id: int, seed: Tensor | None = None, init: dict[int, Tensor] | None = None,
             adopt_seed: bool = False) -> dict[int, Tensor]:
    """Gradients of ``out_id`` with respect to every grad-requiring leaf.

    Without ``seed`` the output must be a scalar loss. Leaves the loss does not
    reach get zero gradients. Gradient accumulation follows reverse tape order.
    ``init`` holds running leaf gradients to accumulate into (already metered);
    ``adopt_seed`` means the seed's buffer is already on the trace.
    """
    out = tape.value(out_id)
    if seed is None:
        if out.numel != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {out.shape}")
        seed = Tensor(np.ones(out.shape), out.dtype)
    elif seed.shape != out.shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {out.shape}")
    tape.close_forward(keep=(out_id,))
    tr = tape.trace
    savers = tape._savers

    def tag_for_grad(i):
        leaf = tape.leaves.get(i)
        if leaf is not None and leaf.tag == "param":
            return "wgrad"
        return "grad"

    grads: dict[int, Tensor] = dict(init or {})
    grads[out_id] = seed
    if tr is not None and not adopt_seed:
        tr.alloc(seed.bytes, tag_for_grad(out_id))
    if out_id not in savers and out_id not in tape.leaves:
        tape.release(out_id)

    # the node index after which each saved value is no longer needed
    free_at: dict[int, list[int]] = {}
    for i, idxs in savers.items():
        free_at.setdefault(min(idxs), []).append(i)

    for idx in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[idx]
        rule = OPS[node.kind]
        g = grads.get(node.output)
        needs = tuple(tape.requires_grad[i] for i in node.inputs)
        if g is not None and any(needs):
            saved_in = {pos: tape.values[node.inputs[pos]] for pos in rule.saves_inputs}
            saved_out = tape.values[node.output] if rule.saves_output else None
            in_grads = rule.backward(g, saved_in, saved_out, node.extras, node.attrs, needs)
            for i, need, gi in zip(node.inputs, needs, in_grads):
                if need and gi is not None:
                    if _accumulate(grads, i, gi) and tr is not None:
                        tr.alloc(gi.bytes, tag_for_grad(i))
        if g is not None and node.output not in tape.leaves:
            del grads[node.output]
            if tr is not None:
                tr.free(g.bytes, "grad")
        for i in free_at.get(idx, []):
            tape.release(i)
        if tr is not None:
            for t in node.extras.values():
                tr.free(t.bytes, "stats")
        node.extras = {}

    result = {}
    for i, leaf in tape.leaves.items():
        if leaf.requires_grad:
            g = grads.get(i)
            if g is None:
                g = Tensor(np.zeros(leaf.shape), leaf.dtype)
            result[i] = g
    return result


# ------------------------------------------------------------------ op rules


def _w(t: Tensor) -> np.ndarray:
    return t.widen()


def _out(arr, like: Tensor) -> Tensor:
    return from_compute(arr, like.dtype)


def _same(xs):
    dt = xs[0].dtype
    for x in xs[1:]:
        if x.dtype is not dt:
            raise ShapeError(f"dtype mismatch: {dt.value} vs {x.dtype.value}")
        if x.shape != xs[0].shape:
            raise ShapeError(f"shape mismatch: {xs[0].shape} vs {x.shape}")


def _add_fwd(xs, attrs):
    _same(xs)
    return _out(_w(xs[0]) + _w(xs[1]), xs[0]), {}


def _add_bwd(g, saved, out, extras, attrs, needs):
    return [g, g]


def _sub_fwd(xs, attrs):
    _same(xs)
    return _out(_w(xs[0]) - _w(xs[1]), xs[0]), {}


def _sub_bwd(g, saved, out, extras, attrs, needs):
    return [g, _out(-_w(g), g)]


def _mul_fwd(xs, attrs):
    _same(xs)
    return _out(_w(xs[0]) * _w(xs[1]), xs[0]), {}


def _mul_bwd(g, saved, out, extras, attrs, needs):
    gw = _w(g)
    a, b = saved[0], saved[1]
    return [_out(gw * _w(b), a) if needs[0] else None, _out(gw * _w(a), b) if needs[1] else None]


def _relu_fwd(xs, attrs):
    x = _w(xs[0])
    return _out(np.maximum(x, x.dtype.type(0)), xs[0]), {}


def _relu_bwd(g, saved, out, extras, attrs, needs):
    x = _w(saved[0])
    # subgradient at 0 is the negative branch: 0
    return [_out(np.where(x > 0, _w(g), x.dtype.type(0)), g)]


def _leaky_fwd(xs, attrs):
    return _out(leaky_relu_array(_w(xs[0]), attrs.get("slope", 0.01)), xs[0]), {}


def _leaky_bwd(g, saved, out, extras, attrs, needs):
    x = _w(saved[0])
    gw = _w(g)
    # subgradient at 0 is the negative branch: slope
    return [_out(np.where(x > 0, gw, gw * x.dtype.type(attrs.get("slope", 0.01))), g)]


def _exp_fwd(xs, attrs):
    return _out(np.exp(_w(xs[0])), xs[0]), {}


def _exp_bwd(g, saved, out, extras, attrs, needs):
    return [_out(_w(g) * _w(out), g)]


def _scale_fwd(xs, attrs):
    x = _w(xs[0])
    return _out(x * x.dtype.type(attrs["factor"]), xs[0]), {}


def _scale_bwd(g, saved, out, extras, attrs, needs):
    gw = _w(g)
    return [_out(gw * gw.dtype.type(attrs["factor"]), g)]


def _matmul_fwd(xs, attrs):
    a, b = xs
    if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    if a.dtype is not b.dtype:
        raise ShapeError("matmul dtype mismatch")
    return _out(kernels.matmul(_w(a), _w(b)), a), {}


def _matmul_bwd(g, saved, out, extras, attrs, needs):
    a, b = saved[0], saved[1]
    gw = _w(g)
    da = _out(kernels.matmul(gw, np.ascontiguousarray(_w(b).T)), a) if needs[0] else None
    db = _out(kernels.matmul(np.ascontiguousarray(_w(a).T), gw), b) if needs[1] else None
    return [da, db]


def _linear_fwd(xs, attrs):
    x, w = xs
    if len(w.shape) != 2:
        raise ShapeError(f"linear weight must be rank 2, got {w.shape}")
    x2 = _w(x).reshape(x.shape[0], -1)
    if x2.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: {x2.shape[1]} input features vs weight {w.shape}")
    if x.dtype is not w.dtype:
        raise ShapeError("linear dtype mismatch")
    return _out(kernels.matmul(x2, _w(w)), x), {}


def _linear_bwd(g, saved, out, extras, attrs, needs):
    x, w = saved[0], saved[1]
    gw = _w(g)
    dx = dw = None
    if needs[0]:
        dx = _out(kernels.matmul(gw, np.ascontiguousarray(_w(w).T)).reshape(x.shape), x)
    if needs[1]:
        x2 = _w(x).reshape(x.shape[0], -1)
        dw = _out(kernels.matmul(np.ascontiguousarray(x2.T), gw), w)
    return [dx, dw]


def _conv_fwd(xs, attrs):
    from deskdp.tensor import conv2d

    return conv2d(xs[0], xs[1], attrs.get("stride", 1), attrs.get("pad", 0)), {}


def _conv_bwd(g, saved, out, extras, attrs, needs):
    x, k = saved[0], saved[1]
    stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
    gw = _w(g)
    dx = dk = None
    if needs[0]:
        dx = _out(kernels.conv2d_grad_input(gw, _w(k), x.shape, stride, pad), x)
    if needs[1]:
        dk = _out(kernels.conv2d_grad_weight(gw, _w(x), k.shape, stride, pad), k)
    return [dx, dk]


def _axes(attrs, rank):
    from deskdp.tensor import _norm_axes

    return _norm_axes(attrs.get("axes"), rank)


def _sum_fwd(xs, attrs):
    x = _w(xs[0])
    attrs["in_shape"] = xs[0].shape
    return _out(np.asarray(np.sum(x, axis=_axes(attrs, x.ndim)), dtype=x.dtype), xs[0]), {}


def _expand(g: np.ndarray, in_shape, axes):
    g = np.expand_dims(g, axes) if axes else g
    return np.broadcast_to(g, in_shape)


def _sum_bwd(g, saved, out, extras, attrs, needs):
    shape = attrs["in_shape"]
    return [_out(_expand(_w(g), shape, _axes(attrs, len(shape))), g)]


def _mean_fwd(xs, attrs):
    x = _w(xs[0])
    attrs["in_shape"] = xs[0].shape
    return _out(np.asarray(np.mean(x, axis=_axes(attrs, x.ndim)), dtype=x.dtype), xs[0]), {}


def _mean_bwd(g, saved, out, extras, attrs, needs):
    shape = attrs["in_shape"]
    axes = _axes(attrs, len(shape))
    count = int(np.prod([shape[a] for a in axes])) if axes else 1
    gw = _w(g)
    return [_out(_expand(gw / gw.dtype.type(count), shape, axes), g)]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.sum(np.exp(s), axis=1, keepdims=True))


def _xent_fwd(xs, attrs):
    (logits,) = xs
    if len(logits.shape) != 2:
        raise ShapeError(f"softmax_xent expects [N, classes], got {logits.shape}")
    labels = np.asarray(attrs["labels"])
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels shape {labels.shape} vs logits {logits.shape}")
    loss_dtype = FP64 if logits.dtype is FP64 else FP32
    z = logits.data.astype(loss_dtype.compute)
    lsm = _log_softmax(z)
    denom = attrs.get("denom", logits.shape[0])
    loss = -np.sum(lsm[np.arange(len(labels)), labels]) / z.dtype.type(denom)
    return from_compute(np.asarray(loss, dtype=z.dtype), loss_dtype), {}


def _xent_bwd(g, saved, out, extras, attrs, needs):
    logits = saved[0]
    z = logits.data.astype(g.dtype.compute)
    p = np.exp(_log_softmax(z))
    labels = np.asarray(attrs["labels"])
    p[np.arange(len(labels)), labels] -= 1
    denom = attrs.get("denom", logits.shape[0])
    dz = p * (g.data.astype(z.dtype).reshape(()) / z.dtype.type(denom))
    return [from_compute(dz, logits.dtype)]


register_op("add", OpRule(_add_fwd, _add_bwd, arity=2))
register_op("sub", OpRule(_sub_fwd, _sub_bwd, arity=2))
register_op("mul", OpRule(_mul_fwd, _mul_bwd, saves_inputs=(0, 1), arity=2))
register_op("relu", OpRule(_relu_fwd, _relu_bwd, saves_inputs=(0,)))
register_op("leaky_relu", OpRule(_leaky_fwd, _leaky_bwd, saves_inputs=(0,)))
register_op("exp", OpRule(_exp_fwd, _exp_bwd, saves_output=True))
register_op("scale", OpRule(_scale_fwd, _scale_bwd))
register_op("matmul", OpRule(_matmul_fwd, _matmul_bwd, saves_inputs=(0, 1), arity=2))
register_op("linear", OpRule(_linear_fwd, _linear_bwd, saves_inputs=(0, 1), arity=2))
register_op("conv2d", OpRule(_conv_fwd, _conv_bwd, saves_inputs=(0, 1), arity=2))
register_op("sum", OpRule(_sum_fwd, _sum_bwd))
register_op("mean", OpRule(_mean_fwd, _mean_bwd))
# losses are FP32 in every precision mode, so they get their own meter tag
register_op("softmax_xent", OpRule(_xent_fwd, _xent_bwd, saves_inputs=(0,), out_tag="loss"))
register_op("loss_scale", OpRule(_scale_fwd, _scale_bwd, out_tag="loss"))


# ------------------------------------------------------------ gradient check


def finite_diff_check(f: Callable[[Tape, int], int], x: Tensor, eps: float = 1e-3) -> float:
    """Max over elements of |analytic - central difference| / max(1, |analytic|).

    ``f(tape, x_id)`` must record a scalar-valued function of ``x``. The
    analytic gradient is taken at ``x``'s own precision; the central
    differences are evaluated on FP64 tapes so they are not swamped by
    rounding in the function value.
    """
    tape = Tape()
    xid = tape.leaf(x, requires_grad=True)
    loss = f(tape, xid)
    analytic = backward(tape, loss)[xid].data.astype(np.float64)

    base = x.data.astype(np.float64)

    def evaluate(arr):
        t = Tape(cast=FP64)
        i = t.leaf(Tensor(arr, FP64))
        return t.value(f(t, i)).item()

    fd = np.empty(base.size)
    flat = base.reshape(-1)
    for k in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[k] += eps
        minus[k] -= eps
        fd[k] = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * eps)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - fd) / np.maximum(1.0, np.abs(a)))) if a.size else 0.0
