"""Batch normalization with statistics reduced across a worker group.

Per channel each rank contributes ``(sum, sum of squares, count)``; one
all-reduce of ``2C + 1`` values turns those into global statistics, so K
workers holding b samples each normalize exactly like one worker holding the
concatenated K*b batch. Backward all-reduces ``sum(dy)`` and
``sum(dy * xhat)`` the same way. With ``group=None`` (or a group of one) this
is plain batch norm.

All statistics are FP32 whatever the activation dtype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from deskdp.autograd import OpRule, register_op
from deskdp.errors import CollectiveError, ContractError, DegenerateBatchError
from deskdp.tensor import FP32, FP64, Tensor, from_compute

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1


@dataclass(frozen=True)
class BNStats:
    sum: np.ndarray
    sumsq: np.ndarray
    count: float

    @property
    def mean(self) -> np.ndarray:
        return self.sum / self.sum.dtype.type(self.count)

    @property
    def var(self) -> np.ndarray:
        """Biased variance E[x^2] - E[x]^2, clamped at 0 against cancellation."""
        m = self.mean
        v = self.sumsq / self.sum.dtype.type(self.count) - m * m
        return np.maximum(v, self.sum.dtype.type(0))

    def invstd(self, eps: float) -> np.ndarray:
        return (1 / np.sqrt(self.var + self.sum.dtype.type(eps))).astype(self.sum.dtype)


@dataclass(frozen=True)
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM

    @classmethod
    def initial(cls, channels: int, momentum: float = DEFAULT_MOMENTUM) -> "RunningStats":
        return cls(np.zeros(channels, np.float32), np.ones(channels, np.float32), momentum)


@dataclass(frozen=True)
class BNSaved:
    x: Tensor
    stats: BNStats
    mean: np.ndarray
    invstd: np.ndarray
    membership: tuple | None


def _reduce_axes(ndim: int) -> tuple[int, ...]:
    if ndim < 2:
        raise ContractError(f"batch norm needs at least [N, C], got rank {ndim}")
    return (0,) + tuple(range(2, ndim))


def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def _acc_dtype(t: Tensor):
    return np.float64 if t.dtype is FP64 else np.float32


def _allreduce(vec: np.ndarray, group, what: str) -> np.ndarray:
    if group is None or group.size == 1:
        return vec
    dtype = FP64 if vec.dtype == np.float64 else FP32
    try:
        return group.allreduce(Tensor(vec, dtype)).data
    except CollectiveError as exc:
        raise ContractError(f"{what}: workers disagree on channel count ({exc})") from exc


def gather_stats(x: Tensor, group=None) -> BNStats:
    """Group-wide per-channel (sum, sumsq, count).

    Sums are accumulated and all-reduced in float64 whatever the input
    precision: E[x^2] - E[x]^2 cancels badly in float32 once the mean is
    large relative to the spread.
    """
    xw = x.data.astype(np.float64)
    axes = _reduce_axes(xw.ndim)
    c = xw.shape[1]
    count = xw.size // c
    packed = np.concatenate([np.sum(xw, axis=axes), np.sum(xw * xw, axis=axes), np.asarray([count], xw.dtype)])
    packed = _allreduce(packed, group, "syncbn forward")
    total = float(packed[2 * c])
    if total < 2:
        raise DegenerateBatchError(f"batch norm needs >= 2 values per channel, got {total:g}")
    return BNStats(packed[:c].copy(), packed[c : 2 * c].copy(), total)


def syncbn_forward(x_local: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_EPS, group=None):
    """Normalize with group-wide statistics. Returns ``(y_local, saved)``."""
    stats = gather_stats(x_local, group)
    acc = _acc_dtype(x_local)
    mean = stats.mean.astype(acc)
    invstd = stats.invstd(eps).astype(acc)
    xw = x_local.data.astype(acc)
    nd = xw.ndim
    xhat = (xw - _channel_view(mean, nd)) * _channel_view(invstd, nd)
    y = _channel_view(gamma.data.astype(mean.dtype), nd) * xhat + _channel_view(beta.data.astype(mean.dtype), nd)
    saved = BNSaved(x_local, stats, mean, invstd, group.membership if group is not None else None)
    return from_compute(y, x_local.dtype), saved


def bn_backward_core(dy: np.ndarray, xhat: np.ndarray, gamma: np.ndarray, invstd: np.ndarray, count: float, group=None,
                     local_param_grads: bool = False):
    """Shared BN backward given normalized inputs; returns float arrays ``dx, dgamma, dbeta``.

    ``dx`` always uses the group-wide sums. ``dgamma``/``dbeta`` are the
    group totals, or with ``local_param_grads`` this rank's share, which is
    what a trainer that all-reduces parameter gradients afterwards needs.
    """
    nd = dy.ndim
    axes = _reduce_axes(nd)
    c = dy.shape[1]
    # float64 accumulation, as for the forward statistics
    local = np.concatenate([np.sum(dy, axis=axes, dtype=np.float64), np.sum(dy * xhat, axis=axes, dtype=np.float64)])
    packed = _allreduce(local, group, "syncbn backward").astype(dy.dtype)
    local = local.astype(dy.dtype)
    dbeta, dgamma = packed[:c].copy(), packed[c:].copy()
    m = dy.dtype.type(count)
    scale = _channel_view(gamma * invstd / m, nd)
    dx = scale * (m * dy - _channel_view(dbeta, nd) - xhat * _channel_view(dgamma, nd))
    if local_param_grads:
        return dx, local[c:].copy(), local[:c].copy()
    return dx, dgamma, dbeta


def syncbn_backward(dy_local: Tensor, saved: BNSaved, gamma: Tensor, group=None, local_param_grads: bool = False):
    """``(dx_local, dgamma, dbeta)``; dgamma and dbeta are the same on every rank
    unless ``local_param_grads`` asks for this rank's share."""
    if saved is None:
        raise ContractError("syncbn backward called without saved forward state")
    now = group.membership if group is not None else None
    if now != saved.membership:
        raise ContractError("group membership changed between syncbn forward and backward")
    acc = saved.mean.dtype
    xw = saved.x.data.astype(acc)
    nd = xw.ndim
    xhat = (xw - _channel_view(saved.mean, nd)) * _channel_view(saved.invstd, nd)
    dx, dgamma, dbeta = bn_backward_core(dy_local.data.astype(acc), xhat, gamma.data.astype(acc),
                                         saved.invstd, saved.stats.count, group, local_param_grads)
    return (from_compute(dx, dy_local.dtype), from_compute(dgamma, gamma.dtype), from_compute(dbeta, gamma.dtype))


def update_running_stats(running: RunningStats, stats: BNStats) -> RunningStats:
    """``running <- (1 - m) running + m batch``, with the unbiased batch variance."""
    if stats.count <= 1:
        log.warning("running stats update skipped: batch count %g <= 1", stats.count)
        return running
    m = np.float32(running.momentum)
    n = stats.count
    batch_var = (stats.var * np.float32(n / (n - 1))).astype(np.float32)
    mean = ((1 - m) * running.mean + m * stats.mean.astype(np.float32)).astype(np.float32)
    var = ((1 - m) * running.var + m * batch_var).astype(np.float32)
    return replace(running, mean=mean, var=var)


# ---------------------------------------------------------------- tape op


def _bn_fwd(xs, attrs):
    x, gamma, beta = xs
    y, saved = syncbn_forward(x, gamma, beta, attrs.get("eps", DEFAULT_EPS), attrs.get("group"))
    attrs["count"] = saved.stats.count
    attrs["membership"] = saved.membership
    attrs["stats"] = saved.stats
    return y, {"mean": Tensor._wrap(saved.mean, FP64 if saved.mean.dtype == np.float64 else FP32),
               "invstd": Tensor._wrap(saved.invstd, FP64 if saved.invstd.dtype == np.float64 else FP32)}


def _bn_bwd(g, saved, out, extras, attrs, needs):
    x, gamma = saved[0], saved[1]
    mean, invstd = extras["mean"].data, extras["invstd"].data
    bn_saved = BNSaved(x, attrs["stats"], mean, invstd, attrs["membership"])
    # parameter gradients stay per-rank: the trainer sums them with everything else
    dx, dgamma, dbeta = syncbn_backward(g, bn_saved, gamma, attrs.get("group"), local_param_grads=True)
    return [dx if needs[0] else None, dgamma if needs[1] else None, dbeta if needs[2] else None]


register_op("batchnorm", OpRule(_bn_fwd, _bn_bwd, saves_inputs=(0, 1), arity=3))
