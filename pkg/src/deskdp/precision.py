"""Mixed precision: binary16 conversion, loss scaling and FP32 master weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from deskdp.errors import ContractError, ParameterError
from deskdp.tensor import FP16, FP32, Tensor

DEFAULT_INIT_SCALE = 2.0 ** 16
DEFAULT_GROWTH_INTERVAL = 2000
DEFAULT_GROWTH = 2.0
DEFAULT_BACKOFF = 0.5
DEFAULT_MIN_SCALE = 1.0
DEFAULT_MAX_SCALE = 2.0 ** 24


def to_half(x: Tensor) -> Tensor:
    """IEEE-754 binary16 with round-to-nearest-even; overflow goes to inf, subnormals survive."""
    return Tensor(x.data, FP16)


def _is_pow2(v: float) -> bool:
    m, _ = math.frexp(v)
    return v > 0 and m == 0.5


@dataclass(frozen=True)
class LossScaleState:
    scale: float = DEFAULT_INIT_SCALE
    good_steps: int = 0
    mode: str = "dynamic"
    growth_interval: int = DEFAULT_GROWTH_INTERVAL
    growth_factor: float = DEFAULT_GROWTH
    backoff_factor: float = DEFAULT_BACKOFF
    min_scale: float = DEFAULT_MIN_SCALE
    max_scale: float = DEFAULT_MAX_SCALE

    def __post_init__(self):
        if self.mode not in ("static", "dynamic"):
            raise ParameterError(f"loss scale mode must be static or dynamic, got {self.mode!r}")
        for name in ("scale", "min_scale", "max_scale"):
            if not _is_pow2(getattr(self, name)):
                raise ParameterError(f"{name} must be a positive power of two, got {getattr(self, name)}")
        if not self.min_scale <= self.scale <= self.max_scale:
            raise ParameterError(f"scale {self.scale} outside [{self.min_scale}, {self.max_scale}]")
        if self.growth_interval < 1 or self.good_steps < 0:
            raise ParameterError("growth_interval must be >= 1 and good_steps >= 0")
        if not (_is_pow2(self.growth_factor) and self.growth_factor >= 1):
            raise ParameterError("growth_factor must be a power of two >= 1")
        if not (_is_pow2(self.backoff_factor) and self.backoff_factor <= 1):
            raise ParameterError("backoff_factor must be a power of two <= 1")


def scale_loss(loss: Tensor, state: LossScaleState) -> Tensor:
    return Tensor(loss.widen() * loss.dtype.compute.type(state.scale), loss.dtype)


def unscale_and_check(grads: dict, state: LossScaleState) -> tuple[dict, bool]:
    """FP32 ``grads / scale`` plus whether any raw element was inf or nan."""
    overflow = False
    out = {}
    inv = np.float32(1.0 / state.scale)  # exact: scale is a power of two
    for k, g in grads.items():
        raw = g.data
        if not np.all(np.isfinite(raw)):
            overflow = True
        out[k] = Tensor(raw.astype(np.float32) * inv, FP32)
    return out, overflow


def update_scale(state: LossScaleState, overflow: bool) -> LossScaleState:
    if state.mode == "static":
        return state
    if overflow:
        return replace(state, scale=max(state.min_scale, state.scale * state.backoff_factor), good_steps=0)
    good = state.good_steps + 1
    if good >= state.growth_interval:
        return replace(state, scale=min(state.max_scale, state.scale * state.growth_factor), good_steps=0)
    return replace(state, good_steps=good)


@dataclass
class MasterWeights:
    """FP32 parameters, their forward-pass shadows and SGD momentum buffers.

    In ``fp32`` mode the shadow is the master itself.
    """

    master: dict[str, Tensor]
    shadow: dict[str, Tensor]
    velocity: dict[str, Tensor]
    half: bool = True

    @classmethod
    def create(cls, params: dict[str, Tensor], half: bool = True) -> "MasterWeights":
        master = {k: Tensor(v.data, FP32) for k, v in params.items()}
        velocity = {k: Tensor(np.zeros(v.shape, np.float32), FP32) for k, v in master.items()}
        mw = cls(master, {}, velocity, half)
        mw.refresh()
        return mw

    def refresh(self) -> None:
        self.shadow = {k: to_half(v) if self.half else v for k, v in self.master.items()}


def sgd_step_master(mw: MasterWeights, grads: dict[str, Tensor], lr: float, momentum: float = 0.0,
                    skip: bool = False) -> MasterWeights:
    """``v <- momentum * v + g``; ``w <- w - lr * v`` in FP32, then shadows refreshed."""
    if skip:
        return mw
    missing = set(mw.master) - set(grads)
    if missing:
        raise ContractError(f"no gradient for parameters {sorted(missing)}")
    lr32, mom32 = np.float32(lr), np.float32(momentum)
    for k, w in mw.master.items():
        g = grads[k].data.astype(np.float32)
        v = (mom32 * mw.velocity[k].data + g).astype(np.float32)
        mw.velocity[k] = Tensor(v, FP32)
        mw.master[k] = Tensor((w.data - lr32 * v).astype(np.float32), FP32)
    mw.refresh()
    return mw
