"""The reference CNN, built as a chain of single-op layers.

    conv 3x3 -> (IABN | BN + leaky_relu) -> conv 3x3 -> BN + relu
    -> flatten -> fc(hidden) -> relu -> fc(classes) -> softmax cross-entropy

Convolutions keep the spatial size (pad 1). There are no bias terms: each
conv feeds a BN shift and the classifier does not need one. Optional
``pad_layers`` are identity leaky_relu layers (slope 1) after the second BN
block, used to deepen the chain for checkpointing benchmarks.
"""

from __future__ import annotations

import numpy as np

from deskdp.autograd import record
from deskdp.config import ModelConfig
from deskdp.memopt import Layer
from deskdp.tensor import FP32, Tensor


def init_params(mc: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 0x5EED])
    c, s = mc.in_channels, mc.image_size

    def he(shape, fan_in, gain=2.0):
        return Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape), FP32)

    return {
        "conv1.w": he((mc.conv1, c, 3, 3), c * 9),
        "bn1.gamma": Tensor(np.ones(mc.conv1), FP32),
        "bn1.beta": Tensor(np.zeros(mc.conv1), FP32),
        "conv2.w": he((mc.conv2, mc.conv1, 3, 3), mc.conv1 * 9),
        "bn2.gamma": Tensor(np.ones(mc.conv2), FP32),
        "bn2.beta": Tensor(np.zeros(mc.conv2), FP32),
        "fc1.w": he((mc.conv2 * s * s, mc.hidden), mc.conv2 * s * s),
        "fc2.w": he((mc.hidden, mc.classes), mc.hidden, gain=1.0),
    }


def base_depth(bn_mode: str) -> int:
    return 8 if bn_mode == "iabn" else 9


def build_chain(mc: ModelConfig, params: dict[str, Tensor], bn_mode: str = "plain", group=None,
                eps: float = 1e-5) -> list[Layer]:
    """Layers reading ``params`` (FP32 or FP16 shadows). ``group`` synchronizes BN for sync/iabn."""
    bn_group = group if bn_mode in ("sync", "iabn") else None
    slope = mc.leaky_slope

    def op(kind, names=(), **attrs):
        def fn(tape, x, p):
            return record(tape, kind, [x, *(p[n] for n in names)], **attrs)

        fn.__name__ = kind
        return Layer(fn, {n: params[n] for n in names}, name=f"{kind}:{','.join(names)}" if names else kind)

    layers = [op("conv2d", ("conv1.w",), pad=1)]
    if bn_mode == "iabn":
        layers.append(op("iabn", ("bn1.gamma", "bn1.beta"), eps=eps, slope=slope, group=bn_group))
    else:
        layers.append(op("batchnorm", ("bn1.gamma", "bn1.beta"), eps=eps, group=bn_group))
        layers.append(op("leaky_relu", slope=slope))
    layers += [
        op("conv2d", ("conv2.w",), pad=1),
        op("batchnorm", ("bn2.gamma", "bn2.beta"), eps=eps, group=bn_group),
        op("relu"),
    ]
    layers += [op("leaky_relu", slope=1.0) for _ in range(mc.pad_layers)]
    layers += [op("linear", ("fc1.w",)), op("relu"), op("linear", ("fc2.w",))]
    return layers
