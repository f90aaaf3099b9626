"""Desk-scale data-parallel training toolkit: emulated mixed precision,
synchronized BN, memory-saving backward, collectives and box post-processing."""

from deskdp import autograd, memopt, postproc, precision, syncbn  # noqa: F401  (registers tape ops)
from deskdp._accel import backend_name
from deskdp.tensor import FP16, FP32, DType, Tensor, tensor_create

__version__ = "0.1.0"

__all__ = ["DType", "FP16", "FP32", "Tensor", "tensor_create", "backend_name", "__version__"]
