"""Variable-precision block floating point numerics and accelerator simulation."""

from __future__ import annotations

from .errors import (
    BfpError,
    Divergence,
    ExponentOverflow,
    GroupSizeMismatch,
    MalformedImage,
    NonFiniteInput,
    OddMantissaWidth,
    OutOfRangeIndex,
    ShapeMismatch,
)
from .fmac import bfp_dot, chunk, chunked_dot, pass_count, reconstruct
from .numerics import (
    NEAREST,
    STOCHASTIC,
    TRUNCATE,
    BfpGroup,
    BfpTensor,
    FpScalar,
    RoundingMode,
    dequantize_group,
    quantize_group,
    quantize_tensor,
)
from .precision import PrecisionSetting, ThresholdParams, relative_improvement, select_precision, threshold
from .storage import pack_group, storage_bits, unpack_group
from .systolic import ArrayConfig, CostModelParams, CostReport, SystolicArray, SystolicJob, run_forward, run_grad_a, run_grad_w

__version__ = "0.1.0"

__all__ = [
    "ArrayConfig",
    "BfpError",
    "BfpGroup",
    "BfpTensor",
    "CostModelParams",
    "CostReport",
    "Divergence",
    "ExponentOverflow",
    "FpScalar",
    "GroupSizeMismatch",
    "MalformedImage",
    "NEAREST",
    "NonFiniteInput",
    "OddMantissaWidth",
    "OutOfRangeIndex",
    "PrecisionSetting",
    "RoundingMode",
    "STOCHASTIC",
    "ShapeMismatch",
    "SystolicArray",
    "SystolicJob",
    "TRUNCATE",
    "ThresholdParams",
    "bfp_dot",
    "chunk",
    "chunked_dot",
    "dequantize_group",
    "pack_group",
    "pass_count",
    "quantize_group",
    "quantize_tensor",
    "reconstruct",
    "relative_improvement",
    "run_forward",
    "run_grad_a",
    "run_grad_w",
    "select_precision",
    "storage_bits",
    "threshold",
    "unpack_group",
]
