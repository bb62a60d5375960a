"""Scalable image coding toolkit: a learned base layer for dense prediction
plus conditional, residual, or standalone enhancement layers for
reconstruction, with exact entropy coding and rate-distortion analysis."""

from .config import Settings, load_settings, parse_settings
from .errors import (
    ContractError,
    DivergenceError,
    FormatError,
    ScalcodecError,
    StreamError,
)
from .metrics import RDCurve, RDPoint, bd_rate, utilization
from .pipelines import (
    ENHANCEMENT_MODES,
    BasePipeline,
    EnhancementPipeline,
    PipelineConfig,
    decode_scalable,
    encode_scalable,
    measure_rd,
    quantized_base_latents,
)
from .training import TrainSchedule, train

__version__ = "0.1.0"

__all__ = [
    "BasePipeline",
    "ContractError",
    "DivergenceError",
    "ENHANCEMENT_MODES",
    "EnhancementPipeline",
    "FormatError",
    "PipelineConfig",
    "RDCurve",
    "RDPoint",
    "ScalcodecError",
    "Settings",
    "StreamError",
    "TrainSchedule",
    "bd_rate",
    "decode_scalable",
    "encode_scalable",
    "load_settings",
    "measure_rd",
    "parse_settings",
    "quantized_base_latents",
    "train",
    "utilization",
    "__version__",
]
