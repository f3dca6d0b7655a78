"""Mixed-precision post-training quantization for a small NumPy vision transformer."""

import json
from importlib import resources

from .allocation import AllocationState, LayerEntry, greedy_allocate, selection_score
from .container import load_model, save_model
from .errors import (
    AllocationError,
    DimensionError,
    EncodingError,
    FitError,
    PipelineError,
    QuantInputError,
    UnknownSiteError,
)
from .gelu_quant import RegionQuantizer, compute_m0, compute_m1, fit_s0, region_decode, region_encode
from .pipeline import PipelineConfig, emit_report, make_token_data, run_calibration, run_mptq
from .quant import QuantSpec, dequantize, fake_quantize, minmax_scale, quantize, sqnr_db
from .redistribution import RedistParams, apply_redistribution, compute_redist_params, fuse
from .tensor import ToyViT, forward, forward_with_taps, init_toy_vit, quantizable_sites

__version__ = "0.1.0"


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package: ``"plan"`` or ``"report"``."""
    text = resources.files(__package__).joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


__all__ = [
    "AllocationError",
    "AllocationState",
    "DimensionError",
    "EncodingError",
    "FitError",
    "LayerEntry",
    "PipelineConfig",
    "PipelineError",
    "QuantInputError",
    "QuantSpec",
    "RedistParams",
    "RegionQuantizer",
    "ToyViT",
    "UnknownSiteError",
    "apply_redistribution",
    "compute_m0",
    "compute_m1",
    "compute_redist_params",
    "dequantize",
    "emit_report",
    "fake_quantize",
    "fit_s0",
    "forward",
    "forward_with_taps",
    "fuse",
    "greedy_allocate",
    "init_toy_vit",
    "load_model",
    "load_schema",
    "make_token_data",
    "minmax_scale",
    "quantizable_sites",
    "quantize",
    "region_decode",
    "region_encode",
    "run_calibration",
    "run_mptq",
    "save_model",
    "selection_score",
    "sqnr_db",
]
