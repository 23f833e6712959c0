"""Camera-image RSSI estimation with multi-view Vision Transformers, on numpy."""
from . import analysis, dataset, encoder, io, metrics, models, rssi, scene, tensor, training
from .analysis import cost_report, count_flops, count_params
from .models import ModelSpec, forward, init_params, preset
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "analysis", "dataset", "encoder", "io", "metrics", "models", "rssi", "scene", "tensor", "training",
    "ModelSpec", "Tensor", "cost_report", "count_flops", "count_params", "forward", "init_params", "preset",
]
