"""Guidance-modality attention networks for face identification, with a
self-contained numpy autodiff engine, synthetic RGB-D data, and an
evaluation/ablation harness."""

from .tensor import Tape, Tensor
from .model import Model, ModelConfig, full_scale_config, toy_config

__all__ = ["Tape", "Tensor", "Model", "ModelConfig", "full_scale_config", "toy_config"]
__version__ = "0.1.0"
