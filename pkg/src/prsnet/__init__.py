"""Masked-reconstruction pretraining and centroid-triplet person re-identification on a numpy autodiff core."""

from .model import ModelConfig, ModelParams, build_model, decode, encode, merge_model, reconstruct
from .tensor import NumericError, ShapeError, Tensor, default_dtype

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "ModelParams",
    "NumericError",
    "ShapeError",
    "Tensor",
    "build_model",
    "decode",
    "default_dtype",
    "encode",
    "merge_model",
    "reconstruct",
]
