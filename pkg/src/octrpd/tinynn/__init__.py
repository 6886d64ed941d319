"""Minimal numpy neural-network engine (double precision, CPU only)."""

from .gradcheck import GradCheckReport, grad_check, layer_suite, linear_probe
from .layers import (
    BatchNorm, Conv, Dense, GlobalAvgPool, GlobalMaxPool, Layer, MaxPool, ReLU, Sequential, Softmax,
    UNetCore, Upsample,
)
from .net import (
    AdamConfig, MiniNet, NonFiniteError, backward, build_classifier3d, build_sequential,
    build_unet2d, cross_entropy, cross_entropy_grad, from_arch, load_checkpoint,
    save_checkpoint, softmax, validate_structure,
)

__all__ = [
    "AdamConfig", "BatchNorm", "Conv", "Dense", "GlobalAvgPool", "GlobalMaxPool", "GradCheckReport", "Layer",
    "MaxPool", "MiniNet", "NonFiniteError", "ReLU", "Sequential", "Softmax", "UNetCore",
    "Upsample", "backward", "build_classifier3d", "build_sequential", "build_unet2d",
    "cross_entropy", "cross_entropy_grad", "from_arch", "grad_check", "layer_suite",
    "linear_probe", "load_checkpoint",
    "save_checkpoint", "softmax", "validate_structure",
]
