"""Texture-aware and geometry-validated densification for 3D Gaussian splatting."""

from .core import (CameraView, GaussianSplat, InvalidParameterError, Scene, SplatSet,
                   build_covariance, eval_sh)
from .geosplit import (AdcConfig, adc_step, depth_ratio, guide_position, sample_children,
                       vdrc_child, vdrc_parent)
from .rasterizer import Gradients, RenderOutput, render, render_backward
from .scene_io import export_ply, import_ply, parse_colmap
from .texture import adaptive_threshold, gradient_map, texture_weight, weighted_contribution
from .trainer import TrainConfig, compute_loss, psnr, ssim, train

__version__ = "0.1.0"

__all__ = [
    "CameraView", "GaussianSplat", "InvalidParameterError", "Scene", "SplatSet",
    "build_covariance", "eval_sh", "AdcConfig", "adc_step", "depth_ratio", "guide_position",
    "sample_children", "vdrc_child", "vdrc_parent", "Gradients", "RenderOutput", "render",
    "render_backward", "export_ply", "import_ply", "parse_colmap", "adaptive_threshold",
    "gradient_map", "texture_weight", "weighted_contribution", "TrainConfig", "compute_loss",
    "psnr", "ssim", "train",
]
