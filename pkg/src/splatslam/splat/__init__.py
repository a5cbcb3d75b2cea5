from .gaussians import Gaussian2D, GaussianStore, STATUS_UNSTABLE, STATUS_STABLE
from .rasterizer import (RasterConfig, RenderContext, RenderOutput, splat_weight,
                         rasterize_forward, rasterize_backward_full,
                         rasterize_backward_sampled, per_gaussian_stats,
                         StaleContextError)
from .losses import LossWeights, LossResult, compute_loss, ssim_map, normals_from_depth
from .export import export_render_pngs

__all__ = [
    "Gaussian2D", "GaussianStore", "STATUS_UNSTABLE", "STATUS_STABLE",
    "RasterConfig", "RenderContext", "RenderOutput", "splat_weight",
    "rasterize_forward", "rasterize_backward_full", "rasterize_backward_sampled",
    "per_gaussian_stats", "StaleContextError",
    "LossWeights", "LossResult", "compute_loss", "ssim_map", "normals_from_depth",
    "export_render_pngs",
]
