"""splatskin: articulated 3D Gaussian splatting on the CPU.

A canonical-space Gaussian cloud is skinned onto a posed skeleton with
linear blend skinning, rasterized by a differentiable software renderer,
and optimized with KL-guided density control.
"""

from .density import DensifyConfig, densify_step, init_from_template
from .gaussians import Gaussian3D, GaussianCloud, build_covariance, \
    kl_divergence, kl_divergence_fast
from .kinematics import Pose, SkinnedTemplate, blend_transforms, \
    forward_kinematics, forward_kinematics_matrices, lbs_transform_gaussian
from .losses import LossWeights, psnr, ssim, total_loss
from .nets import DeformNets, cache_inference_artifacts, refine_pose
from .rasterizer import Camera, render, render_backward
from .sceneio import Checkpoint, load_checkpoint, load_dataset, \
    save_checkpoint
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .trainer import TrainConfig, evaluate, render_from_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Camera", "Checkpoint", "DeformNets", "DensifyConfig", "Gaussian3D",
    "GaussianCloud", "LossWeights", "Pose", "SkinnedTemplate",
    "SyntheticSceneSpec", "TrainConfig", "blend_transforms",
    "build_covariance", "cache_inference_artifacts", "densify_step",
    "evaluate", "forward_kinematics", "forward_kinematics_matrices",
    "generate_synthetic", "init_from_template", "kl_divergence",
    "kl_divergence_fast", "lbs_transform_gaussian", "load_checkpoint",
    "load_dataset", "psnr", "refine_pose", "render", "render_backward",
    "render_from_checkpoint", "save_checkpoint", "ssim", "total_loss",
    "train",
]
