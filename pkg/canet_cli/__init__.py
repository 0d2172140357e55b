"""CANet Restoration CLI
=====================

Image restoration (denoising, JPEG artifact reduction) with an
attention-based convolutional network, built on a small numpy autodiff.

Modules:
    - errors: exception hierarchy
    - tensor: 4-D tensors, tape-based reverse-mode autodiff, gradient checking
    - nn: parameters, initialization, L2 loss, Adam
    - attention: pixel/channel attention, A-layer, A-block
    - canet: full network, ablation switches, checkpoints, tiled restoration
    - imaging: PPM/PGM I/O, AWGN, baseline JPEG round trip, patches
    - metrics: PSNR, SSIM, metric reports
    - trainer: training/evaluation loops, overfit and ablation protocols
    - main: CLI entry point

Example usage:
    from canet_cli import ModelConfig, init_params, canet_forward
    from canet_cli import read_ppm, jpeg_degrade, psnr, ssim
    from canet_cli import TrainConfig, train, evaluate
"""

__version__ = "1.0.0"

from .canet import (
    Checkpoint,
    ModelConfig,
    canet_forward,
    load_checkpoint,
    param_count,
    read_checkpoint,
    restore_image,
    save_checkpoint,
)
from .imaging import DegradationTask, ImageBuffer, add_awgn, jpeg_degrade, read_ppm, write_ppm
from .metrics import MetricReport, psnr, ssim
from .nn import AdamConfig, Parameter, ParameterSet, adam_step, init_params, l2_loss
from .tensor import Graph, Tensor, backward, double_precision, finite_diff_check
from .trainer import TrainConfig, TrainLog, evaluate, train

__all__ = [
    "Checkpoint",
    "ModelConfig",
    "canet_forward",
    "load_checkpoint",
    "param_count",
    "read_checkpoint",
    "restore_image",
    "save_checkpoint",
    "DegradationTask",
    "ImageBuffer",
    "add_awgn",
    "jpeg_degrade",
    "read_ppm",
    "write_ppm",
    "MetricReport",
    "psnr",
    "ssim",
    "AdamConfig",
    "Parameter",
    "ParameterSet",
    "adam_step",
    "init_params",
    "l2_loss",
    "Graph",
    "Tensor",
    "backward",
    "double_precision",
    "finite_diff_check",
    "TrainConfig",
    "TrainLog",
    "evaluate",
    "train",
]
