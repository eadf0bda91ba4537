"""From-scratch residual U-Net brain-tumor segmentation toolkit.

Dense tensor math with reverse-mode autodiff, the enhanced encoder-decoder
segmentation model (channel attention + atrous spatial pyramid pooling),
Dice/HD95 evaluation metrics, geometric augmentation, synthetic data
generation, and a deterministic training pipeline with a CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, tensor, backward, no_grad, Adam
from .convops import conv2d, conv2d_transpose, global_avg_pool, global_max_pool
from .model import (ModelConfig, NamedParams, init_params, model_forward,
                    channel_attention, aspp, residual_block)
from .metrics import dice, hd95, edt, extract_boundary, evaluate_regions, MetricsReport
from .augment import AugConfig, AffineTransform, sample_transform, apply_transform
from .data import (Sample, RegionMaskSet, DatasetSplit, generate_synthetic_dataset,
                   split_dataset, batch_iter, write_tensor_file, read_tensor_file,
                   save_checkpoint, load_checkpoint)
from .pipeline import (TrainConfig, TrainHistory, bce_loss, soft_dice_loss,
                       train, evaluate, ablate, gradcheck)

__all__ = [
    "Tensor", "tensor", "backward", "no_grad", "Adam",
    "conv2d", "conv2d_transpose", "global_avg_pool", "global_max_pool",
    "ModelConfig", "NamedParams", "init_params", "model_forward",
    "channel_attention", "aspp", "residual_block",
    "dice", "hd95", "edt", "extract_boundary", "evaluate_regions", "MetricsReport",
    "AugConfig", "AffineTransform", "sample_transform", "apply_transform",
    "Sample", "RegionMaskSet", "DatasetSplit", "generate_synthetic_dataset",
    "split_dataset", "batch_iter", "write_tensor_file", "read_tensor_file",
    "save_checkpoint", "load_checkpoint",
    "TrainConfig", "TrainHistory", "bce_loss", "soft_dice_loss",
    "train", "evaluate", "ablate", "gradcheck",
]
