"""Bone segmentation and pixel-count volumetry for synthetic µCT phantoms.

Pure numpy/scipy: a small U-Net with hand-written forward and backward
passes, Adam, a deterministic phantom data pipeline over 16-bit PGM files,
and volume calibration from pixel counts against a reference segmentation.
"""

__version__ = "0.1.0"

from .data import (
    DatasetSplit,
    PhantomSpec,
    downscale,
    downscale_mask,
    encode_one_hot,
    generate_phantom,
    image_to_tensor,
    load_manifest,
    make_dataset,
    read_mask,
    read_pgm,
    split_dataset,
    write_pgm,
)
from .layers import (
    ConvSpec,
    categorical_cross_entropy,
    conv2d_backward,
    conv2d_forward,
    conv2d_forward_naive,
    gradient_check,
    maxpool2_backward,
    maxpool2_forward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    softmax_channel,
    softmax_channel_backward,
    tconv2_backward,
    tconv2_forward,
)
from .metrics import (
    VolumetryReport,
    calibrate_volume,
    confusion,
    count_class_pixels,
    dice,
    pixel_accuracy,
    read_reference,
    write_report,
)
from .optim import AdamState, adam_step, init_adam
from .tensor import argmax_channel
from .train import RunConfig, TrainingResult, parse_config, run_training
from .unet import (
    UNetConfig,
    backward,
    build,
    forward,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)

__all__ = [
    "AdamState",
    "ConvSpec",
    "DatasetSplit",
    "PhantomSpec",
    "RunConfig",
    "TrainingResult",
    "UNetConfig",
    "VolumetryReport",
    "adam_step",
    "argmax_channel",
    "backward",
    "build",
    "calibrate_volume",
    "categorical_cross_entropy",
    "confusion",
    "conv2d_backward",
    "conv2d_forward",
    "conv2d_forward_naive",
    "count_class_pixels",
    "dice",
    "downscale",
    "downscale_mask",
    "encode_one_hot",
    "forward",
    "generate_phantom",
    "gradient_check",
    "image_to_tensor",
    "init_adam",
    "load_checkpoint",
    "load_manifest",
    "make_dataset",
    "maxpool2_backward",
    "maxpool2_forward",
    "parameter_count",
    "parse_config",
    "pixel_accuracy",
    "read_mask",
    "read_pgm",
    "read_reference",
    "relu",
    "relu_backward",
    "run_training",
    "save_checkpoint",
    "sigmoid",
    "sigmoid_backward",
    "softmax_channel",
    "softmax_channel_backward",
    "split_dataset",
    "tconv2_backward",
    "tconv2_forward",
    "write_pgm",
    "write_report",
]
