"""disoutlab: feature-map-distortion regularization laboratory.

A small numpy-based neural-network lab implementing the disout
regularizer (learned feature-map distortions guided by an empirical
Rademacher complexity surrogate) next to dropout and DropBlock
baselines, with hand-written backprop, gradient-check oracles, and a
training/verification CLI.
"""

from .data import (
    AugmentConfig,
    BatchIterator,
    Dataset,
    augment,
    load_cifar10_bin,
    load_idx,
    load_mnist,
    save_idx,
    split_dataset,
    synthetic_blobs,
    synthetic_digits,
)
from .disout import (
    DistortionConfig,
    DistortionState,
    apply_distortion,
    approx_grad_conv,
    approx_grad_fc,
    erc_surrogate_conv,
    erc_surrogate_fc,
    exact_grad_conv,
    exact_grad_fc,
    init_distortion,
    ramp_p,
    sample_block_mask,
    sample_element_mask,
    sample_rademacher,
    update_distortion,
)
from .errors import ConfigError, FormatError, NumericError, TrainingDiverged
from .fdcheck import run_backprop_suite, run_conv_suite, run_fc_suite
from .nn import (
    Network,
    attachment_plans,
    backward,
    build_preset,
    forward,
    infer_shapes,
    init_network,
    sgd_step,
    softmax_crossentropy,
)
from .tensor import conv2d, conv2d_transpose, im2col, maxpool2d
from .train import (
    DataConfig,
    RngStreams,
    TrainConfig,
    TrainResult,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig", "BatchIterator", "Dataset", "augment",
    "load_cifar10_bin", "load_idx", "load_mnist", "save_idx",
    "split_dataset", "synthetic_blobs", "synthetic_digits",
    "DistortionConfig", "DistortionState", "apply_distortion",
    "approx_grad_conv", "approx_grad_fc", "erc_surrogate_conv",
    "erc_surrogate_fc", "exact_grad_conv", "exact_grad_fc",
    "init_distortion", "ramp_p", "sample_block_mask",
    "sample_element_mask", "sample_rademacher", "update_distortion",
    "ConfigError", "FormatError", "NumericError", "TrainingDiverged",
    "run_backprop_suite", "run_conv_suite", "run_fc_suite",
    "Network", "attachment_plans", "backward", "build_preset", "forward",
    "infer_shapes", "init_network", "sgd_step", "softmax_crossentropy",
    "conv2d", "conv2d_transpose", "im2col", "maxpool2d",
    "DataConfig", "RngStreams", "TrainConfig", "TrainResult", "evaluate",
    "load_checkpoint", "save_checkpoint", "train",
]
