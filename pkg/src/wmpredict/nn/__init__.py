from .gradcheck import GradCheckError, GradCheckReport, check_gradients, grad_check
from .layers import (
    BatchNorm,
    Conv1D,
    Conv2D,
    Dropout,
    Flatten,
    Layer,
    Linear,
    ReLU,
    Sequential,
    conv1d,
    conv2d,
    derive_seed,
    flatten,
    linear,
    make_rng,
    relu,
)
from .losses import cross_entropy_loss, mse_loss, softmax
from .optim import sgd_step, step_decay
from .serialize import read_tensors, write_tensors

__all__ = [
    "BatchNorm",
    "Conv1D",
    "Conv2D",
    "Dropout",
    "Flatten",
    "GradCheckError",
    "GradCheckReport",
    "Layer",
    "Linear",
    "ReLU",
    "Sequential",
    "check_gradients",
    "conv1d",
    "conv2d",
    "cross_entropy_loss",
    "derive_seed",
    "flatten",
    "grad_check",
    "linear",
    "make_rng",
    "mse_loss",
    "read_tensors",
    "relu",
    "sgd_step",
    "softmax",
    "step_decay",
    "write_tensors",
]
