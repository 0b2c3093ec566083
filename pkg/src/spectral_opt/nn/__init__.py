"""Small MLP testbed: blob data, manual backprop, training and sweeps."""

from .data import BlobSpec, Dataset, make_blobs
from .model import (
    MLP,
    Activation,
    Layer,
    PreNorm,
    finite_difference_grads,
    forward_backward,
    frobnorm,
    init_mlp,
    lambda_max_probe,
    standardize,
)
from .training import TrainConfig, TrainTrace, milestone_epochs, train
