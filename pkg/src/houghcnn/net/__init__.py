"""Patch-classification CNN engine (2D / 2.5D / 3D)."""

from .arch import ARCH_NAMES, ArchError, ArchSpec, Conv, Dense, Pool, parse_arch, receptive_field
from .io import WeightFileError, load_weights, save_weights
from .network import Network, init_msra
from .train import (
    SGD,
    EpochLog,
    TrainConfig,
    TrainingDiverged,
    loss_softmax_xent,
    sgd_step,
    softmax,
    train,
)
