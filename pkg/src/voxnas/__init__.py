"""Beam search over 3D voxel CNN architectures grown by function-preserving morphisms."""

from .dataset import LabeledDataset, VoxelGrid, generate_synthetic, load_dataset, save_dataset, split
from .morph import deepen_top, make_mapping, widen_top
from .net import (
    Architecture,
    LayerSpec,
    ParamSet,
    forward,
    init_params,
    initial_architecture,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .search import BeamConfig, BeamSearch, SearchState, run_search
from .trainer import TrainConfig, derive_seed, evaluate_accuracy, train

__version__ = "0.1.0"
