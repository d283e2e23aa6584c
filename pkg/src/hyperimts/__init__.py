"""Non-padding hypergraph forecaster for irregular multivariate time series."""

from .data import Dataset, Observation, Sample, SplitSample, dataset_stats, load_dataset, synth_generate
from .hypergraph import Hypergraph, SharedIndex, build, shared_index
from .model import ABLATIONS, ModelConfig, ModelParams, forward
from .tensor import Tensor
from .training import RunRecord, TrainConfig, train

__all__ = [
    "ABLATIONS",
    "Dataset",
    "Hypergraph",
    "ModelConfig",
    "ModelParams",
    "Observation",
    "RunRecord",
    "Sample",
    "SharedIndex",
    "SplitSample",
    "Tensor",
    "TrainConfig",
    "build",
    "dataset_stats",
    "forward",
    "load_dataset",
    "shared_index",
    "synth_generate",
    "train",
]
