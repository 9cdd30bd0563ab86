"""Orientation-aligned IMU domains and loss-driven domain weights for masked-reconstruction pretraining."""

from .errors import (
    ConfigError,
    ImuMixError,
    InputError,
    InvariantError,
    MissingArtifactError,
    NumericError,
    PlanError,
)
from .ingest import Domain, ImuWindow, LabelMap, RawRecording, read_dataset, resample, window
from .orient import MahonyConfig, align_domain, mahony_filter, mahony_update, quat_to_matrix, to_global
from .model import ModelConfig, ReconModel, TrainConfig, make_mask, train
from .simplex import DomainWeights
from .dro import DroConfig, excess_lambda, run_proxy, update_weights
from .mixture import MixturePlan, export, mixture_sizes, recombine

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ImuMixError", "InputError", "InvariantError", "MissingArtifactError", "NumericError",
    "PlanError", "Domain", "ImuWindow", "LabelMap", "RawRecording", "read_dataset", "resample", "window",
    "MahonyConfig", "align_domain", "mahony_filter", "mahony_update", "quat_to_matrix", "to_global",
    "ModelConfig", "ReconModel", "TrainConfig", "make_mask", "train", "DomainWeights", "DroConfig",
    "excess_lambda", "run_proxy", "update_weights", "MixturePlan", "export", "mixture_sizes", "recombine",
]
