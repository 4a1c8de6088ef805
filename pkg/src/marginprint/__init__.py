"""Fingerprinting classifiers with analytically placed near-boundary inputs."""
from .datagen import Dataset, gen_blobs, gen_two_moons, load_csv, split, standardize, write_csv
from .errors import (
    BoundarySearchError,
    ConfigurationError,
    FormatVersionError,
    ParseError,
    ShapeError,
    TrainingError,
)
from .estimators import DenseClassifier, Fingerprinter
from .fingerprint import Fingerprint, FingerprintSet, GenConfig, generate
from .modelops import AttackSpec, ModelPool, apply_attack, build_pool
from .nn import Model, ModelSpec, TrainConfig, init_model, train
from .verify import auc, decide, evaluate, matching_rate

__version__ = "0.1.0"

__all__ = [
    "AttackSpec", "BoundarySearchError", "ConfigurationError", "Dataset", "DenseClassifier",
    "Fingerprint", "FingerprintSet", "Fingerprinter", "FormatVersionError", "GenConfig", "Model",
    "ModelPool", "ModelSpec", "ParseError", "ShapeError", "TrainConfig", "TrainingError",
    "apply_attack", "auc", "build_pool", "decide", "evaluate", "gen_blobs", "gen_two_moons",
    "generate", "init_model", "load_csv", "matching_rate", "split", "standardize", "train",
    "write_csv",
]
