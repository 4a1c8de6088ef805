"""Synthetic datasets, CSV ingestion and train/test splitting."""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, FormatVersionError, ParseError
from .nn import make_rng

DATASET_META_VERSION = 1


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    soft_labels: Optional[np.ndarray] = None
    name: str = "dataset"
    n_classes: Optional[int] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.inputs) == 0:
            raise ConfigurationError("a dataset needs at least one sample")
        if len(self.labels) != len(self.inputs):
            raise ConfigurationError("inputs and labels differ in length")
        if not np.all(np.isfinite(self.inputs)):
            raise ConfigurationError("dataset inputs must be finite")
        if self.n_classes is None:
            self.n_classes = max(2, int(self.labels.max()) + 1)
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ConfigurationError("labels fall outside [0, K)")
        if self.soft_labels is not None:
            self.soft_labels = np.asarray(self.soft_labels, dtype=np.float64)
            if len(self.soft_labels) != len(self.inputs):
                raise ConfigurationError("soft_labels must have one row per sample")

    def __len__(self):
        return len(self.inputs)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Dataset":
        return dataclasses.replace(
            self,
            inputs=self.inputs[idx],
            labels=self.labels[idx],
            soft_labels=None if self.soft_labels is None else self.soft_labels[idx],
        )

    def with_soft_labels(self, soft) -> "Dataset":
        return dataclasses.replace(self, soft_labels=np.asarray(soft, dtype=np.float64))

    def metadata(self) -> dict:
        return {
            "format_version": DATASET_META_VERSION,
            "name": self.name,
            "d": int(self.dim),
            "K": int(self.n_classes),
            "normalization": None if self.mean is None else {
                "mean": self.mean.tolist(),
                "std": self.std.tolist(),
            },
        }


def gen_blobs(n_per_class: int, centers, stddev: float, seed: int, name: str = "blobs") -> Dataset:
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if len(centers) < 2:
        raise ConfigurationError("gen_blobs needs at least 2 centers")
    if n_per_class <= 0 or not stddev > 0:
        raise ConfigurationError("n_per_class and stddev must be positive")
    rng = make_rng(seed)
    k, d = centers.shape
    noise = rng.standard_normal((k, n_per_class, d)) * stddev
    X = (centers[:, None, :] + noise).reshape(k * n_per_class, d)
    y = np.repeat(np.arange(k), n_per_class)
    return Dataset(X, y, name=name, n_classes=k)


def gen_two_moons(n_per_class: int, noise_stddev: float, seed: int, name: str = "two_moons",
                  ambient_dim: int = 2, ambient_noise: float = 0.0) -> Dataset:
    """Two interleaved unit half-circles; the lower one is flipped and offset by (1, 0.5).

    With ``ambient_dim > 2`` the moons plane is embedded in a random 2-D
    subspace of ``R^ambient_dim`` (drawn from ``seed``) and isotropic noise of
    scale ``ambient_noise`` is added in every direction.
    """
    if n_per_class <= 0 or noise_stddev < 0 or ambient_noise < 0:
        raise ConfigurationError("n_per_class must be positive and noise non-negative")
    if ambient_dim < 2:
        raise ConfigurationError("ambient_dim must be at least 2")
    rng = make_rng(seed)
    t = np.linspace(0.0, np.pi, n_per_class)
    upper = np.column_stack([np.cos(t), np.sin(t)])
    lower = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
    X = np.vstack([upper, lower])
    if noise_stddev > 0:
        X = X + rng.standard_normal(X.shape) * noise_stddev
    if ambient_dim > 2:
        basis, _ = np.linalg.qr(rng.standard_normal((ambient_dim, 2)))
        X = X @ basis.T
        if ambient_noise > 0:
            X = X + rng.standard_normal(X.shape) * ambient_noise
    y = np.repeat([0, 1], n_per_class)
    return Dataset(X, y, name=name, n_classes=2)


def standardize(data: Dataset, mean=None, std=None) -> Dataset:
    """Per-feature zero mean / unit variance; statistics travel with the dataset.

    Pass ``mean``/``std`` to reuse statistics fitted on another split.
    """
    if mean is None:
        mean = data.inputs.mean(axis=0)
        std = data.inputs.std(axis=0)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.where(np.asarray(std, dtype=np.float64) > 0, std, 1.0)
    return dataclasses.replace(data, inputs=(data.inputs - mean) / std, mean=mean, std=std)


def split(data: Dataset, fraction: float, seed: int):
    if not 0 < fraction < 1:
        raise ConfigurationError(f"split fraction must be in (0, 1), got {fraction}")
    n_first = int(round(fraction * len(data)))
    if n_first == 0 or n_first == len(data):
        raise ConfigurationError("split leaves one side empty")
    order = make_rng(seed).permutation(len(data))
    return data.subset(order[:n_first]), data.subset(order[n_first:])


def load_csv(path, has_header: bool = False, name: Optional[str] = None) -> Dataset:
    """Rows are feature columns followed by one integer label column."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if has_header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise ParseError("need at least one feature and a label", line=lineno)
            elif len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", line=lineno)
            try:
                rows.append([float(c) for c in row[:-1]])
                label = float(row[-1])
            except ValueError as exc:
                raise ParseError(f"non-numeric cell ({exc})", line=lineno) from None
            if label != int(label) or label < 0:
                raise ParseError(f"label {row[-1]!r} is not a class index", line=lineno)
            labels.append(int(label))
    if not rows:
        raise ParseError(f"{path} contains no data rows")
    X = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise ParseError("non-finite feature value")
    data = Dataset(X, np.array(labels), name=name or path.stem)
    meta_path = path.with_suffix(".meta.json")
    if meta_path.exists():
        data = _apply_metadata(data, json.loads(meta_path.read_text()))
    return data


def _apply_metadata(data: Dataset, meta: dict) -> Dataset:
    if meta.get("format_version") != DATASET_META_VERSION:
        raise FormatVersionError(f"unsupported dataset metadata version {meta.get('format_version')!r}")
    norm = meta.get("normalization")
    return dataclasses.replace(
        data,
        name=meta.get("name", data.name),
        n_classes=max(int(meta.get("K", data.n_classes)), data.n_classes),
        mean=None if norm is None else np.array(norm["mean"]),
        std=None if norm is None else np.array(norm["std"]),
    )


def write_csv(data: Dataset, path, header: bool = False):
    """Write features and labels with shortest round-trip float text, plus a metadata sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if header:
            writer.writerow([f"x{i}" for i in range(data.dim)] + ["label"])
        for x, y in zip(data.inputs, data.labels):
            writer.writerow([repr(float(v)) for v in x] + [int(y)])
    path.with_suffix(".meta.json").write_text(json.dumps(data.metadata(), indent=2, sort_keys=True) + "\n")
