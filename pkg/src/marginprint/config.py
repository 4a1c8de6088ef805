"""Run configuration: parsing, validation and seed derivation.

Configuration files are YAML (JSON is accepted too). A single global seed is
expanded into per-stage seeds by hashing ``"<global seed>/<stage name>"``
with SHA-256 and keeping the first four bytes (big-endian). Pool members get
``pool_offset + seed_start + j`` so each pool occupies a contiguous seed block.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .datagen import gen_blobs, gen_two_moons, load_csv, split, standardize
from .errors import ConfigurationError, FormatVersionError
from .fingerprint import GenConfig
from .modelops import AttackSpec
from .nn import ModelSpec, TrainConfig, make_rng

CONFIG_FORMAT_VERSION = 1


def derive_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def _train_cfg(doc: Optional[dict], base: Optional[TrainConfig] = None) -> TrainConfig:
    base = base or TrainConfig()
    doc = dict(doc or {})
    try:
        return dataclasses.replace(base, **doc)
    except TypeError as exc:
        raise ConfigurationError(f"bad train settings: {exc}") from None


@dataclass
class RunConfig:
    seed: int = 0
    dataset: dict = field(default_factory=dict)
    protected: dict = field(default_factory=dict)
    pools: dict = field(default_factory=dict)
    fingerprint: GenConfig = field(default_factory=GenConfig)
    theta: Optional[float] = None
    accuracy_tolerance: float = 0.10
    anchor_split: str = "train"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("configuration must be a mapping")
        doc = dict(doc)
        if doc.pop("format_version", None) != CONFIG_FORMAT_VERSION:
            raise FormatVersionError(f"configuration needs format_version: {CONFIG_FORMAT_VERSION}")
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            gen = GenConfig(**(doc.get("fingerprint") or {}))
        except TypeError as exc:
            raise ConfigurationError(f"bad fingerprint settings: {exc}") from None
        theta = doc.get("theta")
        if theta is not None and not 0 <= theta <= 1:
            raise ConfigurationError(f"theta must lie in [0, 1], got {theta}")
        cfg = cls(
            seed=int(doc.get("seed", 0)),
            dataset=dict(doc.get("dataset") or {}),
            protected=dict(doc.get("protected") or {}),
            pools=dict(doc.get("pools") or {}),
            fingerprint=gen,
            theta=theta,
            accuracy_tolerance=float(doc.get("accuracy_tolerance", 0.10)),
            anchor_split=doc.get("anchor_split", "train"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed: Optional[int] = None) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
        cfg = cls.from_dict(doc)
        if seed is not None:
            cfg.seed = int(seed)
        return cfg

    def validate(self):
        if self.anchor_split not in ("train", "test"):
            raise ConfigurationError(f"anchor_split must be 'train' or 'test', got {self.anchor_split!r}")
        if self.dataset.get("kind", "two_moons") not in ("two_moons", "blobs", "csv"):
            raise ConfigurationError(f"unknown dataset kind {self.dataset.get('kind')!r}")
        self.protected_spec(input_dim=2, n_classes=2)
        for role in ("pirated_surrogate", "independent_surrogate", "pirated_test", "independent_test"):
            if role in self.pools:
                self.pool_specs(role, input_dim=2, n_classes=2)
        # member seeds must keep surrogate and test blocks apart
        ranges = {}
        for role in self.pools:
            seeds = [self._member_seed(role, e, j) for j, e in enumerate(self._expanded(role))]
            if seeds:
                ranges[role] = (min(seeds), max(seeds))
        for a, ra in ranges.items():
            for b, rb in ranges.items():
                if a < b and a.split("_")[1] != b.split("_")[1] and ra[0] <= rb[1] and rb[0] <= ra[1]:
                    raise ConfigurationError(f"seed range {ra} of {a} overlaps {rb} of {b}")

    # -- dataset --------------------------------------------------------------

    def load_dataset(self, base_dir: Path = Path(".")):
        """Return ``(train, test)`` following the dataset section."""
        d = dict(self.dataset)
        kind = d.pop("kind", "two_moons")
        train_fraction = float(d.pop("train_fraction", 0.75))
        do_standardize = bool(d.pop("standardize", True))
        seed = derive_seed(self.seed, "data")
        try:
            if kind == "two_moons":
                data = gen_two_moons(
                    int(d.pop("n_per_class", 300)), float(d.pop("noise", 0.1)), seed,
                    ambient_dim=int(d.pop("ambient_dim", 2)), ambient_noise=float(d.pop("ambient_noise", 0.0)),
                )
            elif kind == "blobs":
                if "centers" in d:
                    centers = np.asarray(d.pop("centers"), dtype=np.float64)
                else:
                    k, dim, spread = int(d.pop("n_classes", 3)), int(d.pop("dim", 2)), float(d.pop("spread", 5.0))
                    centers = make_rng(derive_seed(self.seed, "centers")).standard_normal((k, dim)) * spread
                data = gen_blobs(int(d.pop("n_per_class", 200)), centers, float(d.pop("stddev", 1.0)), seed)
            else:
                path = Path(d.pop("path"))
                if not path.is_absolute():
                    path = base_dir / path
                if not path.exists():
                    raise ConfigurationError(f"dataset file {path} does not exist")
                data = load_csv(path, has_header=bool(d.pop("has_header", False)))
        except KeyError as exc:
            raise ConfigurationError(f"dataset section misses {exc}") from None
        if d:
            raise ConfigurationError(f"unknown dataset keys: {sorted(d)}")
        train, test = split(data, train_fraction, derive_seed(self.seed, "split"))
        if do_standardize:
            train = standardize(train)
            test = standardize(test, train.mean, train.std)
        return train, test

    # -- models -------------------------------------------------------------------

    def protected_spec(self, input_dim: int, n_classes: int):
        p = self.protected
        spec = ModelSpec(
            (input_dim, *p.get("hidden", [32, 32]), n_classes),
            p.get("activation", "tanh"),
            derive_seed(self.seed, "protected"),
        )
        cfg = _train_cfg(p.get("train"), TrainConfig(seed=derive_seed(self.seed, "protected-train")))
        return spec, cfg

    def _expanded(self, role: str) -> list:
        section = self.pools.get(role) or {}
        key = "attacks" if role.startswith("pirated") else "models"
        out = []
        for entry in section.get(key, []):
            entry = dict(entry)
            for _ in range(int(entry.pop("repeat", 1))):
                out.append(entry)
        return out

    def _member_seed(self, role: str, entry: dict, j: int) -> int:
        if "seed" in entry:
            return int(entry["seed"])
        section = self.pools.get(role) or {}
        return derive_seed(self.seed, "pools") + int(section.get("seed_start", 0)) + j

    def pool_specs(self, role: str, input_dim: int, n_classes: int) -> list:
        """Expand a pool section into AttackSpecs or (ModelSpec, TrainConfig) pairs."""
        _, base_train = self.protected_spec(input_dim, n_classes)
        specs = []
        for j, entry in enumerate(self._expanded(role)):
            entry = dict(entry)
            seed = self._member_seed(role, entry, j)
            entry.pop("seed", None)
            train = _train_cfg(entry.pop("train", None), base_train)
            hidden = entry.pop("hidden", None)
            activation = entry.pop("activation", "tanh")
            if role.startswith("pirated"):
                student = entry.pop("student", None)
                student_spec = None
                if student is not None:
                    student_spec = ModelSpec((input_dim, *student.get("hidden", [32, 32]), n_classes),
                                             student.get("activation", "tanh"))
                try:
                    specs.append(AttackSpec(seed=seed, train_cfg=train, student_spec=student_spec, **entry))
                except TypeError as exc:
                    raise ConfigurationError(f"bad attack entry in {role}: {exc}") from None
            else:
                if entry:
                    raise ConfigurationError(f"unknown keys in {role} entry: {sorted(entry)}")
                spec = ModelSpec((input_dim, *(hidden or [32, 32]), n_classes), activation, seed)
                specs.append((spec, train))
        if not specs and role in self.pools:
            raise ConfigurationError(f"pool {role} is empty")
        return specs
