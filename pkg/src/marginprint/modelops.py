"""Model-modification attacks and model-pool construction.

Pirated models are derived from a protected model by performance-preserving
modifications; independent models are trained from scratch on the same task.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datagen import Dataset
from .errors import ConfigurationError, FormatVersionError
from .nn import Model, ModelSpec, TrainConfig, init_model, input_gradient, make_rng, softmax, train

POOL_FORMAT_VERSION = 1

ATTACK_KINDS = (
    "finetune",
    "prune",
    "noise_finetune",
    "prune_finetune",
    "distill",
    "adversarial_train",
    "prune_distill",
)
POOL_ROLES = ("pirated_surrogate", "independent_surrogate", "pirated_test", "independent_test")

_PRUNING = {"prune", "prune_finetune", "prune_distill"}
_DISTILL = {"distill", "prune_distill"}


@dataclass(frozen=True)
class AttackSpec:
    kind: str
    seed: int = 0
    sparsity: Optional[float] = None
    noise_scale: float = 0.09
    student_spec: Optional[ModelSpec] = None
    temperature: float = 1.0
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    adv_eps_scale: float = 0.1
    kd_augment_copies: int = 0
    kd_jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if (self.sparsity is not None) != (self.kind in _PRUNING):
            raise ConfigurationError(f"sparsity is required exactly for pruning attacks ({self.kind})")
        if self.sparsity is not None and not 0 <= self.sparsity < 1:
            raise ConfigurationError(f"sparsity must lie in [0, 1), got {self.sparsity}")
        if (self.student_spec is not None) != (self.kind in _DISTILL):
            raise ConfigurationError(f"student_spec is required exactly for distillation attacks ({self.kind})")
        if self.kd_augment_copies < 0 or self.kd_jitter < 0:
            raise ConfigurationError("kd_augment_copies and kd_jitter must be non-negative")
        if self.noise_scale < 0 or not self.temperature > 0:
            raise ConfigurationError("noise_scale must be >= 0 and temperature > 0")

    def describe(self) -> str:
        parts = [f"attack={self.kind}"]
        if self.sparsity is not None:
            parts.append(f"sparsity={self.sparsity:g}")
        if self.kind == "noise_finetune":
            parts.append(f"noise={self.noise_scale:g}")
        if self.student_spec is not None:
            parts.append("student=" + "-".join(map(str, self.student_spec.layer_sizes)))
            if self.kd_augment_copies and self.kd_jitter:
                parts.append(f"jitter={self.kd_augment_copies}x{self.kd_jitter:g}")
        parts.append(f"seed={self.seed}")
        return ";".join(parts)


@dataclass
class ModelPool:
    models: list
    role: str

    def __post_init__(self):
        if self.role not in POOL_ROLES:
            raise ConfigurationError(f"unknown pool role {self.role!r}")
        if not self.models:
            raise ConfigurationError("a model pool cannot be empty")
        first = self.models[0]
        for m in self.models[1:]:
            if m.input_dim != first.input_dim or m.n_classes != first.n_classes:
                raise ConfigurationError("pool members disagree on input dimension or class count")

    def __len__(self):
        return len(self.models)

    def __iter__(self):
        return iter(self.models)

    @property
    def seeds(self) -> list:
        return [lineage_field(m.lineage, "seed", int) for m in self.models]

    @property
    def seed_range(self):
        seeds = [s for s in self.seeds if s is not None]
        return (min(seeds), max(seeds)) if seeds else None

    def stacked_logits(self, X) -> np.ndarray:
        """Logits of every member: shape ``(len(pool), n, K)``."""
        return np.stack([m.logits(X) for m in self.models])


def lineage_field(lineage: str, key: str, cast=str):
    for part in lineage.split(";"):
        k, _, v = part.partition("=")
        if k == key:
            return cast(v)
    return None


# -- individual attacks ---------------------------------------------------------


def prune_masks(model: Model, sparsity: float):
    """Masks zeroing the globally smallest-magnitude ``ceil(sparsity * n)`` weights.

    Ties go to the earlier weight in layer-then-row-major order. Biases are
    never pruned.
    """
    if not 0 <= sparsity < 1:
        raise ConfigurationError(f"sparsity must lie in [0, 1), got {sparsity}")
    flat = np.concatenate([np.abs(W).ravel() for W in model.weights])
    # round first so that e.g. 0.3 * 10 does not ceil to 4
    n_zero = math.ceil(round(sparsity * flat.size, 9))
    keep = np.ones(flat.size)
    keep[np.argsort(flat, kind="stable")[:n_zero]] = 0.0
    masks, offset = [], 0
    for W in model.weights:
        masks.append(keep[offset:offset + W.size].reshape(W.shape))
        offset += W.size
    return masks


def prune(model: Model, sparsity: float):
    masks = prune_masks(model, sparsity)
    return model.with_params([W * m for W, m in zip(model.weights, masks)], model.biases), masks


def add_parameter_noise(model: Model, scale: float, rng: np.random.Generator) -> Model:
    """``param += scale * std(param) * N(0, 1)`` for each weight and bias tensor."""
    weights = [W + scale * W.std() * rng.standard_normal(W.shape) for W in model.weights]
    biases = [b + scale * b.std() * rng.standard_normal(b.shape) for b in model.biases]
    return model.with_params(weights, biases)


def signed_gradient_examples(model: Model, data: Dataset, eps) -> np.ndarray:
    """One signed-gradient step of size ``eps`` (scalar or per-feature) up the cross-entropy."""
    S = model.logits(data.inputs)
    d = softmax(S)
    d[np.arange(len(d)), data.labels] -= 1.0
    grad = input_gradient(model, data.inputs, d)
    return data.inputs + np.asarray(eps) * np.sign(grad)


def jittered_transfer_set(data: Dataset, copies: int, jitter: float, rng: np.random.Generator) -> Dataset:
    """``data`` plus ``copies`` Gaussian-jittered replicas (per-feature scale ``jitter * std``)."""
    if copies == 0 or jitter == 0:
        return data
    scale = jitter * data.inputs.std(axis=0)
    extra = [data.inputs + scale * rng.standard_normal(data.inputs.shape) for _ in range(copies)]
    return Dataset(
        np.vstack([data.inputs] + extra),
        np.tile(data.labels, copies + 1),
        name=data.name + "+jitter",
        n_classes=data.n_classes,
    )


def distill(teacher: Model, student_spec: ModelSpec, data: Dataset, cfg: TrainConfig, temperature: float) -> Model:
    """Train a fresh ``student_spec`` on the teacher's logits over ``data`` (KL at ``temperature``)."""
    if student_spec.input_dim != teacher.input_dim or student_spec.n_classes != teacher.n_classes:
        raise ConfigurationError("student and teacher disagree on input dimension or class count")
    soft = data.with_soft_labels(teacher.logits(data.inputs))
    kd_cfg = dataclasses.replace(cfg, loss="soft_kl", temperature=temperature)
    return train(init_model(student_spec), soft, kd_cfg)


def apply_attack(protected: Model, data: Dataset, spec: AttackSpec, tag: str = "pirated_test") -> Model:
    """Derive a pirated model. ``spec.seed`` drives every random choice."""
    cfg = dataclasses.replace(spec.train_cfg, seed=spec.seed, loss="cross_entropy")
    rng = make_rng(spec.seed)
    kind = spec.kind
    if kind == "finetune":
        out = train(protected, data, cfg)
    elif kind == "prune":
        out, _ = prune(protected, spec.sparsity)
    elif kind == "prune_finetune":
        pruned, masks = prune(protected, spec.sparsity)
        out = train(pruned, data, cfg, masks=masks)
    elif kind == "noise_finetune":
        out = train(add_parameter_noise(protected, spec.noise_scale, rng), data, cfg)
    elif kind == "adversarial_train":
        eps = spec.adv_eps_scale * data.inputs.std(axis=0)
        adv = signed_gradient_examples(protected, data, eps)
        mixed = Dataset(
            np.vstack([data.inputs, adv]),
            np.concatenate([data.labels, data.labels]),
            name=data.name + "+adv",
            n_classes=data.n_classes,
        )
        out = train(protected, mixed, cfg)
    else:
        teacher = protected if kind == "distill" else prune(protected, spec.sparsity)[0]
        student_spec = dataclasses.replace(spec.student_spec, seed=spec.seed)
        transfer = jittered_transfer_set(data, spec.kd_augment_copies, spec.kd_jitter, rng)
        out = distill(teacher, student_spec, transfer, cfg, spec.temperature)
    return out.copy(tag=tag, lineage=spec.describe())


def train_independent(model_spec: ModelSpec, cfg: TrainConfig, data: Dataset, seed: int,
                      tag: str = "independent_test") -> Model:
    """Train from scratch; ``seed`` sets both the initialisation and the shuffle order."""
    spec = dataclasses.replace(model_spec, seed=seed)
    cfg = dataclasses.replace(cfg, seed=seed, loss="cross_entropy")
    arch = "-".join(map(str, spec.layer_sizes))
    lineage = f"independent;arch={arch};act={spec.activation};seed={seed}"
    return train(init_model(spec), data, cfg).copy(tag=tag, lineage=lineage)


# -- pools ------------------------------------------------------------------------


def _overlaps(a, b) -> bool:
    return a is not None and b is not None and a[0] <= b[1] and b[0] <= a[1]


def check_disjoint_seed_ranges(pools: Sequence[ModelPool]):
    for i, p in enumerate(pools):
        for q in pools[i + 1:]:
            if p.role.split("_")[1] != q.role.split("_")[1] and _overlaps(p.seed_range, q.seed_range):
                raise ConfigurationError(
                    f"seed range {p.seed_range} of {p.role} overlaps {q.seed_range} of {q.role}"
                )


def build_pool(protected: Model, data: Dataset, specs, role: str,
               existing: Sequence[ModelPool] = ()) -> ModelPool:
    """Build a pool of pirated (``AttackSpec`` list) or independent models.

    Independent roles take ``(ModelSpec, TrainConfig)`` pairs whose
    ``ModelSpec.seed`` is the member seed. Seed ranges of surrogate and test
    pools must not overlap; ``existing`` pools are checked against the new one.
    """
    if role not in POOL_ROLES:
        raise ConfigurationError(f"unknown pool role {role!r}")
    specs = list(specs)
    if not specs:
        raise ConfigurationError("build_pool needs at least one spec")
    models = []
    if role.startswith("pirated"):
        for spec in specs:
            if not isinstance(spec, AttackSpec):
                raise ConfigurationError("pirated pools take AttackSpec entries")
        seeds_range = (min(s.seed for s in specs), max(s.seed for s in specs))
    else:
        for spec in specs:
            if isinstance(spec, AttackSpec):
                raise ConfigurationError("independent pools take (ModelSpec, TrainConfig) pairs")
        seeds_range = (min(s[0].seed for s in specs), max(s[0].seed for s in specs))
    for other in existing:
        if other.role.split("_")[1] != role.split("_")[1] and _overlaps(seeds_range, other.seed_range):
            raise ConfigurationError(
                f"seed range {seeds_range} of {role} overlaps {other.seed_range} of {other.role}"
            )
    for spec in specs:
        if role.startswith("pirated"):
            models.append(apply_attack(protected, data, spec, tag=role))
        else:
            model_spec, cfg = spec
            models.append(train_independent(model_spec, cfg, data, model_spec.seed, tag=role))
    for m in models:
        if m.input_dim != protected.input_dim or m.n_classes != protected.n_classes:
            raise ConfigurationError("pool member does not match the protected model's task")
    return ModelPool(models=models, role=role)


def performance_report(protected: Model, pool: ModelPool, data: Dataset, tolerance: float = 0.10):
    """Accuracy of each pool member and whether it stays within ``tolerance`` of the protected model."""
    base = float(np.mean(protected.predict(data.inputs) == data.labels))
    rows = []
    for m in pool:
        acc = float(np.mean(m.predict(data.inputs) == data.labels))
        rows.append({"lineage": m.lineage, "accuracy": acc, "preserved": acc >= base - tolerance})
    return base, rows


def save_pool(pool: ModelPool, directory, name: Optional[str] = None) -> Path:
    """Write member model files plus a manifest; paths in the manifest are relative."""
    directory = Path(directory)
    name = name or pool.role
    member_dir = directory / name
    member_dir.mkdir(parents=True, exist_ok=True)
    members = []
    for i, m in enumerate(pool.models):
        rel = f"{name}/{i:03d}.json"
        (directory / rel).write_text(json.dumps(m.to_dict(), sort_keys=True) + "\n")
        members.append({"path": rel, "lineage": m.lineage, "seed": lineage_field(m.lineage, "seed", int)})
    manifest = {
        "format_version": POOL_FORMAT_VERSION,
        "role": pool.role,
        "seed_range": list(pool.seed_range) if pool.seed_range else None,
        "members": members,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_pool(manifest_path) -> ModelPool:
    manifest_path = Path(manifest_path)
    doc = json.loads(manifest_path.read_text())
    if doc.get("format_version") != POOL_FORMAT_VERSION:
        raise FormatVersionError(f"unsupported pool format_version {doc.get('format_version')!r}")
    models = []
    for entry in doc["members"]:
        models.append(Model.from_dict(json.loads((manifest_path.parent / entry["path"]).read_text())))
    return ModelPool(models=models, role=doc["role"])
