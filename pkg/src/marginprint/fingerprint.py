"""Fingerprint generation from stretched minimal decision-altering perturbations.

Pipeline per anchor:

1. keep training samples the protected model classifies with a logit margin
   of at least ``m_anchor``;
2. find the smallest L2 perturbation that flips the prediction and refine
   it onto the decision boundary;
3. estimate the independent-model margin, the independent-model local
   Lipschitz constant and the pirated-model logit shift from surrogate pools,
   then grid-search the stretch factor that sits furthest from both bounds;
4. emit ``x* = x_a + tau* delta*`` labelled by the protected model.
"""
from __future__ import annotations

import dataclasses
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import Dataset
from .errors import BoundarySearchError, ConfigurationError, FormatVersionError
from .modelops import ModelPool
from .nn import Model, input_gradient, make_rng, logit_margin, margin_gradient, margins

log = logging.getLogger(__name__)

FINGERPRINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    m_anchor: float = 8.0
    q_margin: float = 0.5
    q_lip: float = 0.5
    q_eps: float = 1.0
    n_grid: int = 500
    boundary_tol: float = 1e-4
    cw_steps: int = 3000
    cw_lr: float = 0.01
    cw_c: float = 1.0
    cw_doublings: int = 8
    cw_restarts: int = 8
    cw_abort_early: bool = True
    kappa: float = 0.0
    max_fingerprints: int = 100

    def __post_init__(self):
        for name in ("q_margin", "q_lip", "q_eps"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.n_grid < 2:
            raise ConfigurationError("n_grid must be at least 2")
        if not (self.boundary_tol > 0 and self.cw_lr > 0 and self.cw_c > 0):
            raise ConfigurationError("boundary_tol, cw_lr and cw_c must be positive")
        if self.cw_steps <= 0 or self.max_fingerprints <= 0:
            raise ConfigurationError("cw_steps and max_fingerprints must be positive")
        if self.cw_doublings < 0 or self.cw_restarts < 0:
            raise ConfigurationError("cw_doublings and cw_restarts must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Anchor:
    x_a: np.ndarray
    y: int
    margin: float
    index: int = -1


@dataclass(frozen=True)
class BoundaryResult:
    delta_star: np.ndarray
    q: np.ndarray
    delta_norm: float
    c_g: float
    adversarial_class: int
    residual_margin: float


@dataclass(frozen=True)
class AnchorEstimates:
    m_min: float
    L_uniq: float
    per_model_margins: list
    per_model_lipschitz: list


@dataclass(frozen=True)
class TauSearch:
    """Outcome of the stretch-factor grid search; ``tau_star`` is None when infeasible."""

    tau_upper: float
    tau_star: Optional[float] = None
    tau_lower_at_star: Optional[float] = None
    slack: Optional[float] = None
    eps_logit: Optional[float] = None
    reason: Optional[str] = None

    @property
    def feasible(self) -> bool:
        return self.tau_star is not None


@dataclass(frozen=True)
class Fingerprint:
    x_star: np.ndarray
    y_star: int
    tau_star: float
    tau_lower_at_star: float
    tau_upper: float
    anchor_index: int
    slack: float
    # provenance for independent re-checking
    x_anchor: Optional[np.ndarray] = None
    anchor_label: Optional[int] = None
    delta_star: Optional[np.ndarray] = None
    c_g: Optional[float] = None
    m_min: Optional[float] = None
    L_uniq: Optional[float] = None
    eps_logit: Optional[float] = None

    def to_dict(self) -> dict:
        def vec(v):
            return None if v is None else [float(t) for t in v]

        return {
            "x_star": vec(self.x_star),
            "y_star": int(self.y_star),
            "tau_star": float(self.tau_star),
            "tau_lower_at_star": float(self.tau_lower_at_star),
            "tau_upper": float(self.tau_upper),
            "slack": float(self.slack),
            "anchor_index": int(self.anchor_index),
            "anchor_label": None if self.anchor_label is None else int(self.anchor_label),
            "x_anchor": vec(self.x_anchor),
            "delta_star": vec(self.delta_star),
            "c_g": self.c_g,
            "m_min": self.m_min,
            "L_uniq": self.L_uniq,
            "eps_logit": self.eps_logit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        def arr(v):
            return None if v is None else np.array(v, dtype=np.float64)

        return cls(
            x_star=arr(d["x_star"]),
            y_star=int(d["y_star"]),
            tau_star=d["tau_star"],
            tau_lower_at_star=d["tau_lower_at_star"],
            tau_upper=d["tau_upper"],
            anchor_index=d["anchor_index"],
            slack=d["slack"],
            x_anchor=arr(d.get("x_anchor")),
            anchor_label=d.get("anchor_label"),
            delta_star=arr(d.get("delta_star")),
            c_g=d.get("c_g"),
            m_min=d.get("m_min"),
            L_uniq=d.get("L_uniq"),
            eps_logit=d.get("eps_logit"),
        )


@dataclass
class FingerprintSet:
    fingerprints: list
    gen_config: GenConfig
    protected_model_ref: str = ""
    discarded_anchor_count: int = 0
    discard_reasons: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.fingerprints)

    def __iter__(self):
        return iter(self.fingerprints)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([fp.x_star for fp in self.fingerprints])

    @property
    def labels(self) -> np.ndarray:
        return np.array([fp.y_star for fp in self.fingerprints], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "format_version": FINGERPRINT_FORMAT_VERSION,
            "gen_config": self.gen_config.to_dict(),
            "protected_model_ref": self.protected_model_ref,
            "fingerprints": [fp.to_dict() for fp in self.fingerprints],
            "discarded_anchor_count": int(self.discarded_anchor_count),
            "discard_reasons": dict(sorted(self.discard_reasons.items())),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FingerprintSet":
        if doc.get("format_version") != FINGERPRINT_FORMAT_VERSION:
            raise FormatVersionError(f"unsupported fingerprint format_version {doc.get('format_version')!r}")
        return cls(
            fingerprints=[Fingerprint.from_dict(d) for d in doc["fingerprints"]],
            gen_config=GenConfig(**doc["gen_config"]),
            protected_model_ref=doc.get("protected_model_ref", ""),
            discarded_anchor_count=doc.get("discarded_anchor_count", 0),
            discard_reasons=doc.get("discard_reasons", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def quantile(values, q: float) -> float:
    """Linear interpolation between order statistics at position ``(n - 1) * q``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ConfigurationError("quantile of an empty collection")
    return float(np.quantile(values, q, method="linear"))


# -- step 1 ---------------------------------------------------------------------


def select_anchors(model: Model, data: Dataset, cfg: GenConfig) -> list:
    """Correctly classified samples with margin >= ``m_anchor``, highest margin first."""
    g = margins(model, data.inputs, data.labels)
    keep = np.flatnonzero((model.predict(data.inputs) == data.labels) & (g >= cfg.m_anchor))
    # stable sort keeps dataset order among equal margins
    keep = keep[np.argsort(-g[keep], kind="stable")]
    return [Anchor(x_a=data.inputs[i].copy(), y=int(data.labels[i]), margin=float(g[i]), index=int(i)) for i in keep]


# -- step 2 ---------------------------------------------------------------------


def _penalised_descent(model: Model, x_a, y, c, cfg: GenConfig, start=None):
    """Adam on ``||delta||^2 + c * max(g(x_a + delta), -kappa)`` from ``start``.

    Returns the smallest-norm iterate that flips the prediction, or None.
    With ``cw_abort_early`` the run stops once a tenth of the step budget
    passes without the objective dropping below 0.9999 of its last checkpoint.
    """
    delta = np.zeros_like(x_a) if start is None else np.array(start, dtype=np.float64)
    m = np.zeros_like(x_a)
    v = np.zeros_like(x_a)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best, best_norm = None, np.inf
    K = model.n_classes
    check_every = max(1, cfg.cw_steps // 10)
    prev = np.inf
    for t in range(1, cfg.cw_steps + 1):
        x = x_a + delta
        s = model.logits(x)
        others = s.copy()
        others[y] = -np.inf
        k = int(np.argmax(others))
        g = s[y] - s[k]
        n = float(delta @ delta)
        if g < 0 and n < best_norm:
            best, best_norm = delta.copy(), n
        if cfg.cw_abort_early and t % check_every == 0:
            obj = n + c * max(g, -cfg.kappa)
            if obj > 0.9999 * prev:
                break
            prev = obj
        grad = 2.0 * delta
        if g > -cfg.kappa:
            d = np.zeros(K)
            d[y], d[k] = c, -c
            grad = grad + input_gradient(model, x, d)[0]
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        step = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        delta = delta - cfg.cw_lr * step
    return best


def _restart_directions(dim, count, seed):
    """Unit vectors for multi-start; deterministic in ``seed``."""
    if count == 0:
        return np.zeros((0, dim))
    if dim == 2:
        ang = 2 * np.pi * (np.arange(count) + 0.5) / count
        return np.column_stack([np.cos(ang), np.sin(ang)])
    u = make_rng(seed).standard_normal((count, dim))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def _search_flip(model: Model, x_a, y, cfg: GenConfig, seed: int):
    """Escalate ``c`` until a flip is found, then multi-start on the sphere of that solution."""
    c = cfg.cw_c
    adv = None
    for _ in range(cfg.cw_doublings + 1):
        adv = _penalised_descent(model, x_a, y, c, cfg)
        if adv is not None:
            break
        c *= 2.0
    if adv is None:
        return None, c / 2.0
    radius = float(np.linalg.norm(adv))
    best = _bisect_to_boundary(model, x_a, y, adv, cfg.boundary_tol) * adv
    for u in _restart_directions(len(x_a), cfg.cw_restarts, seed):
        cand = _penalised_descent(model, x_a, y, c, cfg, start=radius * u)
        if cand is None:
            continue
        cand = _bisect_to_boundary(model, x_a, y, cand, cfg.boundary_tol) * cand
        if np.linalg.norm(cand) < np.linalg.norm(best):
            best = cand
    return best, c


def _bisect_to_boundary(model: Model, x_a, y, delta, tol, max_iter=200):
    """Bisect ``t`` in [0, 1] on the segment ``x_a + t delta`` until ``|g| <= tol``."""
    lo, hi = 0.0, 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        g = logit_margin(model, x_a + mid * delta, y)
        if abs(g) <= tol:
            return mid
        if g > 0:
            lo = mid
        else:
            hi = mid
    # discontinuity-free margins always converge; fall back to the adversarial side
    return hi


def find_min_perturbation(model: Model, anchor: Anchor, cfg: GenConfig) -> BoundaryResult:
    """Minimal flipping perturbation, refined onto the decision boundary.

    Raises :class:`BoundarySearchError` when no flip is found after the penalty
    constant has been doubled ``cw_doublings`` times, or when the margin
    gradient vanishes at the boundary point.
    """
    x_a = np.asarray(anchor.x_a, dtype=np.float64)
    y = int(anchor.y)
    if model.predict(x_a) != y:
        raise BoundarySearchError("anchor is not correctly classified", reason="boundary failure")
    delta, c = _search_flip(model, x_a, y, cfg, seed=max(anchor.index, 0))
    if delta is None:
        raise BoundarySearchError(f"no decision flip found (final c={c:g})", reason="boundary failure")
    q = x_a + delta
    residual = logit_margin(model, q, y)
    if abs(residual) > cfg.boundary_tol:
        raise BoundarySearchError(f"bisection stalled at |g|={abs(residual):.3g}", reason="boundary failure")
    _, c_g, k = margin_gradient(model, q, y)
    norm = float(np.linalg.norm(delta))
    if c_g <= 0 or norm <= 0:
        raise BoundarySearchError("degenerate boundary geometry", reason="degenerate geometry")
    return BoundaryResult(delta_star=delta, q=q, delta_norm=norm, c_g=c_g,
                          adversarial_class=k, residual_margin=residual)


# -- step 3 ---------------------------------------------------------------------


def estimate_anchor(anchor: Anchor, boundary: BoundaryResult, independent_pool: ModelPool,
                    cfg: GenConfig) -> AnchorEstimates:
    if independent_pool is None or len(independent_pool) == 0:
        raise ConfigurationError("estimate_anchor needs a non-empty independent pool")
    if not independent_pool.role.startswith("independent"):
        raise ConfigurationError(f"expected an independent pool, got {independent_pool.role}")
    y = int(anchor.y)
    m_list, lip_list = [], []
    for model in independent_pool:
        s_a = model.logits(anchor.x_a)
        s_q = model.logits(boundary.q)
        others = np.delete(s_a, y)
        m_list.append(float(s_a[y] - others.max()))
        lip_list.append(float(np.linalg.norm(s_q - s_a) / boundary.delta_norm))
    return AnchorEstimates(
        m_min=quantile(m_list, cfg.q_margin),
        L_uniq=quantile(lip_list, cfg.q_lip),
        per_model_margins=m_list,
        per_model_lipschitz=lip_list,
    )


def _logit_shifts(X, protected: Model, pirated_pool: ModelPool) -> np.ndarray:
    """Max per-class logit difference, shape ``(n_points, n_models)``."""
    base = protected.logits(X)
    return np.stack([np.max(np.abs(m.logits(X) - base), axis=-1) for m in pirated_pool], axis=-1)


def eps_logit_at(x, protected: Model, pirated_pool: ModelPool, q_eps: float) -> float:
    if pirated_pool is None or len(pirated_pool) == 0:
        raise ConfigurationError("eps_logit_at needs a non-empty pirated pool")
    if not pirated_pool.role.startswith("pirated"):
        raise ConfigurationError(f"expected a pirated pool, got {pirated_pool.role}")
    x = np.asarray(x, dtype=np.float64)
    return quantile(_logit_shifts(x[None, :], protected, pirated_pool)[0], q_eps)


def tau_upper(estimates: AnchorEstimates, delta_norm: float) -> float:
    if not estimates.L_uniq > 0:
        raise ConfigurationError(f"L_uniq must be positive, got {estimates.L_uniq}")
    if not delta_norm > 0:
        raise ConfigurationError(f"delta_norm must be positive, got {delta_norm}")
    return estimates.m_min / (2.0 * estimates.L_uniq * delta_norm)


def tau_lower_from_eps(eps_logit: float, c_g: float, delta_norm: float) -> float:
    return 1.0 + 2.0 * eps_logit / (c_g * delta_norm)


def tau_lower(tau: float, anchor: Anchor, boundary: BoundaryResult, protected: Model,
              pirated_pool: ModelPool, cfg: GenConfig) -> float:
    if not tau > 0:
        raise ConfigurationError("tau must be positive")
    x_star = anchor.x_a + tau * boundary.delta_star
    eps = eps_logit_at(x_star, protected, pirated_pool, cfg.q_eps)
    return tau_lower_from_eps(eps, boundary.c_g, boundary.delta_norm)


def tau_grid(upper: float, n_grid: int) -> np.ndarray:
    """``n_grid`` points evenly spaced over ``(1, upper]``; 1 itself is excluded."""
    return 1.0 + (upper - 1.0) * np.arange(1, n_grid + 1) / n_grid


def grid_search_tau(anchor: Anchor, boundary: BoundaryResult, estimates: AnchorEstimates,
                    protected: Model, pirated_pool: ModelPool, cfg: GenConfig) -> TauSearch:
    """Pick the grid stretch factor with the largest slack to both bounds.

    The lower bound depends on tau through the logit shift at ``x*(tau)``, so
    it is re-evaluated for every candidate. Feasible candidates satisfy
    ``tau_lower(tau) < tau < tau_upper``; ties in slack go to the smaller tau.
    """
    upper = tau_upper(estimates, boundary.delta_norm)
    if upper <= 1.0:
        return TauSearch(tau_upper=upper, reason="interval void")
    taus = tau_grid(upper, cfg.n_grid)
    X = anchor.x_a[None, :] + taus[:, None] * boundary.delta_star[None, :]
    shifts = _logit_shifts(X, protected, pirated_pool)
    eps = np.quantile(shifts, cfg.q_eps, axis=1, method="linear")
    lowers = tau_lower_from_eps(eps, boundary.c_g, boundary.delta_norm)
    slack = np.minimum(taus - lowers, upper - taus)
    feasible = (taus > lowers) & (taus < upper)
    if not feasible.any():
        return TauSearch(tau_upper=upper, reason="no feasible tau")
    slack = np.where(feasible, slack, -np.inf)
    i = int(np.argmax(slack))  # first maximiser = smallest tau
    return TauSearch(tau_upper=upper, tau_star=float(taus[i]), tau_lower_at_star=float(lowers[i]),
                     slack=float(slack[i]), eps_logit=float(eps[i]))


# -- step 4 ---------------------------------------------------------------------


def generate(protected: Model, data: Dataset, surrogate_pirated: ModelPool,
             surrogate_independent: ModelPool, cfg: GenConfig,
             boundary_cache: Optional[dict] = None) -> FingerprintSet:
    """Run the full pipeline over anchors in descending-margin order.

    ``boundary_cache`` (anchor index -> BoundaryResult or BoundarySearchError)
    lets repeated runs with different quantile settings skip step 2.
    """
    anchors = select_anchors(protected, data, cfg)
    fps, reasons = [], Counter()
    for anchor in anchors:
        if len(fps) >= cfg.max_fingerprints:
            break
        cached = None if boundary_cache is None else boundary_cache.get(anchor.index)
        try:
            if isinstance(cached, BoundarySearchError):
                raise cached
            boundary = cached or find_min_perturbation(protected, anchor, cfg)
        except BoundarySearchError as exc:
            if boundary_cache is not None:
                boundary_cache[anchor.index] = exc
            reasons[exc.reason] += 1
            continue
        if boundary_cache is not None:
            boundary_cache[anchor.index] = boundary
        est = estimate_anchor(anchor, boundary, surrogate_independent, cfg)
        if not est.L_uniq > 0:
            reasons["interval void"] += 1
            continue
        choice = grid_search_tau(anchor, boundary, est, protected, surrogate_pirated, cfg)
        if not choice.feasible:
            reasons[choice.reason] += 1
            continue
        x_star = anchor.x_a + choice.tau_star * boundary.delta_star
        fps.append(Fingerprint(
            x_star=x_star,
            y_star=int(protected.predict(x_star)),
            tau_star=choice.tau_star,
            tau_lower_at_star=choice.tau_lower_at_star,
            tau_upper=choice.tau_upper,
            anchor_index=anchor.index,
            slack=choice.slack,
            x_anchor=anchor.x_a,
            anchor_label=anchor.y,
            delta_star=boundary.delta_star,
            c_g=boundary.c_g,
            m_min=est.m_min,
            L_uniq=est.L_uniq,
            eps_logit=choice.eps_logit,
        ))
    discarded = sum(reasons.values())
    if not fps:
        log.warning("no valid fingerprints (%d anchors, discards: %s)", len(anchors), dict(reasons))
    return FingerprintSet(
        fingerprints=fps,
        gen_config=cfg,
        protected_model_ref=protected.fingerprint_ref(),
        discarded_anchor_count=discarded,
        discard_reasons=dict(reasons),
    )
