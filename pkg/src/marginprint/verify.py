"""Ownership verification and pool-level evaluation metrics."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigurationError, FormatVersionError
from .fingerprint import FingerprintSet
from .modelops import ModelPool, lineage_field

REPORT_FORMAT_VERSION = 1


@dataclass
class VerificationReport:
    suspect_ref: str
    matching_rate: float
    per_fingerprint_matches: list
    theta: Optional[float] = None
    decision: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "format_version": REPORT_FORMAT_VERSION,
            "suspect_ref": self.suspect_ref,
            "matching_rate": float(self.matching_rate),
            "per_fingerprint_matches": [bool(m) for m in self.per_fingerprint_matches],
            "theta": self.theta,
            "decision": self.decision,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "VerificationReport":
        if doc.get("format_version") != REPORT_FORMAT_VERSION:
            raise FormatVersionError(f"unsupported report format_version {doc.get('format_version')!r}")
        return cls(
            suspect_ref=doc["suspect_ref"],
            matching_rate=doc["matching_rate"],
            per_fingerprint_matches=list(doc["per_fingerprint_matches"]),
            theta=doc.get("theta"),
            decision=doc.get("decision"),
        )


@dataclass
class BenchmarkResult:
    pirated_scores: list
    independent_scores: list
    auc: float
    roc_points: list
    per_attack: dict = field(default_factory=dict)
    pirated_refs: list = field(default_factory=list)
    independent_refs: list = field(default_factory=list)
    theta: Optional[float] = None

    def to_dict(self) -> dict:
        doc = {
            "format_version": REPORT_FORMAT_VERSION,
            "auc": self.auc,
            "pirated": [{"lineage": r, "matching_rate": s} for r, s in zip(self.pirated_refs, self.pirated_scores)],
            "independent": [
                {"lineage": r, "matching_rate": s} for r, s in zip(self.independent_refs, self.independent_scores)
            ],
            "per_attack": {k: self.per_attack[k] for k in sorted(self.per_attack)},
            "roc_points": [[f, t] for f, t in self.roc_points],
            "theta": self.theta,
        }
        if self.theta is not None:
            doc["decisions"] = {
                "true_positive_rate": float(np.mean([s >= self.theta for s in self.pirated_scores])),
                "false_positive_rate": float(np.mean([s >= self.theta for s in self.independent_scores])),
            }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchmarkResult":
        if doc.get("format_version") != REPORT_FORMAT_VERSION:
            raise FormatVersionError(f"unsupported report format_version {doc.get('format_version')!r}")
        return cls(
            pirated_scores=[e["matching_rate"] for e in doc["pirated"]],
            independent_scores=[e["matching_rate"] for e in doc["independent"]],
            auc=doc["auc"],
            roc_points=[tuple(p) for p in doc["roc_points"]],
            per_attack=doc.get("per_attack", {}),
            pirated_refs=[e["lineage"] for e in doc["pirated"]],
            independent_refs=[e["lineage"] for e in doc["independent"]],
            theta=doc.get("theta"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def roc_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fpr", "tpr"])
        for f, t in self.roc_points:
            writer.writerow([repr(float(f)), repr(float(t))])
        return buf.getvalue()


def _prediction_oracle(suspect):
    """Reduce a suspect to a label-only query function.

    Accepts a :class:`~marginprint.nn.Model`, anything with ``predict``, or a
    plain callable. Only labels ever leave the oracle.
    """
    if hasattr(suspect, "predict"):
        return lambda X: np.asarray(suspect.predict(X), dtype=np.int64)
    if callable(suspect):
        return lambda X: np.asarray(suspect(X), dtype=np.int64)
    raise ConfigurationError("suspect must be a model, an estimator with predict(), or a callable")


def matching_rate(suspect, fps: FingerprintSet, suspect_ref: Optional[str] = None) -> VerificationReport:
    if fps is None or len(fps) == 0:
        raise ConfigurationError("cannot verify against an empty fingerprint set")
    query = _prediction_oracle(suspect)
    matches = query(fps.inputs) == fps.labels
    if suspect_ref is None:
        suspect_ref = getattr(suspect, "lineage", "") or "suspect"
    return VerificationReport(
        suspect_ref=suspect_ref,
        matching_rate=float(np.mean(matches)),
        per_fingerprint_matches=[bool(m) for m in matches],
    )


def decide(report: VerificationReport, theta: float) -> VerificationReport:
    """Flag the suspect as pirated when its matching rate reaches ``theta`` (inclusive)."""
    if not 0 <= theta <= 1:
        raise ConfigurationError(f"theta must lie in [0, 1], got {theta}")
    report.theta = float(theta)
    report.decision = "pirated" if report.matching_rate >= theta else "independent"
    return report


def _check_scores(pirated_scores, independent_scores):
    p = np.asarray(pirated_scores, dtype=np.float64).ravel()
    i = np.asarray(independent_scores, dtype=np.float64).ravel()
    if p.size == 0 or i.size == 0:
        raise ConfigurationError("both score lists must be non-empty")
    return p, i


def auc(pirated_scores, independent_scores) -> float:
    """Mann-Whitney AUC from average ranks; ties count one half."""
    p, i = _check_scores(pirated_scores, independent_scores)
    ranks = rankdata(np.concatenate([p, i]), method="average")
    u = ranks[: p.size].sum() - p.size * (p.size + 1) / 2.0
    return float(u / (p.size * i.size))


def roc_curve(pirated_scores, independent_scores) -> list:
    """``(fpr, tpr)`` points for thresholds ``score >= t`` over every observed score.

    Starts at (0, 0) (threshold above every score) and ends at (1, 1).
    """
    p, i = _check_scores(pirated_scores, independent_scores)
    points = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([p, i]))[::-1]:
        points.append((float(np.sum(i >= t) / i.size), float(np.sum(p >= t) / p.size)))
    return points


def trapezoid_area(points) -> float:
    pts = np.asarray(points, dtype=np.float64)
    return float(np.sum(np.diff(pts[:, 0]) * (pts[1:, 1] + pts[:-1, 1]) / 2.0))


def attack_key(lineage: str) -> str:
    return lineage_field(lineage, "attack") or lineage.split(";")[0] or "unknown"


def evaluate(fps: FingerprintSet, pirated_test: ModelPool, independent_test: ModelPool,
             theta: Optional[float] = None) -> BenchmarkResult:
    """Score every test model and compute pool-level and per-attack AUC."""
    if pirated_test is None or independent_test is None or not len(pirated_test) or not len(independent_test):
        raise ConfigurationError("evaluation needs non-empty pirated and independent test pools")
    if not pirated_test.role.startswith("pirated") or not independent_test.role.startswith("independent"):
        raise ConfigurationError("pool roles do not match (pirated_test, independent_test)")
    p_scores = [matching_rate(m, fps).matching_rate for m in pirated_test]
    i_scores = [matching_rate(m, fps).matching_rate for m in independent_test]
    groups = {}
    for m, s in zip(pirated_test, p_scores):
        groups.setdefault(attack_key(m.lineage), []).append(s)
    per_attack = {
        k: {"count": len(v), "mean_matching_rate": float(np.mean(v)), "auc": auc(v, i_scores)}
        for k, v in groups.items()
    }
    return BenchmarkResult(
        pirated_scores=p_scores,
        independent_scores=i_scores,
        auc=auc(p_scores, i_scores),
        roc_points=roc_curve(p_scores, i_scores),
        per_attack=per_attack,
        pirated_refs=[m.lineage for m in pirated_test],
        independent_refs=[m.lineage for m in independent_test],
        theta=theta,
    )
