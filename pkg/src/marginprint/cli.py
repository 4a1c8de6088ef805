"""Command-line entry point.

Every stage reads what the previous one wrote under ``--out``::

    data/train.csv, data/test.csv   (+ .meta.json sidecars)
    protected.json                  train
    pools/<role>.json               pool
    fingerprints.json               fingerprint
    report.json, roc.csv            evaluate
    summary.md                      report

Exit codes: 0 success, 2 configuration or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from .config import RunConfig
from .datagen import load_csv, write_csv
from .errors import BoundarySearchError, ConfigurationError, ParseError, ShapeError, TrainingError
from .fingerprint import FingerprintSet, generate
from .modelops import POOL_ROLES, build_pool, load_pool, performance_report, save_pool
from .nn import Model, accuracy, init_model, train
from .verify import BenchmarkResult, decide, evaluate, matching_rate

log = logging.getLogger("marginprint")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


def _write_json(path: Path, doc: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise ConfigurationError(f"missing input file {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from None


def _say(args, message: str):
    """Result lines go to stdout unless --quiet; diagnostics go through logging."""
    if not getattr(args, "quiet", False):
        print(message)


def _load_config(args) -> RunConfig:
    if args.config is None:
        raise ConfigurationError("--config is required for this command")
    return RunConfig.load(args.config, seed=args.seed)


def _load_data(out: Path):
    for name in ("train", "test"):
        if not (out / "data" / f"{name}.csv").exists():
            raise ConfigurationError(f"missing {out / 'data' / name}.csv; run 'train' first")
    return load_csv(out / "data" / "train.csv"), load_csv(out / "data" / "test.csv")


def _load_model(path: Path) -> Model:
    return Model.from_dict(_read_json(path))


def _load_pool(out: Path, role: str):
    path = out / "pools" / f"{role}.json"
    if not path.exists():
        raise ConfigurationError(f"missing pool file {path}; run 'pool' first")
    return load_pool(path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    train_data, test_data = cfg.load_dataset(Path(args.config).parent)
    (out / "data").mkdir(parents=True, exist_ok=True)
    write_csv(train_data, out / "data" / "train.csv")
    write_csv(test_data, out / "data" / "test.csv")
    spec, train_cfg = cfg.protected_spec(train_data.dim, train_data.n_classes)
    model = train(init_model(spec, tag="protected", lineage="protected"), train_data, train_cfg)
    _write_json(out / "protected.json", model.to_dict())
    _say(args, f"protected model: train accuracy {accuracy(model, train_data):.4f}, "
               f"held-out accuracy {accuracy(model, test_data):.4f}")
    return EXIT_OK


def cmd_pool(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    train_data, test_data = _load_data(out)
    protected = _load_model(out / "protected.json")
    role = getattr(args, "role", None)
    roles = [role] if role else [r for r in POOL_ROLES if r in cfg.pools]
    if not roles:
        raise ConfigurationError("configuration defines no pools")
    built, performance = [], {}
    for role in roles:
        specs = cfg.pool_specs(role, protected.input_dim, protected.n_classes)
        pool = build_pool(protected, train_data, specs, role, existing=built)
        built.append(pool)
        save_pool(pool, out / "pools")
        base, rows = performance_report(protected, pool, test_data, cfg.accuracy_tolerance)
        performance[role] = rows
        for row in rows:
            if not row["preserved"]:
                log.warning("%s: %s accuracy %.4f is more than %.2f below the protected %.4f",
                            role, row["lineage"], row["accuracy"], cfg.accuracy_tolerance, base)
        log.info("%s: %d models", role, len(pool))
    _write_json(out / "pools" / "performance.json",
                {"format_version": 1, "protected_accuracy": base, "pools": performance})
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    train_data, test_data = _load_data(out)
    anchor_data = train_data if cfg.anchor_split == "train" else test_data
    protected = _load_model(out / "protected.json")
    fps = generate(protected, anchor_data, _load_pool(out, "pirated_surrogate"),
                   _load_pool(out, "independent_surrogate"), cfg.fingerprint)
    (out / "fingerprints.json").write_text(fps.dumps())
    _say(args, f"{len(fps)} fingerprints, {fps.discarded_anchor_count} anchors discarded "
               f"{dict(sorted(fps.discard_reasons.items()))}")
    return EXIT_OK


def _theta(args, cfg: Optional[RunConfig]) -> Optional[float]:
    theta = getattr(args, "theta", None)
    theta = theta if theta is not None else (cfg.theta if cfg else None)
    if theta is not None and not 0 <= theta <= 1:
        raise ConfigurationError(f"theta must lie in [0, 1], got {theta}")
    return theta


def cmd_verify(args) -> int:
    cfg = _load_config(args) if args.config else None
    theta = _theta(args, cfg)
    if theta is None:
        raise ConfigurationError("verify needs --theta (or theta in the config)")
    fps = FingerprintSet.from_dict(_read_json(Path(args.fingerprints)))
    suspect = _load_model(Path(args.suspect))
    report = decide(matching_rate(suspect, fps, suspect.lineage or Path(args.suspect).name), theta)
    print(f"{report.suspect_ref}: matching rate {report.matching_rate:.4f} -> {report.decision}")
    if args.out:
        _write_json(Path(args.out) / "verification.json", report.to_dict())
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    fps_path = out / "fingerprints.json"
    fps = FingerprintSet.from_dict(_read_json(fps_path))
    if not len(fps):
        raise ConfigurationError(f"{fps_path} holds no fingerprints")
    result = evaluate(fps, _load_pool(out, "pirated_test"), _load_pool(out, "independent_test"),
                      _theta(args, cfg))
    (out / "report.json").write_text(result.dumps())
    (out / "roc.csv").write_text(result.roc_csv())
    _say(args, f"AUC {result.auc:.4f} over {len(result.pirated_scores)} pirated and "
               f"{len(result.independent_scores)} independent models")
    return EXIT_OK


def render_summary(result: BenchmarkResult, fps: Optional[FingerprintSet] = None) -> str:
    lines = ["# Fingerprint evaluation", ""]
    if fps is not None:
        lines += [f"- fingerprints: {len(fps)}",
                  f"- discarded anchors: {fps.discarded_anchor_count} {dict(sorted(fps.discard_reasons.items()))}"]
    lines += [f"- AUC: {result.auc:.4f}",
              f"- pirated models: {len(result.pirated_scores)}",
              f"- independent models: {len(result.independent_scores)}"]
    if result.theta is not None:
        doc = result.to_dict()["decisions"]
        lines.append(f"- at theta={result.theta}: TPR {doc['true_positive_rate']:.4f}, "
                     f"FPR {doc['false_positive_rate']:.4f}")
    lines += ["", "| attack | count | mean matching rate | AUC |", "|---|---|---|---|"]
    for key in sorted(result.per_attack):
        row = result.per_attack[key]
        lines.append(f"| {key} | {row['count']} | {row['mean_matching_rate']:.4f} | {row['auc']:.4f} |")
    lines += ["", "| model | role | matching rate |", "|---|---|---|"]
    for ref, s in zip(result.pirated_refs, result.pirated_scores):
        lines.append(f"| {ref} | pirated | {s:.4f} |")
    for ref, s in zip(result.independent_refs, result.independent_scores):
        lines.append(f"| {ref} | independent | {s:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    out = Path(args.out)
    result = BenchmarkResult.from_dict(_read_json(out / "report.json"))
    fps_path = out / "fingerprints.json"
    fps = FingerprintSet.from_dict(_read_json(fps_path)) if fps_path.exists() else None
    text = render_summary(result, fps)
    (out / "summary.md").write_text(text)
    if not args.quiet:
        print(text, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    for step in (cmd_train, cmd_pool, cmd_fingerprint):
        step(args)
    if not FingerprintSet.from_dict(_read_json(Path(args.out) / "fingerprints.json")).fingerprints:
        log.warning("empty fingerprint set; skipping evaluate and report")
        return EXIT_OK
    cmd_evaluate(args)
    return cmd_report(args)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (YAML or JSON)")
    common.add_argument("--out", default="out", help="artifact directory (default: out)")
    common.add_argument("--seed", type=int, help="override the global seed of the config")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="marginprint", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="generate data and train the protected model")
    p = sub.add_parser("pool", parents=[common], help="build surrogate and test model pools")
    p.add_argument("--role", choices=POOL_ROLES, help="build only this pool")
    sub.add_parser("fingerprint", parents=[common], help="generate fingerprints")
    p = sub.add_parser("verify", parents=[common], help="score one suspect model")
    p.add_argument("--fingerprints", required=True)
    p.add_argument("--suspect", required=True)
    p.add_argument("--theta", type=float)
    p = sub.add_parser("evaluate", parents=[common], help="score the test pools")
    p.add_argument("--theta", type=float)
    sub.add_parser("report", parents=[common], help="render a markdown summary of report.json")
    p = sub.add_parser("run", parents=[common], help="train, pool, fingerprint, evaluate and report")
    p.add_argument("--theta", type=float)
    return parser


COMMANDS = {
    "train": cmd_train,
    "pool": cmd_pool,
    "fingerprint": cmd_fingerprint,
    "verify": cmd_verify,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def _configure_logging(quiet: bool):
    pkg = logging.getLogger("marginprint")
    pkg.setLevel(logging.WARNING if quiet else logging.INFO)
    if not any(getattr(h, "_marginprint", False) for h in pkg.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        handler._marginprint = True
        pkg.addHandler(handler)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    _configure_logging(args.quiet)
    try:
        return COMMANDS[args.command](args)
    except (ConfigurationError, ParseError, ShapeError, FileNotFoundError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except (TrainingError, BoundarySearchError, FloatingPointError, ArithmeticError, RuntimeError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
