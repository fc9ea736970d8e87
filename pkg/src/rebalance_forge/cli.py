"""``rebalance-forge`` command line.

Exit codes: 0 success, 1 domain error, 2 usage error. Every JSON artifact
carries a ``meta`` block with the tool version, the resolved configuration
and the seed, and is written atomically so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from rebalance_forge import __version__
from rebalance_forge.errors import RebalanceForgeError
from rebalance_forge.evaluation import check_fold_plan, evaluate_predictions, load_predictions, plan_folds
from rebalance_forge.manifest import Manifest, compute_label_stats, format_stats_table, load_manifest
from rebalance_forge.progan import (
    NetworkSpec,
    builtin_critic_spec,
    builtin_generator_spec,
    format_trace,
    validate_network,
)
from rebalance_forge.rebalance import InjectionConfig, InjectionPlan, plan_from_stats
from rebalance_forge.sma import SmaConfig, optimize
from rebalance_forge.toy import (
    Hyperparameters,
    ToyDatasetConfig,
    ToyRunConfig,
    generate_toy_dataset,
    pipeline_objective,
    run_toy_experiment,
)

logger = logging.getLogger("rebalance_forge")

SEED_ENV = "REBALANCE_FORGE_SEED"


class UsageError(Exception):
    pass


@contextmanager
def _domain(what: str):
    """Re-raise config validation and parse failures as domain errors."""
    try:
        yield
    except RebalanceForgeError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise RebalanceForgeError(f"{what}: {exc}") from exc


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RebalanceForgeError(f"cannot read {path}: {exc.strerror}") from None
    with _domain(str(path)):
        data = json.loads(text)
    if not isinstance(data, dict):
        raise RebalanceForgeError(f"{path}: expected a JSON object")
    return data


def _write_atomic(path: str | Path, write: Callable[[Path], object]) -> None:
    path = Path(path)
    # keep the real suffix so writers that infer the format from it still work
    fd, tmp = tempfile.mkstemp(prefix=f".{path.stem}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_json(path: str | Path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, allow_nan=True) + "\n"
    _write_atomic(path, lambda p: p.write_text(text, encoding="utf-8"))


def _meta(command: str, config: dict, seed: int | None) -> dict:
    return {"tool": "rebalance-forge", "version": __version__, "command": command, "config": config, "seed": seed}


def _figure_path(out: Path, name: str) -> Path:
    return out.with_name(f"{out.stem}.{name}.png")


def _save_figure(args, out: Path, name: str, draw: Callable[[Path], object]) -> None:
    if args.no_figures:
        return
    path = _figure_path(out, name)
    _write_atomic(path, draw)
    print(f"figure: {path}")


def resolve_seed(flag: int | None, config_seed: int | None = None) -> int:
    """--seed wins, then a seed in the config file, then the environment, then 0."""
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0


def parse_tune(items: Sequence[str]) -> dict[str, float]:
    tuning = {}
    for item in items:
        label, sep, value = item.rpartition("=")
        if not sep or not label:
            raise UsageError(f"--tune expects label=a, got {item!r}")
        try:
            tuning[label] = float(value)
        except ValueError:
            raise UsageError(f"--tune {item!r}: {value!r} is not a number") from None
    return tuning


# ---- subcommands -------------------------------------------------------------


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest)
    stats = compute_label_stats(manifest, args.source)
    print(format_stats_table(stats))
    if args.out:
        payload = {
            "meta": _meta("stats", {"manifest": args.manifest, "source": args.source}, None),
            "labels": stats.labels,
            "frequencies": stats.frequencies,
            "ratios": stats.ratios,
            "total": stats.total,
        }
        _write_json(args.out, payload)
    return 0


def cmd_plan_injection(args) -> int:
    manifest = load_manifest(args.manifest)
    stats = compute_label_stats(manifest, "real")
    config = InjectionConfig(args.siir, parse_tune(args.tune))
    unknown = set(config.tuning) - set(stats.labels)
    if unknown:
        raise RebalanceForgeError(f"--tune names unknown labels {sorted(unknown)}")
    plan = plan_from_stats(stats, config)
    print(f"{'Label':<20} {'CF':>7} {'Weight':>8} {'Synthetic':>10}")
    for label in stats.labels:
        print(f"{label:<20} {plan.cf[label]:>7} {plan.weights[label]:>8.4f} {plan.per_label[label]:>10}")
    print(f"{'Total':<20} {sum(plan.cf.values()):>7} {'':>8} {sum(plan.per_label.values()):>10}")
    print(f"N_f = {plan.n_f_total} at siir {plan.siir} over {stats.total} real records")
    resolved = {"manifest": args.manifest, "siir": args.siir, "tuning": config.tuning}
    _write_json(args.out, {"meta": _meta("plan-injection", resolved, None), **plan.to_json()})
    return 0


def cmd_plan_folds(args) -> int:
    manifest = load_manifest(args.manifest)
    seed = resolve_seed(args.seed)
    plan = InjectionPlan.from_json(_read_json(args.plan)) if args.plan else None
    folds = plan_folds(manifest, args.k, args.val_ratio, seed, plan)
    problems = check_fold_plan(folds, manifest)
    if problems:
        raise RebalanceForgeError("fold plan failed its invariants: " + "; ".join(problems))
    print(f"{'Fold':>4} {'Test':>7} {'Train':>7} {'Val':>7}")
    for i, f in enumerate(folds.folds):
        print(f"{i:>4} {len(f.test):>7} {len(f.train):>7} {len(f.val):>7}")
    resolved = {"manifest": args.manifest, "k": args.k, "val_ratio": args.val_ratio, "plan": args.plan}
    _write_json(args.out, {"meta": _meta("plan-folds", resolved, seed), **folds.to_json()})
    return 0


def cmd_validate_gan(args) -> int:
    if args.spec:
        with _domain(args.spec):
            spec = NetworkSpec.from_json(_read_json(args.spec))
        resolved = {"spec": args.spec}
    else:
        build = builtin_generator_spec if args.builtin == "generator" else builtin_critic_spec
        spec = build(args.stage, verbatim=args.verbatim)
        resolved = {"builtin": args.builtin, "stage": args.stage, "verbatim": args.verbatim}
    report = validate_network(spec)
    print(f"{spec.name} (stage {spec.stage}, input {spec.input_shape})")
    print(format_trace(report))
    if args.out:
        payload = {"meta": _meta("validate-gan", resolved, None), "spec": spec.to_json(), "report": report.to_json()}
        _write_json(args.out, payload)
    return 1 if args.strict and not report.ok else 0


def external_objective(command: str, timeout: float | None = None) -> Callable[[np.ndarray], float]:
    """Fitness from a subprocess: candidate as one JSON line on stdin, one real on stdout."""
    argv = shlex.split(command)
    if not argv:
        raise UsageError("--command is empty")

    def objective(x: np.ndarray) -> float:
        line = json.dumps([float(v) for v in x]) + "\n"
        try:
            proc = subprocess.run(argv, input=line, capture_output=True, text=True, timeout=timeout, check=False)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise RebalanceForgeError(f"objective command failed: {exc}") from None
        if proc.returncode != 0:
            raise RebalanceForgeError(f"objective command exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            return float(proc.stdout.strip())
        except ValueError:
            raise RebalanceForgeError(f"objective command printed {proc.stdout.strip()[:80]!r}, expected one number") from None

    return objective


def toy_objective(seed: int, dataset: ToyDatasetConfig | None = None) -> Callable[[np.ndarray], float]:
    """Validation loss on fold 0 of a seeded toy dataset."""
    data = generate_toy_dataset(dataset or ToyDatasetConfig(seed=seed))
    manifest = Manifest.from_records(r.as_manifest_record() for r in data)
    fold = plan_folds(manifest, 10, 0.15, seed).folds[0]

    def objective(x: np.ndarray) -> float:
        return pipeline_objective(data, (fold.train, fold.val), Hyperparameters.from_vector(x), seed=seed)

    return objective


def cmd_optimize(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    seed = resolve_seed(args.seed, raw.get("seed"))
    with _domain("SMA config"):
        # the hyperparameter box is the default only when the file sets no bounds of its own
        base = {} if {"lower_bounds", "upper_bounds"} & set(raw) else SmaConfig.hyperparameter_box().to_json()
        config = SmaConfig.from_json({**base, **raw, "seed": seed})
    if args.objective == "toy":
        if config.dim != 3:
            raise RebalanceForgeError("the toy objective searches (learning_rate, dropout_rate, siir): need 3 bounds")
        objective = toy_objective(seed)
    else:
        if not args.command:
            raise UsageError("--objective external-command needs --command")
        objective = external_objective(args.command, args.timeout)

    def report(epoch: int, best: float) -> None:
        logger.info("epoch %d best %.6g", epoch, best)

    result = optimize(objective, config, report)
    print(f"best fitness {result.best_fitness:.6g} after {result.evaluations} evaluations")
    print("best position " + " ".join(f"{v:.6g}" for v in result.best_position))
    for w in result.warnings:
        print(f"warning: {w}")
    resolved = {"sma": config.to_json(), "objective": args.objective, "command": args.command}
    out = Path(args.out)
    _write_json(out, {"meta": _meta("optimize", resolved, seed), **result.to_json()})
    from rebalance_forge.plotting import plot_convergence

    _save_figure(args, out, "convergence", lambda p: plot_convergence(result.history, p, "SMA convergence"))
    return 0


def cmd_evaluate(args) -> int:
    rows = load_predictions(args.predictions)
    summary, matrices = evaluate_predictions(rows, args.labels.split(",") if args.labels else None)
    print(f"{len(matrices)} fold(s), labels {', '.join(summary.labels)}")
    print(summary.format())
    out = Path(args.out)
    resolved = {"predictions": args.predictions, "labels": list(summary.labels)}
    _write_json(out, {"meta": _meta("evaluate", resolved, None), **summary.to_json()})
    from rebalance_forge.plotting import plot_confusion

    _save_figure(args, out, "confusion", lambda p: plot_confusion(summary.normalized_matrix, summary.labels, p))
    return 0


def cmd_toy_run(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    with _domain("toy config"):
        config = ToyRunConfig.from_json(raw)
    seed = resolve_seed(args.seed, raw.get("seed"))
    if seed != config.seed:
        # one seed drives data, folds and search
        config = replace(config, seed=seed, dataset=replace(config.dataset, seed=seed), sma=replace(config.sma, seed=seed))
    result = run_toy_experiment(config)
    hp = result.tuned_hp
    print(f"tuned: lr {hp.learning_rate:.3g}  dropout {hp.dropout_rate:.3f}  siir {hp.siir:.3f}")
    print(f"injected on fold 0: {result.injection}")
    print("tuned    " + result.tuned.format())
    print("baseline " + result.baseline.format())
    out = Path(args.out)
    _write_json(out, {"meta": _meta("toy run", config.to_json(), config.seed), **result.to_json()})
    from rebalance_forge.plotting import plot_confusion, plot_convergence, plot_metric_comparison

    labels = result.tuned.labels
    _save_figure(args, out, "tuned-confusion", lambda p: plot_confusion(result.tuned.normalized_matrix, labels, p, "tuned + injection"))
    _save_figure(args, out, "baseline-confusion", lambda p: plot_confusion(result.baseline.normalized_matrix, labels, p, "baseline"))
    _save_figure(args, out, "convergence", lambda p: plot_convergence(result.optimization.history, p, "validation loss"))
    bars = {
        name: {m: (s.mean[m], s.std[m]) for m in s.mean}
        for name, s in (("tuned", result.tuned), ("baseline", result.baseline))
    }
    _save_figure(args, out, "metrics", lambda p: plot_metric_comparison(bars, p))
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rebalance-forge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("stats", help="label frequencies and ratios of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--source", choices=("real", "synthetic", "all"), default="all")
    p.add_argument("--out", help="also write the table as JSON")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("plan-injection", help="per-label synthetic counts for a target ratio")
    p.add_argument("--manifest", required=True)
    p.add_argument("--siir", type=float, required=True, help="synthetic share of the combined set, in [0, 1)")
    p.add_argument("--tune", action="append", default=[], metavar="LABEL=A", help="per-label weight factor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_injection)

    p = sub.add_parser("plan-folds", help="stratified k-fold plan with train/val splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--val-ratio", type=float, default=0.15)
    p.add_argument("--seed", type=int)
    p.add_argument("--plan", help="injection plan JSON selecting synthetic records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan_folds)

    p = sub.add_parser("validate-gan", help="shape-trace a generator or critic spec")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="NetworkSpec JSON")
    src.add_argument("--builtin", choices=("generator", "critic"))
    p.add_argument("--stage", type=int, default=6)
    p.add_argument("--verbatim", action="store_true", help="use the layer tables as printed")
    p.add_argument("--strict", action="store_true", help="exit 1 when findings are reported")
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate_gan)

    p = sub.add_parser("optimize", help="slime mould search over a bounded box")
    p.add_argument("--config", help="SMA config JSON (defaults to the 3-D hyperparameter box)")
    p.add_argument("--objective", choices=("toy", "external-command"), default="toy")
    p.add_argument("--command", help="objective program for external-command")
    p.add_argument("--timeout", type=float, help="seconds per external evaluation")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="cross-validated metrics from a predictions CSV")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", help="comma-separated label order")
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("toy", help="desk-scale end-to-end demo")
    toy_sub = p.add_subparsers(dest="toy_command", metavar="action")
    run = toy_sub.add_parser("run", help="generate, tune, cross-validate and compare with the baseline")
    run.add_argument("--config", help="toy run config JSON")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", required=True)
    run.add_argument("--no-figures", action="store_true")
    run.set_defaults(func=cmd_toy_run)
    p.set_defaults(func=None, parser=p)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        (getattr(args, "parser", None) or parser).print_usage(sys.stderr)
        print("error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RebalanceForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
