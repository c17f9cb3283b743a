"""Command-line interface: ``owra <command> ...``.

Exit status is 0 on success, 1 on an internal error and 2 on bad usage or
bad input. Progress goes to stderr; with ``--stdout`` the machine-readable
result goes to stdout.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .evm import EvmHyper, EvmModel, evm_score_stream, evm_train
from .policies import SIGMA_FLOOR, CORR_LIMIT, OndParams, PolicyConfig, Variant, calibrate
from .scores import ScoreFileError, ScoreRecord, format_scores, read_feature_file, read_score_file
from .stats import CalibrationStats, FitMethod
from .testbed import (
    SEED_CALIBRATION,
    SEED_POOLS,
    ExperimentConfig,
    ExperimentResult,
    MetricsSummary,
    NoQualifyingThreshold,
    PoolSource,
    PoolSpec,
    Regime,
    SweepTable,
    auto_grid,
    derive_seed,
    generate_test,
    pools_from_records,
    reliability_score,
    run_experiment,
    select_threshold,
    simulate_runs_parallel,
    sweep_from_traces,
    synth_calibration_records,
    synth_pools,
    traces_of,
)

log = logging.getLogger("owra")

METRIC_COLUMNS = (
    "policy", "unknown_pct", "tolerance", "false_pct", "total_detection_pct",
    "on_time_pct", "late_pct", "mae", "total_accuracy",
)


class UsageError(Exception):
    """Bad arguments or input; maps to exit status 2."""


# --- small I/O helpers ---------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _num(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def _metrics_row(policy: str, pct: int, tol: float, s: MetricsSummary) -> list[str]:
    return [
        policy, str(pct), _num(tol), _num(s.false_detection_pct), _num(s.total_detection_pct),
        _num(s.on_time_pct), _num(s.late_pct), _num(s.mean_abs_error), _num(s.total_accuracy),
    ]


def _csv_text(rows: Sequence[Sequence[str]], header: Sequence[str], root_seed: int | None = None) -> str:
    buf = io.StringIO()
    if root_seed is not None:
        buf.write(f"# root_seed={root_seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _sweep_rows(table: SweepTable, pct: int) -> list[list[str]]:
    return [_metrics_row(table.variant.value, pct, r.tolerance, r.summary) for r in table.rows]


def _write_manifest(out: Path, command: str, root_seed: int, effective: dict, inputs: Sequence[Path]) -> None:
    manifest = {
        "command": command,
        "root_seed": root_seed,
        "config_digest": hashlib.sha256(_canonical(effective).encode()).hexdigest(),
        "tool_version": __version__,
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "effective_config": effective,
        "numerics": {"batch_sigma_floor": SIGMA_FLOOR, "batch_corr_clamp": CORR_LIMIT},
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit(args, text: str) -> None:
    if getattr(args, "stdout", False):
        sys.stdout.write(text)
        sys.stdout.flush()


# --- configuration -------------------------------------------------------

CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)} | {"pool_file", "calibration_file", "unknown_pct"}


def _resolve_seed(flag: int | None, file_value) -> int:
    if flag is not None:
        return flag
    if file_value is not None:
        return int(file_value)
    env = os.environ.get("OWRA_SEED")
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"OWRA_SEED must be an integer, got {env!r}") from None
    return 0


_FIELD_TYPES = {
    "trials": int, "validation_trials": int, "batch_size": int, "seed": int, "validation_pct": int,
    "grid_points": int, "calibration_size": int, "ond_delta": float, "ond_rho_hat": float,
    "regime": str, "fit_method": str, "bivariate_form": str, "tolerances": dict,
}


def _is_type(value, kind) -> bool:
    if isinstance(value, bool):
        return False
    if kind is float:
        return isinstance(value, (int, float))
    if kind is str:
        return isinstance(value, (str, FitMethod))
    return isinstance(value, kind)


def _parse_pcts(text: str) -> tuple[int, ...]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return tuple(out)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    return doc


def build_experiment_config(args) -> tuple[ExperimentConfig, dict]:
    """Merge file values and flags; every problem is reported before any work."""
    doc = _load_config_file(args.config)
    errors = [f"unknown config key {k!r}" for k in sorted(set(doc) - CONFIG_KEYS)]
    values = {k: v for k, v in doc.items() if k in CONFIG_KEYS}

    overrides = {
        "trials": args.trials,
        "batch_size": args.batch_size,
        "validation_trials": getattr(args, "validation_trials", None),
        "regime": getattr(args, "regime", None),
        "pool_file": getattr(args, "pools", None),
        "calibration_file": getattr(args, "calibration", None),
    }
    if args.fit is not None:
        overrides["fit_method"] = args.fit
    if getattr(args, "policies", None):
        overrides["policies"] = [p.strip() for p in args.policies.split(",") if p.strip()]
    if getattr(args, "pcts", None):
        try:
            overrides["unknown_pcts"] = _parse_pcts(args.pcts)
        except ValueError:
            errors.append(f"bad --pcts value {args.pcts!r}")
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        values["seed"] = _resolve_seed(args.seed, values.get("seed"))
    except (UsageError, ValueError) as exc:
        errors.append(str(exc))

    pool_file = values.pop("pool_file", None)
    cal_file = values.pop("calibration_file", None)
    values.pop("unknown_pct", None)
    if "pools" in values:
        try:
            values["pools"] = PoolSpec.from_dict(values["pools"])
        except (KeyError, TypeError, ValueError) as exc:
            errors.append(f"invalid pools section: {exc}")
            values.pop("pools")
    for key in ("policies", "unknown_pcts"):
        if key in values and not isinstance(values[key], (list, tuple)):
            errors.append(f"{key} must be a list")
    for p in values.get("policies", ()) if isinstance(values.get("policies"), (list, tuple)) else ():
        if p not in {v.value for v in Variant}:
            errors.append(f"unknown policy {p!r}; choose from {', '.join(v.value for v in Variant)}")
    for q in values.get("unknown_pcts", ()) if isinstance(values.get("unknown_pcts"), (list, tuple)) else ():
        if not (isinstance(q, int) and 2 <= q <= 25):
            errors.append(f"unknown percentage {q!r} outside the integer range 2..25")
    for path, what in ((pool_file, "pool file"), (cal_file, "calibration file")):
        if path is not None and not Path(path).is_file():
            errors.append(f"{what} not found: {path}")
    for key, kind in _FIELD_TYPES.items():
        if key in values and values[key] is not None and not _is_type(values[key], kind):
            errors.append(f"{key} must be of type {kind.__name__}, got {values[key]!r}")
    if not errors:
        try:
            cfg = ExperimentConfig(**values)
            cfg.test_config(cfg.validation_pct)
        except (TypeError, ValueError) as exc:
            errors.append(str(exc))
    if errors:
        raise UsageError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg, {"pool_file": pool_file, "calibration_file": cal_file}


def _pools_and_calibration(cfg: ExperimentConfig, files: dict):
    inputs = []
    if files["pool_file"]:
        pools = pools_from_records(read_score_file(files["pool_file"]))
        inputs.append(Path(files["pool_file"]))
    else:
        pools = synth_pools(cfg.pools, derive_seed(cfg.seed, SEED_POOLS))
    cal = None
    if files["calibration_file"]:
        cal = CalibrationStats.load(files["calibration_file"])
        inputs.append(Path(files["calibration_file"]))
    return pools, cal, inputs


def _effective(cfg: ExperimentConfig, files: dict, **extra) -> dict:
    d = cfg.to_dict()
    d.update({k: v for k, v in files.items() if v is not None})
    d.update(extra)
    return d


# --- commands ------------------------------------------------------------

def cmd_calibrate(args) -> int:
    records = read_score_file(args.scores)
    cal = calibrate(records, FitMethod.parse(args.fit or "truncated"))
    text = json.dumps(cal.to_dict(), indent=2) + "\n"
    if args.out:
        _atomic_write(Path(args.out), text)
        log.info("wrote %s", args.out)
    _emit(args, text)
    return 0


def cmd_evm_train(args) -> int:
    fs = read_feature_file(args.features)
    if np.any(fs.labels == 0):
        raise UsageError("training features contain label 0 (unknown); remove them before training")
    hyper = EvmHyper(args.tail_size, args.distance_multiplier, args.cover_threshold)
    model = evm_train(fs.features, fs.labels, hyper)
    model.save(args.out)
    log.info("trained %d classes, extreme vectors per class: %s", len(model.classes), model.n_extreme_vectors())
    _emit(args, json.dumps(model.n_extreme_vectors()) + "\n")
    return 0


def cmd_evm_score(args) -> int:
    model = EvmModel.load(args.model)
    fs = read_feature_file(args.features)
    scores = evm_score_stream(model, fs.features)
    if args.softmax:
        base = read_score_file(args.softmax)
        by_id = dict(zip(fs.sample_ids, zip(scores, fs.labels)))
        missing = [r.sample_id for r in base if r.sample_id not in by_id]
        if missing:
            raise UsageError(f"{len(missing)} SoftMax rows have no feature row, e.g. {missing[0]!r}")
        merged = []
        for r in base:
            ev, label = by_id[r.sample_id]
            flag = r.is_unknown if r.is_unknown is not None else bool(label == 0)
            merged.append(ScoreRecord(r.sample_id, r.max_softmax, float(ev), flag))
        text = format_scores(merged)
    else:
        text = _csv_text([[sid, repr(float(v))] for sid, v in zip(fs.sample_ids, scores)], ("sample_id", "max_evm"))
    if args.out:
        _atomic_write(Path(args.out), text)
    _emit(args, text)
    return 0


def cmd_gen_tests(args) -> int:
    cfg, files = build_experiment_config(args)
    out = Path(args.out)
    pools, _, inputs = _pools_and_calibration(cfg, files)
    tcfg = cfg.test_config(args.unknown_pct)
    written = []
    for t in range(cfg.trials):
        name = f"test_p{args.unknown_pct:02d}_t{t:05d}.csv"
        _atomic_write(out / name, format_scores(generate_test(tcfg, pools, t)))
        written.append(name)
    _write_manifest(out, "gen-tests", cfg.seed, _effective(cfg, files, unknown_pct=args.unknown_pct), inputs)
    log.info("wrote %d test files to %s", len(written), out)
    _emit(args, "\n".join(written) + "\n")
    return 0


def write_run_outputs(out: Path, result: ExperimentResult, effective: dict, inputs, with_trials: bool = True) -> None:
    cfg = result.config
    metrics, sweeps, val_sweeps, trial_lines = [], [], [], []
    for pct in cfg.unknown_pcts:
        for po in result.policies:
            metrics.append(_metrics_row(po.variant.value, pct, po.tolerance, po.metrics[pct]))
    for po in result.policies:
        for pct in cfg.unknown_pcts:
            sweeps.extend(_sweep_rows(po.sweeps[pct], pct))
        if po.validation_sweep is not None:
            val_sweeps.extend(_sweep_rows(po.validation_sweep, cfg.validation_pct))
        if with_trials:
            for pct in cfg.unknown_pcts:
                for t, run in enumerate(po.runs[pct]):
                    rec = {"unknown_pct": pct, "trial": t}
                    rec.update(run.to_dict(po.config))
                    trial_lines.append(json.dumps(rec))
    _atomic_write(out / "metrics.csv", _csv_text(metrics, METRIC_COLUMNS, cfg.seed))
    _atomic_write(out / "sweep.csv", _csv_text(sweeps, METRIC_COLUMNS, cfg.seed))
    _atomic_write(out / "validation_sweep.csv", _csv_text(val_sweeps, METRIC_COLUMNS, cfg.seed))
    _atomic_write(out / "calibration.json", json.dumps(result.calibration.to_dict(), indent=2) + "\n")
    _atomic_write(
        out / "tolerances.json",
        json.dumps({po.variant.value: po.tolerance for po in result.policies}, indent=2) + "\n",
    )
    if with_trials:
        _atomic_write(out / "trials.jsonl", "\n".join(trial_lines) + "\n")
    _write_manifest(out, "run", cfg.seed, effective, inputs)


def cmd_run(args) -> int:
    cfg, files = build_experiment_config(args)
    pools, cal, inputs = _pools_and_calibration(cfg, files)
    result = run_experiment(cfg, pools, cal, jobs=args.jobs, log=log.info)
    out = Path(args.out)
    write_run_outputs(out, result, _effective(cfg, files), inputs, with_trials=not args.no_trials)
    log.info("wrote results to %s", out)
    if args.stdout:
        _emit(args, (out / "metrics.csv").read_text(encoding="utf-8"))
    return 0


def _parse_grid(text: str) -> list[float] | None:
    if text == "auto":
        return None
    try:
        if ":" in text:
            start, stop, num = text.split(":")
            return [float(v) for v in np.linspace(float(start), float(stop), int(num))]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}; use auto, a comma list, or start:stop:count") from None


def cmd_sweep(args) -> int:
    cfg, files = build_experiment_config(args)
    try:
        variant = Variant(args.policy)
    except ValueError:
        raise UsageError(f"unknown policy {args.policy!r}") from None
    grid = _parse_grid(args.grid)
    if grid is not None and not grid:
        raise UsageError("empty grid")
    pools, cal, inputs = _pools_and_calibration(cfg, files)
    if cal is None:
        if pools.source is PoolSource.SYNTHETIC:
            cal_records = synth_calibration_records(cfg.pools, cfg.calibration_size, derive_seed(cfg.seed, SEED_CALIBRATION))
        else:
            cal_records = list(pools.known)
        cal = calibrate(cal_records, cfg.fit_method)
    val_cfg = cfg.test_config(cfg.validation_pct, validation=True)
    rho = cfg.ond_rho_hat if cfg.ond_rho_hat is not None else val_cfg.phase1_ratio
    policy = PolicyConfig(variant, 0.0, cal, OndParams(cfg.ond_delta, rho), cfg.bivariate_form)
    log.info("sweeping %s over %d validation trials", variant.value, val_cfg.trials)
    runs = simulate_runs_parallel(val_cfg, pools, [policy], val_cfg.trials, args.jobs)[0]
    traces = traces_of(runs)
    grid = grid if grid is not None else auto_grid(traces, cfg.grid_points)
    table = sweep_from_traces(traces, variant, grid, val_cfg.ground_truth_batch)

    out = Path(args.out)
    _atomic_write(out / "sweep.csv", _csv_text(_sweep_rows(table, cfg.validation_pct), METRIC_COLUMNS, cfg.seed))
    effective = _effective(cfg, files, policy=variant.value, grid=args.grid)
    try:
        chosen = select_threshold(table, cfg.regime)
    except NoQualifyingThreshold as exc:
        _write_manifest(out, "sweep", cfg.seed, effective, inputs)
        raise UsageError(str(exc)) from None
    selected = {
        "policy": variant.value,
        "regime": str(Regime.parse(cfg.regime)),
        "tolerance": chosen,
        "reliability_score": reliability_score(table),
    }
    _atomic_write(out / "selected.json", json.dumps(selected, indent=2) + "\n")
    _write_manifest(out, "sweep", cfg.seed, effective, inputs)
    log.info("selected tolerance %.6g", chosen)
    _emit(args, json.dumps(selected) + "\n")
    return 0


def _read_metric_csv(path: Path) -> list[dict]:
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def cmd_report(args) -> int:
    out = Path(args.dir)
    sweep_path = out / "sweep.csv"
    if not sweep_path.is_file():
        raise UsageError(f"missing inputs in {out}: expected sweep.csv (and metrics.csv) from 'owra run'")
    rows = _read_metric_csv(sweep_path)
    best: dict[tuple[str, int], float] = {}
    for r in rows:
        key = (r["policy"], int(r["unknown_pct"]))
        score = float(r["on_time_pct"]) / 100.0 * float(r["total_detection_pct"]) / 100.0
        best[key] = max(best.get(key, 0.0), score)
    policies = list(dict.fromkeys(p for p, _ in best))
    per_pct = [[p, str(q), _num(s)] for (p, q), s in sorted(best.items(), key=lambda kv: (policies.index(kv[0][0]), kv[0][1]))]
    overall = {p: float(np.mean([s for (pp, _), s in best.items() if pp == p])) for p in policies}
    ranking = sorted(policies, key=lambda p: (-overall[p], p))
    rank_rows = [[str(i + 1), p, _num(overall[p])] for i, p in enumerate(ranking)]
    _atomic_write(out / "reliability_by_pct.csv", _csv_text(per_pct, ("policy", "unknown_pct", "reliability_score")))
    text = _csv_text(rank_rows, ("rank", "policy", "reliability_score"))
    _atomic_write(out / "reliability.csv", text)
    for line in text.splitlines():
        log.info("%s", line)
    _emit(args, text)
    return 0


# --- parser --------------------------------------------------------------

def _add_experiment_flags(p: argparse.ArgumentParser, *, with_policies: bool = True) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="root seed (falls back to the config, then $OWRA_SEED, then 0)")
    p.add_argument("--trials", type=int, help="trials per unknown percentage")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--fit", choices=["raw", "truncated"], help="moment fit for calibration and batches")
    p.add_argument("--pools", help="score CSV with is_unknown flags to sample tests from")
    p.add_argument("--calibration", help="calibration JSON (default: fitted on known scores)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--stdout", action="store_true", help="print the machine-readable result")
    if with_policies:
        p.add_argument("--policies", help="comma list of mean-softmax,kl-softmax,kl-evm,ond,bikl")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owra", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")
    # -q is also accepted after the subcommand; SUPPRESS keeps it from resetting the top-level value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(group, name, **kw):
        return group.add_parser(name, parents=[common], **kw)

    p = add(sub, "calibrate", help="fit reference score distributions")
    p.add_argument("scores")
    p.add_argument("--fit", choices=["raw", "truncated"], default="truncated")
    p.add_argument("--out")
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    evm = add(sub, "evm", help="train or apply an Extreme Value Machine")
    evm_sub = evm.add_subparsers(dest="evm_command", required=True)
    p = add(evm_sub, "train")
    p.add_argument("features")
    p.add_argument("--out", required=True)
    p.add_argument("--tail-size", type=int, default=33998)
    p.add_argument("--distance-multiplier", type=float, default=0.45)
    p.add_argument("--cover-threshold", type=float, default=0.7)
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(func=cmd_evm_train)
    p = add(evm_sub, "score")
    p.add_argument("model")
    p.add_argument("features")
    p.add_argument("--softmax", help="score CSV whose max_evm column is replaced")
    p.add_argument("--out")
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(func=cmd_evm_score)

    p = add(sub, "gen-tests", help="write generated test streams as score CSVs")
    _add_experiment_flags(p, with_policies=False)
    p.add_argument("--unknown-pct", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_tests)

    p = add(sub, "run", help="select tolerances and evaluate policies over unknown percentages")
    _add_experiment_flags(p)
    p.add_argument("--pcts", help="unknown percentages, e.g. 2-25 or 5,10,20")
    p.add_argument("--validation-trials", type=int)
    p.add_argument("--regime", help="max-true-detection | max-total-accuracy | false-cap:<pct>")
    p.add_argument("--no-trials", action="store_true", help="skip the per-trial JSONL file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = add(sub, "sweep", help="tolerance sweep on validation tests")
    _add_experiment_flags(p, with_policies=False)
    p.add_argument("--policy", required=True)
    p.add_argument("--grid", default="auto", help="auto, a comma list, or start:stop:count")
    p.add_argument("--regime", default=None)
    p.add_argument("--validation-trials", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = add(sub, "report", help="reliability scores and ranking from a run directory")
    p.add_argument("dir")
    p.add_argument("--stdout", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="owra: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    # one line per warning, without the source excerpt
    warnings.formatwarning = lambda message, category, *_a, **_k: f"warning: {message}"
    logging.captureWarnings(True)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"owra: error: {exc}", file=sys.stderr)
        return 2
    except (ScoreFileError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError, ValueError) as exc:
        print(f"owra: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - safety net
        log.exception("internal error")
        print(f"owra: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
