"""Command-line harness: ``wmdp run``, ``wmdp fit-rate`` and ``wmdp summarize``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bounds import FORMULAS, NUMERIC_TOL
from .experiments import EXPERIMENTS, resolve_params, run_cells
from .mdp import ModelError

SCHEMA_LINE = "# wmdp-results v1"
COLUMNS = ["experiment", "seed", "instance", "size_name", "size", "label", "loss", "excess", "bound", "slack",
           "bound_tag", "bound_inputs", "extra"]
OUTPUT_ENV = "WMDP_OUTPUT_DIR"
DEFAULT_BAND = (-0.65, -0.35)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    output: str
    seeds: tuple
    schedule: tuple
    params: dict
    rate_band: tuple = DEFAULT_BAND


def _seeds(value, where):
    if isinstance(value, dict):
        extra = set(value) - {"start", "count"}
        if extra or "count" not in value:
            raise ConfigError(f"{where}: seeds mapping takes 'count' and optional 'start'")
        seeds = list(range(int(value.get("start", 0)), int(value.get("start", 0)) + int(value["count"])))
    elif isinstance(value, list):
        seeds = value
    else:
        raise ConfigError(f"{where}: seeds must be a list or a {{start, count}} mapping")
    if not seeds:
        raise ConfigError(f"{where}: seed list is empty")
    if not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError(f"{where}: seeds must be nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"{where}: seeds must be distinct")
    return tuple(seeds)


def parse_config(doc) -> tuple[list[ExperimentConfig], str | None]:
    """Validate a loaded config document; returns the experiment list and optional output dir."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(doc) - {"experiments", "output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    entries = doc.get("experiments")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("config needs a nonempty 'experiments' list")
    configs, outputs = [], set()
    for i, entry in enumerate(entries):
        where = f"experiments[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{where} must be a mapping")
        unknown = set(entry) - {"name", "output", "seeds", "schedule", "params", "rate_band"}
        if unknown:
            raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
        name = entry.get("name")
        if name not in EXPERIMENTS:
            raise ConfigError(f"{where}: unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
        schedule = entry.get("schedule")
        if not isinstance(schedule, list) or not schedule:
            raise ConfigError(f"{where}: schedule must be a nonempty list")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in schedule):
            raise ConfigError(f"{where}: schedule entries must be positive numbers")
        if len(set(schedule)) != len(schedule):
            raise ConfigError(f"{where}: schedule entries must be distinct")
        try:
            params = resolve_params(name, entry.get("params") or {})
        except ModelError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        band = entry.get("rate_band", list(DEFAULT_BAND))
        if not (isinstance(band, list) and len(band) == 2 and band[0] <= band[1]):
            raise ConfigError(f"{where}: rate_band must be [low, high]")
        output = str(entry.get("output", name))
        if output in outputs:
            raise ConfigError(f"{where}: output name {output!r} used twice")
        outputs.add(output)
        configs.append(ExperimentConfig(name, output, _seeds(entry.get("seeds"), where), tuple(schedule),
                                        params, (float(band[0]), float(band[1]))))
    return configs, doc.get("output_dir")


def load_config(path):
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return doc


def config_hash(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def fit_rate(ns, errors):
    """Least-squares slope, intercept and r^2 of log(error) against log(n)."""
    ns = np.asarray(ns, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if ns.shape != errors.shape or ns.ndim != 1:
        raise ValueError("ns and errors must be 1-D arrays of equal length")
    if ns.size < 3:
        raise ValueError("need at least three points to fit a rate")
    if np.any(ns <= 0) or np.any(errors <= 0) or not np.all(np.isfinite(errors)):
        raise ValueError("rate fitting needs positive finite inputs")
    x, y = np.log(ns), np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / total if total > 0 else 1.0
    return float(slope), float(intercept), r2


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _cell_job(args):
    name, params, seeds, size = args
    start = time.perf_counter()
    rows = run_cells(name, params, seeds, size)
    return args, rows, time.perf_counter() - start


def _tasks(configs, jobs):
    """Work items; batched experiments get their seeds split into ``jobs`` groups."""
    tasks = []
    for cfg in configs:
        for size in cfg.schedule:
            if EXPERIMENTS[cfg.name].batched:
                groups = [list(g) for g in np.array_split(np.array(cfg.seeds), min(jobs, len(cfg.seeds)))]
                tasks.extend((cfg.name, cfg.params, [int(s) for s in g], size) for g in groups)
            else:
                tasks.extend((cfg.name, cfg.params, [seed], size) for seed in cfg.seeds)
    return tasks


def _row_record(cfg: ExperimentConfig, row):
    rep = row.report
    return {
        "experiment": cfg.name,
        "seed": row.seed,
        "instance": row.instance,
        "size_name": EXPERIMENTS[cfg.name].size_name,
        "size": float(row.size),
        "label": row.label,
        "loss": float(row.loss),
        "excess": None if row.excess is None else float(row.excess),
        "bound": None if rep is None else float(rep.value),
        "slack": None if rep is None else float(rep.margin),
        "bound_tag": "" if rep is None else rep.tag,
        "bound_inputs": "" if rep is None else json.dumps({**rep.inputs, "allowance": rep.slack}, sort_keys=True),
        "extra": json.dumps(row.extra, sort_keys=True),
        "_violated": row.violated,
    }


def write_csv(path, records):
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COLUMNS)
        for rec in records:
            writer.writerow([_fmt(rec[c]) for c in COLUMNS])


def read_csv(path):
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != SCHEMA_LINE:
            raise ConfigError(f"{path}: unsupported header {first!r}")
        return list(csv.DictReader(fh))


def _value(rec, column):
    if column in rec and column not in ("extra", "bound_inputs"):
        return float(rec[column])
    extra = json.loads(rec["extra"]) if rec.get("extra") else {}
    if column in extra:
        return float(extra[column])
    raise ConfigError(f"no column or extra field named {column!r}")


def mean_by_size(records, column, label=None):
    groups = {}
    for rec in records:
        if label is not None and rec["label"] != label:
            continue
        groups.setdefault(float(rec["size"]), []).append(_value(rec, column))
    sizes = sorted(groups)
    return sizes, [float(np.mean(groups[s])) for s in sizes]


def evaluate(cfg_name, records, rate_on, monotone, band):
    """Pass/fail verdict for one experiment's rows."""
    violations = sum(1 for r in records if _recheck(r) is False)
    verdict = {"experiment": cfg_name, "rows": len(records), "violations": violations}
    ok = violations == 0
    if rate_on is not None:
        sizes, means = mean_by_size(records, rate_on)
        try:
            slope, intercept, r2 = fit_rate(sizes, means)
        except ValueError as exc:
            verdict.update(rate_on=rate_on, rate_error=str(exc))
            ok = False
        else:
            in_band = band[0] <= slope <= band[1]
            verdict.update(rate_on=rate_on, sizes=sizes, means=means, slope=slope, intercept=intercept,
                           r2=r2, band=list(band), slope_in_band=in_band)
            ok = ok and in_band
    if monotone:
        sizes, means = mean_by_size(records, "loss")
        steps = [b - a for a, b in zip(means, means[1:])]
        mono = all(d <= 1e-8 for d in steps)
        verdict.update(sizes=sizes, means=means, monotone=mono)
        ok = ok and mono
    ratios = [_value(r, "slack_ratio") for r in records if "slack_ratio" in (r.get("extra") or "")]
    if ratios:
        verdict["median_slack_ratio"] = float(np.median(ratios))
    verdict["pass"] = bool(ok)
    return verdict


def _recheck(rec):
    """Recompute a row's bound from its stored inputs; None for rows without a bound."""
    if not rec.get("bound_tag"):
        return None
    inputs = json.loads(rec["bound_inputs"])
    allowance = inputs.pop("allowance", 0.0)
    value = float(sum(FORMULAS[rec["bound_tag"]](**inputs).values()))
    if abs(value - float(rec["bound"])) > 1e-12 * max(1.0, abs(value)):
        return False
    return float(rec["loss"]) <= value + allowance + NUMERIC_TOL * (1 + abs(value))


def run(configs, out_dir, jobs=1, doc_hash="", log=None):
    """Run every configured experiment; returns the summary document."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = _tasks(configs, jobs)
    results, timings = {}, {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_cell_job, tasks, chunksize=1))
    else:
        done = [_cell_job(args) for args in tasks]
    # collect in a fixed order regardless of which worker finished first
    for (name, params, seeds, size), rows, seconds in done:
        for seed in seeds:
            results[_task_key((name, params, seed, size))] = rows[seed]
        timings.setdefault(_task_key((name, params, 0, 0))[:2], []).append((" ".join(map(str, seeds)), size, seconds))
    summary = {"version": __version__, "schema": SCHEMA_LINE[2:], "config_hash": doc_hash, "experiments": {}}
    for cfg in configs:
        records = []
        for seed in sorted(cfg.seeds):
            for size in sorted(cfg.schedule):
                rows = results[_task_key((cfg.name, cfg.params, seed, size))]
                records.extend(_row_record(cfg, r) for r in sorted(rows, key=lambda r: r.label))
        write_csv(out_dir / f"{cfg.output}.csv", records)
        with open(out_dir / f"{cfg.output}.runtime.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["seeds", "size", "seconds"])
            writer.writerows((s, repr(float(z)), f"{t:.6f}") for s, z, t in timings.get(_task_key((cfg.name, cfg.params, 0, 0))[:2], []))
        spec = EXPERIMENTS[cfg.name]
        rows_as_read = [{k: _fmt(v) for k, v in r.items() if not k.startswith("_")} for r in records]
        verdict = evaluate(cfg.name, rows_as_read, spec.rate_on, spec.monotone, cfg.rate_band)
        verdict["params"] = cfg.params
        summary["experiments"][cfg.output] = verdict
        bad = [r for r in records if r["_violated"]]
        if bad:
            log = log or sys.stderr
            print(f"{cfg.output}: {len(bad)} bound violation(s)", file=log)
            for r in bad:
                print(json.dumps({k: v for k, v in r.items() if not k.startswith("_")}, sort_keys=True), file=log)
    summary["pass"] = all(v["pass"] for v in summary["experiments"].values())
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def _task_key(args):
    name, params, seed, size = args
    return name, json.dumps(params, sort_keys=True), seed, float(size)


def summarize(directory):
    """Re-check every results CSV in a directory; returns one verdict per file."""
    directory = Path(directory)
    verdicts = {}
    for path in sorted(directory.glob("*.csv")):
        if path.name.endswith(".runtime.csv"):
            continue
        records = read_csv(path)
        if not records:
            continue
        name = records[0]["experiment"]
        spec = EXPERIMENTS.get(name)
        if spec is None:
            raise ConfigError(f"{path}: unknown experiment {name!r}")
        verdicts[path.stem] = evaluate(name, records, spec.rate_on, spec.monotone, DEFAULT_BAND)
        verdicts[path.stem]["bound_tags"] = sorted({r["bound_tag"] for r in records if r["bound_tag"]})
    return verdicts


def _print_table(verdicts, stream=None):
    stream = stream or sys.stdout
    header = f"{'output':<26} {'experiment':<24} {'rows':>5} {'viol':>5} {'slope':>8}  result  bounds"
    print(header, file=stream)
    for out, v in verdicts.items():
        slope = f"{v['slope']:.3f}" if "slope" in v else "-"
        tags = ",".join(v.get("bound_tags", [])) or "-"
        print(f"{out:<26} {v['experiment']:<24} {v['rows']:>5} {v['violations']:>5} {slope:>8}  "
              f"{'PASS' if v['pass'] else 'FAIL':<6}  {tags}", file=stream)


def _cmd_run(args):
    doc = load_config(args.config)
    configs, cfg_out = parse_config(doc)
    out = args.out or cfg_out or os.environ.get(OUTPUT_ENV)
    if not out:
        raise ConfigError(f"no output directory: pass --out, set output_dir, or set {OUTPUT_ENV}")
    if args.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    summary = run(configs, out, jobs=args.jobs, doc_hash=config_hash(doc))
    verdicts = dict(summary["experiments"])
    for out_name, v in verdicts.items():
        v["bound_tags"] = sorted({r["bound_tag"] for r in read_csv(Path(out) / f"{out_name}.csv") if r["bound_tag"]})
    _print_table(verdicts)
    return 0 if summary["pass"] else 1


def _cmd_fit_rate(args):
    records = read_csv(args.csv)
    x_col = args.x
    if records and x_col not in records[0] and x_col == records[0]["size_name"]:
        x_col = "size"
    if records and x_col != "size":
        raise ConfigError(f"x column must be 'size' or {records[0]['size_name']!r}")
    sizes, means = mean_by_size(records, args.y, args.label)
    slope, intercept, r2 = fit_rate(sizes, means)
    print(json.dumps({"slope": slope, "intercept": intercept, "r2": r2, "x": sizes, "y": means}, indent=2))
    return 0


def _cmd_summarize(args):
    directory = args.dir or os.environ.get(OUTPUT_ENV)
    if not directory:
        raise ConfigError(f"pass --dir or set {OUTPUT_ENV}")
    verdicts = summarize(directory)
    if not verdicts:
        raise ConfigError(f"no result CSVs in {directory}")
    _print_table(verdicts)
    return 0 if all(v["pass"] for v in verdicts.values()) else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="wmdp", description="Run and check perturbation-bound experiments.")
    parser.add_argument("--version", action="version", version=f"wmdp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run the experiments in a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help=f"output directory (default: config output_dir, then ${OUTPUT_ENV})")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("fit-rate", help="log-log slope of a results column against the schedule")
    p.add_argument("--csv", required=True)
    p.add_argument("--x", default="size")
    p.add_argument("--y", default="loss", help="column or extra field to average per size")
    p.add_argument("--label", help="only rows with this label")
    p.set_defaults(func=_cmd_fit_rate)
    p = sub.add_parser("summarize", help="re-check bounds and rates for a results directory")
    p.add_argument("--dir")
    p.set_defaults(func=_cmd_summarize)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ModelError, ValueError, OSError) as exc:
        print(f"wmdp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
