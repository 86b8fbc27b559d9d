"""Experiment command line: ``generate``, ``run``, ``sweep``, ``ablate`` and ``inspect``.

An experiment is described by a JSON file with three top-level keys:

``dataset``
    ``{"kind": "synthetic" | "ihdp_like" | "planted" | "csv" | "dir", "seed": 0, ...}``.
    Generator keyword arguments sit next to ``kind``; ``csv`` needs ``path`` and
    ``dir`` points at the output of ``generate`` (fixed train/dev/test files).
``train``
    Any :class:`~subgroupte.training.TrainConfig` field. ``"K": "auto"`` picks K
    in 1..10 by dev factual MSE for every trial.
``n_seeds``
    Number of trials. Trial ``s`` uses seed ``seed + s`` for the split and the
    network; the dataset itself is generated once from ``dataset.seed``.

Every run directory holds ``manifest.json`` (resolved spec, seed and spec hash),
``metrics.json`` (deterministic), ``trace.csv``, ``checkpoint.json``,
``assignments.csv`` and ``record.json`` (the only file with wall-clock time).
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, clustering
from .clustering import CentroidSet
from .data import (
    Dataset, IngestionError, SizeError, Standardizer, generate_ihdp_like, generate_planted,
    generate_synthetic, load_external_csv, split_6_2_2, write_csv,
)
from .model import load_checkpoint, save_checkpoint
from .nn import ConfigurationError, DimensionError, RngStream
from .training import (
    NumericalError, OutcomeScaler, TrainConfig, TrainResult, select_k, train, write_trace_csv,
)

log = logging.getLogger("subgroupte")

OUT_ENV = "SUBGROUPTE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_KEYS = ("pehe", "eps_ate", "v_within", "v_across", "factual_mse")
COEFFICIENTS = ("alpha", "beta", "gamma")

GENERATORS = {
    "synthetic": (generate_synthetic, {"n_case": 500, "n_control": 500, "p": 10, "confounded": False}),
    "ihdp_like": (generate_ihdp_like, {"n_case": 139, "n_control": 608}),
    "planted": (generate_planted, {"n": 1000, "p": 10, "effects": [-2.0, 1.0, 4.0], "noise": 0.5}),
}


def default_spec() -> dict:
    return {
        "dataset": {"kind": "synthetic", "seed": 0},
        "train": asdict(TrainConfig()),
        "n_seeds": 1,
    }


def spec_hash(spec: dict) -> str:
    """sha256 of canonical JSON, so key order in the file does not matter."""
    blob = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def validate_spec(spec: dict) -> dict:
    unknown = set(spec) - {"dataset", "train", "n_seeds", "sweep", "seed"}
    if unknown:
        raise ConfigurationError(f"unknown spec keys: {sorted(unknown)}")
    if int(spec.get("n_seeds", 1)) < 1:
        raise ConfigurationError("n_seeds must be >= 1")
    kind = spec["dataset"].get("kind")
    if kind not in (*GENERATORS, "csv", "dir"):
        raise ConfigurationError(f"unknown dataset kind {kind!r}")
    trc = dict(spec["train"])
    if trc.get("K") == "auto":
        trc["K"] = 1
    TrainConfig.from_dict(trc)
    return spec


# -- datasets -----------------------------------------------------------------

def build_dataset(ds_spec: dict) -> Dataset:
    kind = ds_spec["kind"]
    seed = int(ds_spec.get("seed", 0))
    if kind in GENERATORS:
        fn, defaults = GENERATORS[kind]
        unknown = set(ds_spec) - set(defaults) - {"kind", "seed"}
        if unknown:
            raise ConfigurationError(f"unknown options for {kind}: {sorted(unknown)}")
        kwargs = {k: ds_spec.get(k, v) for k, v in defaults.items()}
        if "effects" in kwargs:
            kwargs["effects"] = tuple(kwargs["effects"])
        return fn(rng=RngStream(seed), **kwargs)
    if kind == "csv":
        if "path" not in ds_spec:
            raise ConfigurationError("csv dataset needs a 'path'")
        return load_external_csv(ds_spec["path"], rng=RngStream(seed))
    raise ConfigurationError(f"dataset kind {kind!r} cannot be built in memory")


def trial_splits(ds_spec: dict, trial_seed: int, data: Dataset | None):
    """``(train, dev, test)`` for one trial."""
    if ds_spec["kind"] == "dir":
        root = Path(ds_spec["path"])
        return tuple(load_external_csv(root / f"{name}.csv") for name in ("train", "dev", "test"))
    tr, dv, te = split_6_2_2(data, RngStream(trial_seed).child("split"))
    return data.subset(tr), data.subset(dv), data.subset(te)


def order_digest(parts) -> str:
    h = hashlib.sha256()
    for d in parts:
        h.update(np.ascontiguousarray(d.X).tobytes())
        h.update(np.ascontiguousarray(d.t).tobytes())
    return h.hexdigest()


# -- single runs ----------------------------------------------------------------

def _assignments_csv(result: TrainResult, data: Dataset, path) -> None:
    pred = result.predict(data.X)
    K = result.centroids.K
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "hard_subgroup", *[f"v_{k + 1}" for k in range(K)], "pred_te"])
        for i in range(len(data)):
            w.writerow([i, int(pred["label"][i]), *[repr(float(x)) for x in pred["v"][i]],
                        repr(float(pred["te"][i]))])


def save_result(result: TrainResult, path) -> None:
    save_checkpoint(path, result.net, result.centroids, {
        "standardizer": result.standardizer.to_dict(),
        "y_scaler": asdict(result.y_scaler),
        "train_config": asdict(result.config),
    })


def load_result(path) -> TrainResult:
    net, cs, extra = load_checkpoint(path)
    if cs is None:
        cs = CentroidSet(np.zeros(net.config.K), 1.0, False)
    cfg = TrainConfig.from_dict(extra.get("train_config", {"K": net.config.K}))
    std = (Standardizer.from_dict(extra["standardizer"]) if "standardizer" in extra
           else Standardizer(np.zeros(net.config.p), np.ones(net.config.p)))
    ys = OutcomeScaler(**extra.get("y_scaler", {}))
    return TrainResult(net, cs, [], cfg, std, ys)


def run_trial(spec: dict, trial: int, data: Dataset | None, out: Path) -> dict:
    """Train and evaluate one seed; writes the run directory and returns its record."""
    base = int(spec.get("seed", 0))
    seed = base + trial
    out.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(spec)
    resolved["seed"] = base
    manifest = {"spec": resolved, "spec_hash": spec_hash(resolved), "trial": trial, "seed": seed,
                "version": __version__}
    _dump(manifest, out / "manifest.json")
    started = time.perf_counter()
    record = {"spec_hash": manifest["spec_hash"], "seed": seed, "trial": trial,
              "trace_path": "trace.csv", "checkpoint_path": "checkpoint.json",
              "backend": clustering.BACKEND}
    train_d, dev_d, test_d = trial_splits(spec["dataset"], seed, data)
    record["data_digest"] = order_digest((train_d, dev_d, test_d))
    trc = dict(spec["train"], seed=seed)
    chosen = None
    if trc.get("K") == "auto":
        trc["K"] = 1
        chosen, results = select_k(train_d, dev_d, TrainConfig.from_dict(trc))
        result = results[chosen]
    else:
        result = train(train_d, dev_d, TrainConfig.from_dict(trc))
    metrics = {
        "K": result.config.K,
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.trace),
        "test": result.evaluate(test_d).to_dict(),
        "dev": result.evaluate(dev_d).to_dict(),
        "train": result.evaluate(train_d).to_dict(),
    }
    if chosen is not None:
        metrics["auto_k"] = chosen
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_trace_csv(result.trace, out / "trace.csv")
    save_result(result, out / "checkpoint.json")
    _assignments_csv(result, test_d, out / "assignments.csv")
    record["metrics"] = metrics["test"]
    record["wall_clock_s"] = time.perf_counter() - started
    _dump(record, out / "record.json")
    return record


def aggregate(records: list[dict]) -> dict:
    """Mean and population std of each test metric over successful records."""
    ok = [r for r in records if "error" not in r]
    agg = {"n_ok": len(ok), "n_failed": len(records) - len(ok)}
    for key in METRIC_KEYS:
        vals = [r["metrics"][key] for r in ok if r["metrics"].get(key) is not None]
        if vals:
            agg[f"{key}_mean"] = float(np.mean(vals))
            agg[f"{key}_std"] = float(np.std(vals))
        else:
            agg[f"{key}_mean"] = agg[f"{key}_std"] = None
    return agg


_ERRORS = ((NumericalError, EXIT_NUMERIC), (ConfigurationError, EXIT_CONFIG),
           (IngestionError, EXIT_DATA), (SizeError, EXIT_DATA), (clustering.SizeError, EXIT_DATA),
           (DimensionError, EXIT_DATA))


def exit_code_for(exc: BaseException) -> int:
    for cls, code in _ERRORS:
        if isinstance(exc, cls):
            return code
    return 1


def run_experiment(spec: dict, out: Path) -> tuple[dict, list[dict]]:
    """All trials of one spec. Failing trials are recorded and skipped."""
    spec = validate_spec(spec)
    out.mkdir(parents=True, exist_ok=True)
    data = None if spec["dataset"]["kind"] == "dir" else build_dataset(spec["dataset"])
    records = []
    for trial in range(int(spec.get("n_seeds", 1))):
        run_dir = out / f"seed_{trial:03d}"
        try:
            records.append(run_trial(spec, trial, data, run_dir))
        except (NumericalError, ConfigurationError) as exc:
            log.error("trial %d failed: %s", trial, exc)
            rec = {"trial": trial, "seed": int(spec.get("seed", 0)) + trial, "error": str(exc),
                   "error_type": type(exc).__name__, "exit_code": exit_code_for(exc)}
            _dump(rec, run_dir / "record.json")
            records.append(rec)
    agg = aggregate(records)
    agg["spec_hash"] = spec_hash(dict(spec, seed=int(spec.get("seed", 0))))
    _dump(agg, out / "aggregate.json")
    return agg, records


def _worst_exit(records) -> int:
    codes = [r["exit_code"] for r in records if "exit_code" in r]
    return max(codes) if codes else EXIT_OK


# -- sweeps and ablations -------------------------------------------------------

def parse_sweep(text: str) -> tuple[str, list]:
    """``k=1..10``, ``k=2,4,8`` or ``alpha=0,0.25,0.5``."""
    if "=" not in text:
        raise ConfigurationError(f"sweep must look like axis=values, got {text!r}")
    axis, values = text.split("=", 1)
    axis = axis.strip().lower()
    if axis == "k":
        axis = "K"
    if axis not in ("K", *COEFFICIENTS):
        raise ConfigurationError(f"unknown sweep axis {axis!r}")
    try:
        if ".." in values:
            lo, hi = values.split("..")
            if axis != "K":
                raise ConfigurationError("ranges are only supported for K")
            grid = list(range(int(lo), int(hi) + 1))
        else:
            cast = int if axis == "K" else float
            grid = [cast(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad sweep values {values!r}") from exc
    if not grid:
        raise ConfigurationError("sweep grid is empty")
    return axis, grid


def sweep_point_spec(spec: dict, axis: str, value) -> dict:
    s = copy.deepcopy(spec)
    if axis in COEFFICIENTS:
        for c in COEFFICIENTS:
            s["train"][c] = 1.0
    s["train"][axis] = value
    return s


def _dev_separation(records) -> float | None:
    vals = [r["dev_v_across"] - r["dev_v_within"] for r in records
            if r.get("dev_v_across") is not None and r.get("dev_v_within") is not None]
    return float(np.mean(vals)) if vals else None


def run_sweep(spec: dict, axis: str, grid: list, out: Path) -> list[dict]:
    rows = []
    for value in grid:
        point = sweep_point_spec(spec, axis, value)
        agg, records = run_experiment(point, out / f"{axis}_{value}")
        for r in records:
            if "error" not in r:
                with open(out / f"{axis}_{value}" / f"seed_{r['trial']:03d}" / "metrics.json") as fh:
                    dev = json.load(fh)["dev"]
                r["dev_v_across"], r["dev_v_within"] = dev["v_across"], dev["v_within"]
        rows.append({"axis_value": value, **{k: agg[k] for k in agg if k.endswith(("_mean", "_std"))},
                     "dev_separation": _dev_separation(records), "n_ok": agg["n_ok"]})
    cols = ["axis_value"] + [f"{m}_{s}" for m in METRIC_KEYS for s in ("mean", "std")] + ["dev_separation"]
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r[c] for c in cols])
    summary = {"axis": axis, "grid": grid, "rows": rows}
    if axis == "K":
        scored = [r for r in rows if r["dev_separation"] is not None]
        if scored:
            # guidance only: nothing downstream consumes this choice
            summary["k_guidance"] = max(scored, key=lambda r: r["dev_separation"])["axis_value"]
    _dump(summary, out / "sweep_summary.json")
    return rows


def run_ablation(spec: dict, out: Path) -> list[dict]:
    rows = []
    for mode in ("full", "P", "O"):
        s = copy.deepcopy(spec)
        s["train"]["mode"] = mode
        agg, records = run_experiment(s, out / f"mode_{mode}")
        digests = [r.get("data_digest") for r in records]
        rows.append({"mode": mode, **{k: agg[k] for k in agg if k.endswith(("_mean", "_std"))},
                     "n_ok": agg["n_ok"], "data_digests": digests})
    if len({tuple(r["data_digests"]) for r in rows}) != 1:
        raise ConfigurationError("ablation modes did not share the same data order")
    cols = ["mode", "v_within_mean", "v_within_std", "v_across_mean", "v_across_std",
            "pehe_mean", "pehe_std", "eps_ate_mean", "eps_ate_std"]
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r.get(c) is None else r[c] for c in cols])
    return rows


# -- inspection -----------------------------------------------------------------

def feature_ratios(X, labels, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-subgroup feature means and their share across subgroups.

    Returns ``(means [K, p], ratios [K, p])``. Empty subgroups get NaN rows and
    are left out of the normalisation; a feature whose means sum to zero has
    NaN ratios.
    """
    X = np.asarray(X, dtype=np.float64)
    means = np.full((K, X.shape[1]), np.nan)
    for k in range(K):
        if (labels == k).any():
            means[k] = X[labels == k].mean(axis=0)
    total = np.nansum(means, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratios = np.where(total != 0, means / total, np.nan)
    return means, ratios


def inspect(checkpoint, data_path, out: Path) -> dict:
    result = load_result(checkpoint)
    data = load_external_csv(data_path)
    if data.p != result.net.config.p:
        raise ConfigurationError(f"checkpoint expects p={result.net.config.p}, data has p={data.p}")
    out.mkdir(parents=True, exist_ok=True)
    K = result.centroids.K
    _assignments_csv(result, data, out / "inspect_assignments.csv")
    labels = result.predict(data.X)["label"]
    means, ratios = feature_ratios(data.X, labels, K)
    with open(out / "feature_ratios.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subgroup", "count", *[f"mean_f{j}" for j in range(data.p)],
                    *[f"ratio_f{j}" for j in range(data.p)]])
        for k in range(K):
            cells = [("" if math.isnan(v) else repr(float(v))) for v in (*means[k], *ratios[k])]
            w.writerow([k, int((labels == k).sum()), *cells])
    return {"K": K, "counts": np.bincount(labels, minlength=K).tolist()}


# -- argument handling ------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc


def resolve_spec(args) -> dict:
    spec = _merge(default_spec(), _load_config(getattr(args, "config", None)))
    if getattr(args, "seed", None) is not None:
        spec["seed"] = args.seed
    if getattr(args, "n_seeds", None) is not None:
        spec["n_seeds"] = args.n_seeds
    tr = spec["train"]
    if getattr(args, "mode", None):
        tr["mode"] = args.mode
    if getattr(args, "k", None) is not None:
        tr["K"] = "auto" if args.k == "auto" else int(args.k)
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    for c in COEFFICIENTS:
        if getattr(args, c, None) is not None:
            tr[c] = getattr(args, c)
    if getattr(args, "data", None) and args.command != "inspect":
        spec["dataset"] = {"kind": "dir" if Path(args.data).is_dir() else "csv", "path": args.data}
    return validate_spec(spec)


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subgroupte", description="Subgroup-informed treatment effect experiments.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON experiment spec")
        sp.add_argument("--seed", type=int, help="base seed for splits and training")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")

    def training(sp):
        sp.add_argument("--mode", choices=("full", "O", "P"))
        sp.add_argument("--k", help="number of subgroups, or 'auto'")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--beta", type=float)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--n-seeds", type=int, dest="n_seeds")
        sp.add_argument("--data", help="CSV file or generated dataset directory")

    g = sub.add_parser("generate", help="write train/dev/test CSVs")
    common(g)
    for name in ("run", "sweep", "ablate"):
        sp = sub.add_parser(name)
        common(sp)
        training(sp)
    sub.choices["sweep"].add_argument("--sweep", required=True, help="k=1..10 or alpha=0,0.5,1")
    i = sub.add_parser("inspect", help="export subgroup assignments for a checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True, help="CSV with the same feature columns")
    i.add_argument("--out")
    return p


def cmd_generate(args) -> int:
    spec = resolve_spec(args)
    ds_spec = spec["dataset"]
    data = build_dataset(ds_spec)
    out = _out_dir(args, "data")
    out.mkdir(parents=True, exist_ok=True)
    seed = int(spec.get("seed", 0))
    parts = split_6_2_2(data, RngStream(seed).child("split"))
    for name, idx in zip(("train", "dev", "test"), parts):
        write_csv(data.subset(idx), out / f"{name}.csv")
    manifest = {"dataset": ds_spec, "seed": seed, "sizes": [len(i) for i in parts],
                "generator": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                              for k, v in data.extra.items() if k != "group"},
                "version": __version__}
    manifest["spec_hash"] = spec_hash({"dataset": ds_spec, "seed": seed})
    _dump(manifest, out / "manifest.json")
    print(f"wrote {', '.join(str(len(i)) for i in parts)} rows to {out}")
    return EXIT_OK


def _fmt_agg(agg: dict) -> str:
    parts = []
    for k in METRIC_KEYS:
        if agg.get(f"{k}_mean") is not None:
            parts.append(f"{k}={agg[f'{k}_mean']:.4f}±{agg[f'{k}_std']:.4f}")
    return " ".join(parts)


def cmd_run(args) -> int:
    spec = resolve_spec(args)
    out = _out_dir(args, "run")
    agg, records = run_experiment(spec, out)
    print(f"{agg['n_ok']}/{len(records)} seeds ok  {_fmt_agg(agg)}")
    return _worst_exit(records)


def cmd_sweep(args) -> int:
    spec = resolve_spec(args)
    axis, grid = parse_sweep(args.sweep)
    out = _out_dir(args, "sweep")
    rows = run_sweep(spec, axis, grid, out)
    for r in rows:
        print(f"{axis}={r['axis_value']}: {_fmt_agg(r)}")
    if axis == "K":
        with open(out / "sweep_summary.json") as fh:
            hint = json.load(fh).get("k_guidance")
        if hint is not None:
            print(f"largest dev V_across - V_within at K={hint} (guidance only)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = resolve_spec(args)
    rows = run_ablation(spec, _out_dir(args, "ablate"))
    for r in rows:
        print(f"{r['mode']:>4}: {_fmt_agg(r)}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    out = Path(args.out) if args.out else _out_dir(args, "inspect")
    summary = inspect(args.checkpoint, args.data, out)
    print(f"K={summary['K']} subgroup sizes {summary['counts']} -> {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
