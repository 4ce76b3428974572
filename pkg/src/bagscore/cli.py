"""Batch command-line front end: ``train``, ``compare``, ``density``, ``synthetic``.

Option values are resolved in this order, later winning: built-in defaults
(full-scale settings), ``--preset``, ``--from-manifest``, environment
variables ``BAGSCORE_<OPTION>`` (e.g. ``BAGSCORE_N_NETS=10``), explicit flags.
Every command writes a flat ``key=value`` manifest next to its outputs; values
are JSON literals so a manifest can be fed back through ``--from-manifest``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import KdeConfig, aggregate_mean, aggregate_median, bagging_score, write_density_csv
from .data import (
    SyntheticSpec,
    bundled_concrete_path,
    file_sha256,
    generate_synthetic,
    load_concrete,
    load_csv_dataset,
    parse_gaps,
    train_test_split,
)
from .ensemble import MlpSpec, TrainConfig, load_model, save_model, train_ensemble
from .errors import BagScoreError, InvalidInputError, ModelFormatError
from .metrics import evaluate_aggregators

ENV_PREFIX = "BAGSCORE_"
PRESETS = {
    "full": {},
    "desk": {"n_nets": 100},
}

# dest -> (flag, type, default, help); shared by several commands.
_OPTIONS = {
    "seed": ("--seed", int, 0, "seed of the train/test split or synthetic sample"),
    "out_dir": ("--out-dir", str, "runs", "directory for all outputs"),
    "dataset": ("--dataset", str, None, "CSV file (last column is the target); default: bundled Concrete"),
    "test_fraction": ("--test-fraction", float, 0.1, "held-out test fraction"),
    "n_nets": ("--n-nets", int, 1000, "ensemble size"),
    "seed_base": ("--seed-base", int, 0, "member i is trained with seed seed_base + i"),
    "epochs": ("--epochs", int, 500, "maximum training epochs per member"),
    "learning_rate": ("--learning-rate", float, 1e-3, "Adam step size"),
    "batch_size": ("--batch-size", int, 32, "mini-batch size"),
    "val_fraction": ("--val-fraction", float, 0.3, "per-member validation fraction"),
    "patience": ("--patience", int, 50, "early-stopping patience in epochs"),
    "chunk_size": ("--chunk-size", int, 100, "members trained in lockstep"),
    "jobs": ("--jobs", int, 1, "worker processes for training"),
    "model": ("--model", str, None, "model file; default: OUT_DIR/model.bsm"),
    "grid_divisor": ("--grid-divisor", int, 1000, "density grid step = range / this"),
    "bandwidth_divisor": ("--bandwidth-divisor", float, 6.0, "kernel width = std / this"),
    "window_factor": ("--window-factor", float, 0.5, "window half-width = std * this"),
    "row": ("--row", int, None, "0-based data row of --dataset to query"),
    "x": ("--x", str, None, "comma-separated feature vector to query"),
    "function": ("--function", str, "xsin", "synthetic ground-truth function"),
    "domain": ("--domain", str, "-15:15", "synthetic input interval LOW:HIGH"),
    "n_train": ("--n-train", int, 300, "synthetic training points"),
    "noise_std": ("--noise-std", float, 0.0, "Gaussian target noise"),
    "gaps": ("--gap", str, ["-7.5:-4.5"], "interval LOW:HIGH without training data (repeatable)"),
    "queries": ("--queries", str, None, "comma-separated query inputs; default: points inside the gaps"),
    "n_queries": ("--n-queries", int, 9, "queries per gap when --queries is absent"),
}

_TRAINING = ["n_nets", "seed_base", "epochs", "learning_rate", "batch_size", "val_fraction",
             "patience", "chunk_size", "jobs"]
_KDE = ["grid_divisor", "bandwidth_divisor", "window_factor"]
COMMANDS = {
    "train": ["seed", "out_dir", "model", "dataset", "test_fraction", *_TRAINING],
    "compare": ["out_dir", "model", "dataset", *_KDE],
    "density": ["out_dir", "model", "dataset", "row", "x", *_KDE],
    "synthetic": ["seed", "out_dir", "function", "domain", "n_train", "noise_std", "gaps",
                  "queries", "n_queries", *_TRAINING, *_KDE],
}
# Keys that describe a run rather than configure it.
_RUN_KEYS = {"command", "version", "duration_seconds"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bagscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a seeded MLP ensemble on a train split",
        "compare": "score MEAN, MEDIAN and BS aggregation on the test split",
        "density": "dump the estimated density of one input's predictions",
        "synthetic": "gapped synthetic experiment, errors per aggregator",
    }
    for name, dests in COMMANDS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--preset", choices=sorted(PRESETS), default=argparse.SUPPRESS)
        p.add_argument("--from-manifest", dest="from_manifest", default=argparse.SUPPRESS,
                       help="take option values from an earlier run's manifest")
        for dest in dests:
            flag, typ, default, text = _OPTIONS[dest]
            kwargs = dict(dest=dest, type=typ, default=argparse.SUPPRESS,
                          help=f"{text} (default: {default})")
            if isinstance(default, list):
                kwargs["action"] = "append"
            p.add_argument(flag, **kwargs)
    return parser


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = json.loads(value)
    return out


def write_manifest(path, values: dict) -> None:
    lines = [f"{k}={json.dumps(values[k], sort_keys=True)}" for k in sorted(values)]
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_options(command: str, parsed: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    dests = COMMANDS[command]
    cfg = {d: _OPTIONS[d][2] for d in dests}
    cfg.update({k: v for k, v in PRESETS[parsed.get("preset", "full")].items() if k in cfg})
    if "from_manifest" in parsed:
        manifest = read_manifest(parsed["from_manifest"])
        cfg.update({k: v for k, v in manifest.items() if k in cfg and k not in _RUN_KEYS})
    for d in dests:
        raw = environ.get(ENV_PREFIX + d.upper())
        if raw is None:
            continue
        typ, default = _OPTIONS[d][1], _OPTIONS[d][2]
        try:
            cfg[d] = [typ(v) for v in raw.split(",")] if isinstance(default, list) else typ(raw)
        except ValueError:
            raise InvalidInputError(f"{ENV_PREFIX}{d.upper()}={raw!r} is not a valid {typ.__name__}") from None
    cfg.update({k: v for k, v in parsed.items() if k in cfg})
    cfg["preset"] = parsed.get("preset", "full")
    return cfg


def _kde(cfg) -> KdeConfig:
    return KdeConfig(cfg["grid_divisor"], cfg["bandwidth_divisor"], cfg["window_factor"])


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["epochs"],
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        val_fraction=cfg["val_fraction"],
        patience=cfg["patience"],
    )


def _load_dataset(path: Optional[str]):
    if path is None:
        return load_concrete(), bundled_concrete_path()
    return load_csv_dataset(path), Path(path)


def _model_path(cfg) -> Path:
    return Path(cfg["model"]) if cfg["model"] else Path(cfg["out_dir"]) / "model.bsm"


def _test_split(model, cfg):
    prov = model.provenance
    if "split_seed" not in prov:
        raise ModelFormatError("model file carries no train/test split; retrain with `bagscore train`")
    data, path = _load_dataset(cfg["dataset"])
    digest = file_sha256(path)
    if digest != prov.get("dataset_sha256"):
        raise InvalidInputError(
            f"{path} (sha256 {digest[:12]}...) is not the dataset the model was trained on"
        )
    return train_test_split(data, prov["split_seed"], prov["test_fraction"])[1], path


def cmd_train(cfg) -> dict:
    data, path = _load_dataset(cfg["dataset"])
    train, test = train_test_split(data, cfg["seed"], cfg["test_fraction"])
    spec = MlpSpec(data.input_dim)
    model = train_ensemble(
        spec, cfg["n_nets"], train, _train_config(cfg), seed_base=cfg["seed_base"],
        chunk_size=cfg["chunk_size"], n_jobs=cfg["jobs"],
    )
    model.provenance.update(
        dataset_name=path.name,
        dataset_sha256=file_sha256(path),
        split_seed=cfg["seed"],
        test_fraction=cfg["test_fraction"],
        n_train=train.n_rows,
        n_test=test.n_rows,
    )
    out = _model_path(cfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    print(f"trained {model.n_members} members on {train.n_rows} rows -> {out}")
    return {"dataset_sha256": file_sha256(path), "model_sha256": file_sha256(out),
            "artifacts": [str(out)]}


def cmd_compare(cfg) -> dict:
    mpath = _model_path(cfg)
    model = load_model(mpath)
    test, dpath = _test_split(model, cfg)
    report = evaluate_aggregators(model, test.features, test.targets, _kde(cfg))
    txt, csv = report.write(cfg["out_dir"])
    sys.stdout.write(report.to_text())
    return {"dataset_sha256": file_sha256(dpath), "model_sha256": file_sha256(mpath),
            "artifacts": [str(txt), str(csv)]}


def _query_vector(cfg, input_dim: int) -> np.ndarray:
    if (cfg["row"] is None) == (cfg["x"] is None):
        raise InvalidInputError("give exactly one of --row and --x")
    if cfg["x"] is not None:
        try:
            x = np.array([float(v) for v in cfg["x"].split(",")])
        except ValueError:
            raise InvalidInputError(f"--x {cfg['x']!r} is not a comma-separated list of numbers") from None
    else:
        data, _ = _load_dataset(cfg["dataset"])
        if not 0 <= cfg["row"] < data.n_rows:
            raise InvalidInputError(f"--row {cfg['row']} outside 0..{data.n_rows - 1}")
        x = data.features[cfg["row"]]
    if x.size != input_dim:
        raise InvalidInputError(f"query has {x.size} features, the model expects {input_dim}")
    return x


def cmd_density(cfg) -> dict:
    mpath = _model_path(cfg)
    model = load_model(mpath)
    x = _query_vector(cfg, model.spec.input_dim)
    preds = model.predict(x)[0]
    res = bagging_score(preds, _kde(cfg))
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "density.csv"
    if res.grid is not None:
        write_density_csv(res.grid, path)
    else:
        # all members agree: the density collapses onto one point
        path.write_text(f"position,density\n{res.representative:.17g},{1.0:.17g}\n")
    summary = (
        f"mean={aggregate_mean(preds):.17g} median={aggregate_median(preds):.17g} "
        f"representative={res.representative:.17g} score={res.score:.17g}"
    )
    print(summary)
    (out_dir / "density_summary.txt").write_text(summary + "\n")
    return {"model_sha256": file_sha256(mpath), "artifacts": [str(path)],
            "representative": res.representative, "score": res.score}


def synthetic_queries(spec: SyntheticSpec, per_gap: int) -> np.ndarray:
    """Evenly spaced points strictly inside every gap."""
    pts = [a + (b - a) * (np.arange(1, per_gap + 1) / (per_gap + 1)) for a, b in spec.gap_intervals]
    return np.concatenate(pts) if pts else np.empty(0)


def cmd_synthetic(cfg) -> dict:
    try:
        lo, hi = (float(v) for v in cfg["domain"].split(":"))
    except ValueError:
        raise InvalidInputError(f"--domain {cfg['domain']!r} is not LOW:HIGH") from None
    spec = SyntheticSpec(cfg["function"], (lo, hi), cfg["n_train"], cfg["noise_std"], parse_gaps(cfg["gaps"]))
    data = generate_synthetic(spec, cfg["seed"])
    if cfg["queries"]:
        xq = np.array([float(v) for v in str(cfg["queries"]).split(",")])
    else:
        xq = synthetic_queries(spec, cfg["n_queries"])
    if xq.size == 0:
        raise InvalidInputError("no query points: give --queries or at least one --gap")
    model = train_ensemble(
        MlpSpec(1), cfg["n_nets"], data, _train_config(cfg), seed_base=cfg["seed_base"],
        chunk_size=cfg["chunk_size"], n_jobs=cfg["jobs"],
    )
    preds = model.predict(xq[:, None])
    truth = spec.ground_truth(xq)
    kde = _kde(cfg)
    rows = []
    for x, t, p in zip(xq, truth, preds):
        res = bagging_score(p, kde)
        rows.append((x, t, aggregate_mean(p), aggregate_median(p), res.representative, res.score))
    table = np.array(rows)
    errors = np.abs(table[:, 2:5] - table[:, 1:2])

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "synthetic.csv"
    lines = ["x,truth,mean,median,bs,score,err_mean,err_median,err_bs,in_gap"]
    for r, e, g in zip(table, errors, spec.in_gap(xq)):
        lines.append(",".join(f"{v:.17g}" for v in (*r, *e)) + f",{int(g)}")
    csv_path.write_text("\n".join(lines) + "\n")

    text = [f"{'x':>10} {'truth':>10} {'|mean-f|':>10} {'|median-f|':>10} {'|bs-f|':>10} {'score':>8}"]
    for r, e in zip(table, errors):
        text.append(f"{r[0]:>10.4g} {r[1]:>10.4g} {e[0]:>10.4g} {e[1]:>10.4g} {e[2]:>10.4g} {r[5]:>8.4g}")
    mean_err = errors.mean(axis=0)
    text.append(f"{'mean abs error':>21} {mean_err[0]:>10.4g} {mean_err[1]:>10.4g} {mean_err[2]:>10.4g}")
    report = "\n".join(text) + "\n"
    (out_dir / "synthetic.txt").write_text(report)
    sys.stdout.write(report)
    return {"artifacts": [str(csv_path), str(out_dir / "synthetic.txt")],
            "mean_abs_error_mean": float(mean_err[0]),
            "mean_abs_error_median": float(mean_err[1]),
            "mean_abs_error_bs": float(mean_err[2])}


HANDLERS = {"train": cmd_train, "compare": cmd_compare, "density": cmd_density, "synthetic": cmd_synthetic}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    parsed = vars(args)
    command = parsed.pop("command")
    t0 = time.perf_counter()
    try:
        cfg = resolve_options(command, parsed)
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        extra = HANDLERS[command](cfg)
    except (BagScoreError, OSError) as exc:
        print(f"bagscore {command}: error: {exc}", file=sys.stderr)
        return 1
    manifest = {**cfg, **extra, "command": command, "version": __version__,
                "duration_seconds": round(time.perf_counter() - t0, 3)}
    write_manifest(Path(cfg["out_dir"]) / f"{command}_manifest.txt", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
