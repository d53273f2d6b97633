"""Batch experiment driver: ``run``, ``compare`` and ``snapshot``.

A config is one JSON document::

    {
      "dataset": {"builtin": "toy", "seed": 42}      # or {"manifest": "yacht.json"}
      "method": {...MethodConfig fields...},
      "output_dir": "out",
      "folds": null,                                  # list of fold indices, null = all
      "kfold": 5, "val_fraction": 0.2, "split_seed": 0,
      "mixture_nll": false,
      "snapshot": {"every": 20, "max_dim": 200}
    }

Relative paths resolve against the config file's directory. Folds run in a
process pool sized by ``SVN_ENSEMBLES_WORKERS`` (default 1).
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .curvature import CurvatureTooLarge, dump_curvature, estimate_curvature, mean_curvature
from .data import DataError, kfold_splits, load_manifest, standardize, toy_regression
from .inference import MethodConfig, TrainingError, train
from .metrics import class_probs, averaged_logits, evaluate, predictive_regression
from .nn import atomic_write_text, save_checkpoint
from .posterior import BatchView

log = logging.getLogger("svn_ensembles")

WORKERS_ENV = "SVN_ENSEMBLES_WORKERS"
TOP_KEYS = {"dataset", "method", "output_dir", "folds", "kfold", "val_fraction", "split_seed", "mixture_nll", "snapshot"}
HISTORY_FIELDS = ("train_loss", "val_nll", "rejections", "cg_iters", "fallbacks")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict
    method: MethodConfig
    output_dir: str = "out"
    folds: list | None = None
    kfold: int = 5
    val_fraction: float = 0.2
    split_seed: int = 0
    mixture_nll: bool = False
    snapshot: dict = field(default_factory=lambda: {"every": 20, "max_dim": 200})
    label: str = "run"

    @property
    def dataset_name(self) -> str:
        if "builtin" in self.dataset:
            return str(self.dataset["builtin"])
        return os.path.splitext(os.path.basename(self.dataset["manifest"]))[0]


def parse_config(doc: dict, base_dir: str = ".", label: str = "run") -> ExperimentConfig:
    """Validate a config document; raises :class:`ConfigError` before anything is written."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "dataset" not in doc:
        raise ConfigError("config needs a 'dataset' section")
    dataset = dict(doc["dataset"])
    if "builtin" in dataset:
        if dataset["builtin"] != "toy":
            raise ConfigError(f"unknown builtin dataset {dataset['builtin']!r}")
    elif "manifest" in dataset:
        path = dataset["manifest"]
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise ConfigError(f"manifest {path} does not exist")
        dataset["manifest"] = path
    else:
        raise ConfigError("dataset needs 'builtin' or 'manifest'")
    try:
        method = MethodConfig.from_dict(doc.get("method", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"method: {exc}") from None
    out = doc.get("output_dir", "out")
    if not os.path.isabs(out):
        out = os.path.join(base_dir, out)
    snap = {"every": 20, "max_dim": 200}
    snap.update(doc.get("snapshot") or {})
    if int(snap["every"]) < 1:
        raise ConfigError("snapshot.every must be >= 1")
    cfg = ExperimentConfig(
        dataset=dataset,
        method=method,
        output_dir=out,
        folds=doc.get("folds"),
        kfold=int(doc.get("kfold", 5)),
        val_fraction=float(doc.get("val_fraction", 0.2)),
        split_seed=int(doc.get("split_seed", 0)),
        mixture_nll=bool(doc.get("mixture_nll", False)),
        snapshot=snap,
        label=label,
    )
    if cfg.kfold < 2:
        raise ConfigError("kfold must be >= 2")
    return cfg


def load_config(path, seed: int | None = None, out: str | None = None, folds=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    label = os.path.splitext(os.path.basename(path))[0]
    cfg = parse_config(doc, os.path.dirname(os.path.abspath(path)), label)
    if seed is not None:
        cfg.method.seed = seed
    if out is not None:
        cfg.output_dir = out
    if folds is not None:
        cfg.folds = folds
    return cfg


def build_splits(cfg: ExperimentConfig) -> list:
    """All folds of the configured dataset; the toy problem has a single fold."""
    if cfg.dataset.get("builtin") == "toy":
        opts = {k: v for k, v in cfg.dataset.items() if k != "builtin"}
        return [standardize(toy_regression(**opts))]
    table = load_manifest(cfg.dataset["manifest"])
    return kfold_splits(table, cfg.kfold, cfg.val_fraction, cfg.split_seed)


def _selected_folds(cfg: ExperimentConfig, n_folds: int) -> list[int]:
    if cfg.folds is None:
        return list(range(n_folds))
    bad = [f for f in cfg.folds if not 0 <= int(f) < n_folds]
    if bad:
        raise ConfigError(f"folds {bad} out of range for {n_folds} folds")
    return sorted({int(f) for f in cfg.folds})


# -- report writers --------------------------------------------------------------


def _clean(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if np.isfinite(v) else repr(v)
    if isinstance(v, np.integer):
        return int(v)
    return v


def metrics_report(cfg: ExperimentConfig, fold: int, metrics: dict, best_epoch: int) -> str:
    doc = {
        "method": cfg.method.method,
        "dataset": cfg.dataset_name,
        "fold": fold,
        "seed": cfg.method.seed,
        "best_epoch": best_epoch,
        "config": cfg.method.to_dict(),
        "metrics": {k: _clean(v) for k, v in metrics.items()},
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def history_rows(history: list) -> list:
    rows = []
    for rec in history:
        for key in HISTORY_FIELDS:
            split = "val" if key.startswith("val") else "train"
            name = key[4:] if key.startswith("val_") else key
            rows.append([rec["epoch"], split, name, repr(_num(rec[key]))])
    return rows


def _num(v):
    return float(v) if isinstance(v, (float, np.floating)) else int(v)


def predictions_text(ensemble, data) -> str:
    x = data.x_test
    x_orig = data.x_scaler.inverse(x) if data.x_scaler is not None else x
    xcols = [f"x{j}" for j in range(x.shape[1])]
    if data.task == "regression":
        s = predictive_regression(ensemble, x)
        mean, std, y = s.mean, s.std, np.asarray(data.y_test, dtype=np.float64)
        if data.y_scaler is not None:
            mean, std = data.y_scaler.inverse_moments(mean, std)
            y = data.y_scaler.inverse(y)
        rows = [[*map(repr, map(float, xr)), repr(float(t)), repr(float(m)), repr(float(sd))]
                for xr, t, m, sd in zip(x_orig, y, mean, std)]
        return _csv_text(xcols + ["target", "pred_mean", "pred_std"], rows)
    probs = class_probs(averaged_logits(ensemble, x), ensemble.arch.head)
    pcols = [f"p{c}" for c in range(probs.shape[1])]
    rows = [[*map(repr, map(float, xr)), int(t), *map(repr, map(float, pr))]
            for xr, t, pr in zip(x_orig, data.y_test, probs)]
    return _csv_text(xcols + ["target"] + pcols, rows)


# -- fold pipelines ----------------------------------------------------------------


def _fold_dir(cfg: ExperimentConfig, fold: int) -> str:
    return os.path.join(cfg.output_dir, f"fold_{fold}")


def _snapshot_callback(cfg: ExperimentConfig, data, fold: int):
    every = int(cfg.snapshot["every"])
    kind = cfg.snapshot.get("curvature") or cfg.method.curvature_kind
    base = os.path.join(_fold_dir(cfg, fold), "snapshots")
    batch = BatchView(data.x_train, data.y_train, data.x_train.shape[0])

    def callback(epoch, ensemble):
        if epoch != 1 and epoch % every:
            return
        ests = [
            estimate_curvature(kind, ensemble.arch, p, batch, cfg.method.prior_precision, None, cfg.snapshot["max_dim"])
            for p in ensemble.particles
        ]
        d = os.path.join(base, f"epoch_{epoch:03d}")
        for i, est in enumerate(ests):
            dump_curvature(est, os.path.join(d, f"particle_{i}.csv"))
        dump_curvature(mean_curvature(ests), os.path.join(d, "mean.csv"))

    return callback


def run_fold(cfg: ExperimentConfig, fold: int, data, snapshot: bool = False) -> dict:
    """Train one fold and write its outputs; returns the fold summary."""
    out = _fold_dir(cfg, fold)
    callback = _snapshot_callback(cfg, data, fold) if snapshot else None
    try:
        result = train(data, cfg.method, callback=callback)
    except (TrainingError, CurvatureTooLarge, ValueError) as exc:
        log.error("fold %d failed: %s", fold, exc)
        atomic_write_text(os.path.join(out, "error.txt"), f"{exc}\n")
        return {"fold": fold, "error": str(exc), "history": getattr(exc, "history", [])}
    metrics = evaluate(result.ensemble, data, mixture_nll=cfg.mixture_nll)
    atomic_write_text(os.path.join(out, "metrics.json"), metrics_report(cfg, fold, metrics, result.best_epoch))
    atomic_write_text(
        os.path.join(out, "history.csv"), _csv_text(["epoch", "split", "metric", "value"], history_rows(result.history))
    )
    atomic_write_text(os.path.join(out, "predictions.csv"), predictions_text(result.ensemble, data))
    save_checkpoint(os.path.join(out, "checkpoint.json"), result.ensemble.arch, result.ensemble.particles, cfg.method.seed)
    return {"fold": fold, "metrics": metrics, "history": result.history, "best_epoch": result.best_epoch}


def _fold_job(args):
    cfg, fold, data, snapshot = args
    return run_fold(cfg, fold, data, snapshot)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def run_experiment(cfg: ExperimentConfig, snapshot: bool = False) -> list[dict]:
    splits = build_splits(cfg)
    folds = _selected_folds(cfg, len(splits))
    if snapshot:
        from .inference import build_architecture

        arch = build_architecture(cfg.method, splits[0].x_train.shape[1], splits[0].task, splits[0].n_classes)
        if arch.n_params > cfg.snapshot["max_dim"]:
            raise ConfigError(
                f"snapshot needs d={arch.n_params} <= snapshot.max_dim={cfg.snapshot['max_dim']}"
            )
    jobs = [(cfg, f, splits[f], snapshot) for f in folds]
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_fold_job, jobs))
    return [_fold_job(j) for j in jobs]


# -- commands ------------------------------------------------------------------


def cmd_run(config_path, seed=None, out=None, folds=None, snapshot=False) -> int:
    try:
        cfg = load_config(config_path, seed, out, folds)
        results = run_experiment(cfg, snapshot)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1 if any("error" in r for r in results) else 0


def cmd_snapshot(config_path, seed=None, out=None, folds=None) -> int:
    return cmd_run(config_path, seed, out, folds, snapshot=True)


def _unique_labels(cfgs):
    seen = {}
    for c in cfgs:
        n = seen.get(c.label, 0)
        seen[c.label] = n + 1
        if n:
            c.label = f"{c.label}_{n}"


def cmd_compare(config_paths, seed=None, out=None, folds=None) -> int:
    """Run every config on the first config's folds and seed; write joint tables."""
    try:
        cfgs = [load_config(p, seed, None, folds) for p in config_paths]
        if not cfgs:
            raise ConfigError("compare needs at least one config")
        _unique_labels(cfgs)
        first = cfgs[0]
        root = out or first.output_dir
        shared_splits = build_splits(first)
        fold_ids = _selected_folds(first, len(shared_splits))
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    metric_rows, hist_rows, failed = [], [], False
    for c in cfgs:
        c = copy.copy(c)
        c.method = copy.deepcopy(c.method)
        c.method.seed = first.method.seed
        c.dataset, c.kfold, c.val_fraction, c.split_seed = first.dataset, first.kfold, first.val_fraction, first.split_seed
        c.output_dir = os.path.join(root, c.label)
        for f in fold_ids:
            res = run_fold(c, f, shared_splits[f])
            if "error" in res:
                failed = True
                continue
            metric_rows.append((c.label, c.method.method, f, res["metrics"]))
            for row in history_rows(res["history"]):
                hist_rows.append([c.label, c.method.method, f, *row])
    names = sorted({k for *_, m in metric_rows for k in m})
    table = [[lab, meth, f, *(repr(float(m[k])) if k in m else "" for k in names)] for lab, meth, f, m in metric_rows]
    atomic_write_text(os.path.join(root, "compare_metrics.csv"), _csv_text(["label", "method", "fold", *names], table))
    atomic_write_text(
        os.path.join(root, "compare_history.csv"),
        _csv_text(["label", "method", "fold", "epoch", "split", "metric", "value"], hist_rows),
    )
    return 1 if failed else 0


def _parse_folds(text):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fold list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svn-ensembles", description=__doc__.split("\n")[0])
    p.add_argument("--quiet", action="store_true", help="only log warnings")
    sub = p.add_subparsers(dest="command", required=True)
    for name, nargs in (("run", None), ("compare", "+"), ("snapshot", None)):
        s = sub.add_parser(name)
        s.add_argument("config", nargs=nargs)
        s.add_argument("--seed", type=int)
        s.add_argument("--out")
        s.add_argument("--folds", type=_parse_folds, help="comma-separated fold indices")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    if args.command == "run":
        return cmd_run(args.config, args.seed, args.out, args.folds)
    if args.command == "snapshot":
        return cmd_snapshot(args.config, args.seed, args.out, args.folds)
    return cmd_compare(args.config, args.seed, args.out, args.folds)


if __name__ == "__main__":
    sys.exit(main())
