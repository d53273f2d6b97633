"""Dataset loading, k-fold splits, standardisation and the 1-D toy problem.

Random streams come from numpy's PCG64 generator seeded through
``SeedSequence``, so splits and toy data are reproducible across platforms.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

TASKS = ("regression", "binary", "multiclass")


class DataError(ValueError):
    pass


class Table(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    feature_names: list
    target_names: list
    task: str


@dataclass(frozen=True)
class Scaler:
    """Per-column mean and population std fitted on training rows."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaler":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        const = std <= 0
        if np.any(const):
            log.warning("constant columns %s get std=1", np.flatnonzero(np.atleast_1d(const)).tolist())
            std = np.where(const, 1.0, std)
        return cls(mean, std)

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x, dtype=np.float64) * self.std + self.mean

    def inverse_moments(self, mean, std):
        return self.inverse(mean), np.asarray(std) * self.std


@dataclass(frozen=True)
class DatasetSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    task: str = "regression"
    n_classes: int = 2
    x_scaler: Scaler | None = None
    y_scaler: Scaler | None = None


def load_csv(path, target_columns, task: str = "regression", feature_columns=None) -> Table:
    """Read a comma-separated file with a header row into a numeric table."""
    if task not in TASKS:
        raise DataError(f"unknown task {task!r}")
    target_columns = [target_columns] if isinstance(target_columns, (str, int)) else list(target_columns)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            vals = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(
                        f"{path}:{lineno}: non-numeric value {cell!r} in column {col + 1} ({header[col]})"
                    ) from None
                if not np.isfinite(v):
                    raise DataError(f"{path}:{lineno}: non-finite value in column {col + 1} ({header[col]})")
                vals.append(v)
            rows.append(vals)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))

    def resolve(c):
        if isinstance(c, int):
            return c
        if c not in header:
            raise DataError(f"{path}: no column named {c!r}")
        return header.index(c)

    t_idx = [resolve(c) for c in target_columns]
    f_idx = [resolve(c) for c in feature_columns] if feature_columns else [i for i in range(len(header)) if i not in t_idx]
    y = data[:, t_idx]
    if y.shape[1] == 1:
        y = y[:, 0]
    if task != "regression":
        y = y.astype(np.int64)
    return Table(data[:, f_idx], y, [header[i] for i in f_idx], [header[i] for i in t_idx], task)


def write_csv(path, table: Table) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.feature_names + table.target_names)
        y = np.asarray(table.y).reshape(len(table.x), -1)
        for xr, yr in zip(table.x, y):
            writer.writerow([repr(float(v)) for v in xr] + [repr(float(v)) if table.task == "regression" else str(int(v)) for v in yr])


def load_manifest(path) -> Table:
    """Manifest: JSON ``{"file", "target_columns", "task", "feature_columns"?}``.

    Relative file paths resolve against the manifest's directory.
    """
    with open(path) as fh:
        doc = json.load(fh)
    file = doc["file"]
    if not os.path.isabs(file):
        file = os.path.join(os.path.dirname(os.path.abspath(path)), file)
    return load_csv(file, doc["target_columns"], doc.get("task", "regression"), doc.get("feature_columns"))


def _n_classes(table: Table) -> int:
    if table.task == "regression":
        return 0
    return max(2, int(np.max(table.y)) + 1)


def kfold_splits(
    table: Table,
    k: int = 5,
    val_fraction: float = 0.2,
    seed: int = 0,
    standardize_targets: bool = True,
) -> list[DatasetSplit]:
    """``k`` folds; each holds out one fold as test and ``val_fraction`` of the rest as validation.

    Splits come back standardised with training-row statistics.
    """
    n = len(table.x)
    if k < 2:
        raise DataError("k must be at least 2")
    if n < 2 * k:
        raise DataError(f"{n} rows is too few for {k} folds")
    splits = []
    for train, val, test in fold_indices(n, k, val_fraction, seed):
        split = DatasetSplit(
            table.x[train], table.y[train], table.x[val], table.y[val], table.x[test], table.y[test],
            table.task, _n_classes(table),
        )
        splits.append(standardize(split, standardize_targets))
    return splits


def fold_indices(n: int, k: int = 5, val_fraction: float = 0.2, seed: int = 0):
    """Row indices ``(train, val, test)`` per fold, matching :func:`kfold_splits`."""
    rng = np.random.default_rng(seed)
    folds = np.array_split(rng.permutation(n), k)
    out = []
    for i in range(k):
        rest = np.concatenate([folds[j] for j in range(k) if j != i])
        n_val = int(round(val_fraction * len(rest)))
        out.append((rest[n_val:], rest[:n_val], folds[i]))
    return out


def standardize(split: DatasetSplit, targets: bool = True) -> DatasetSplit:
    """Fit a scaler on training inputs (and regression targets) and apply it to every split."""
    xs = Scaler.fit(split.x_train)
    kw = dict(
        x_train=xs.transform(split.x_train),
        x_val=xs.transform(split.x_val),
        x_test=xs.transform(split.x_test),
        x_scaler=xs,
    )
    if targets and split.task == "regression":
        ys = Scaler.fit(split.y_train)
        kw.update(
            y_train=ys.transform(split.y_train),
            y_val=ys.transform(split.y_val),
            y_test=ys.transform(split.y_test),
            y_scaler=ys,
        )
    return replace(split, **kw)


def toy_function(x):
    return (np.asarray(x) - 3.0) ** 3


TOY_TRAIN_DOMAIN = ((2.0, 3.0), (4.5, 6.0))
TOY_BLOBS = ((1.5, 2.5), (4.5, 6.0))


def _uniform_on(intervals, size, rng):
    lengths = np.array([hi - lo for lo, hi in intervals])
    which = rng.choice(len(intervals), size=size, p=lengths / lengths.sum())
    lo = np.array([iv[0] for iv in intervals])[which]
    return lo + lengths[which] * rng.random(size)


def _clip_blobs():
    out = []
    for lo, hi in TOY_BLOBS:
        for dlo, dhi in TOY_TRAIN_DOMAIN:
            a, b = max(lo, dlo), min(hi, dhi)
            if b > a:
                out.append((a, b))
    return tuple(out)


def toy_regression(
    seed: int = 42,
    n_train: int = 150,
    n_test: int = 200,
    n_val: int = 50,
    noise_std: float = 0.25,
    blob_points: int = 50,
) -> DatasetSplit:
    """1-D cubic ``(x-3)^3`` with noise; train on ``[2,3] u [4.5,6]``, test on ``[0,7]``.

    ``blob_points`` of the training (and proportionally validation) points are
    drawn from the blob intervals intersected with the training domain; the
    rest are uniform over the domain. Returned unstandardised.
    """
    rng = np.random.default_rng(seed)
    blobs = _clip_blobs()

    def draw(count):
        n_blob = min(count, int(round(blob_points * count / n_train))) if n_train else 0
        x = np.concatenate([
            _uniform_on(TOY_TRAIN_DOMAIN, count - n_blob, rng),
            _uniform_on(blobs, n_blob, rng) if n_blob else np.empty(0),
        ])
        return x, toy_function(x) + noise_std * rng.standard_normal(count)

    x_tr, y_tr = draw(n_train)
    x_va, y_va = draw(n_val)
    x_te = np.sort(rng.uniform(0.0, 7.0, n_test))
    y_te = toy_function(x_te) + noise_std * rng.standard_normal(n_test)
    return DatasetSplit(x_tr[:, None], y_tr, x_va[:, None], y_va, x_te[:, None], y_te, "regression", 0)
