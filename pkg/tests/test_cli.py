import csv
import json
import os

import numpy as np
import pytest

from svn_ensembles.cli import cmd_compare, cmd_run, cmd_snapshot, main

SMALL_TOY = {"builtin": "toy", "seed": 42, "n_train": 30, "n_val": 10, "n_test": 40, "blob_points": 10}


def _config(tmp_path, name="cfg", dataset=None, **method):
    m = {"method": "svn", "epochs": 2, "n_particles": 2, "hidden": [4], "step_size": 0.01}
    m.update(method)
    doc = {"dataset": dataset or SMALL_TOY, "method": m, "output_dir": str(tmp_path / f"out_{name}")}
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(doc))
    return path, tmp_path / f"out_{name}"


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def _all_files(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


def test_run_toy_covers_test_domain(tmp_path):
    path, out = _config(tmp_path, dataset={"builtin": "toy"}, epochs=1)
    assert main(["--quiet", "run", str(path)]) == 0
    rows = _read_csv(out / "fold_0" / "predictions.csv")
    x = np.array([float(r["x0"]) for r in rows])
    assert len(rows) == 200 and x.min() >= 0 and x.max() <= 7
    assert x.min() < 0.2 and x.max() > 6.8
    assert all(float(r["pred_std"]) >= 0 for r in rows)
    report = json.loads((out / "fold_0" / "metrics.json").read_text())
    assert report["method"] == "svn" and report["dataset"] == "toy" and report["fold"] == 0
    assert {"nll", "mse", "nll_original", "mse_original"} <= set(report["metrics"])
    assert set(_all_files(out)) == {f"fold_0/{f}" for f in ("checkpoint.json", "history.csv", "metrics.json", "predictions.csv")}


def test_zero_epochs_reports_untrained_metrics(tmp_path):
    path, out = _config(tmp_path, epochs=0)
    assert cmd_run(path) == 0
    report = json.loads((out / "fold_0" / "metrics.json").read_text())
    assert report["best_epoch"] == 0 and np.isfinite(report["metrics"]["nll"])
    assert _read_csv(out / "fold_0" / "history.csv") == []


def test_invalid_method_writes_nothing(tmp_path, capsys):
    path, out = _config(tmp_path, method="hmc")
    assert cmd_run(path) != 0
    assert "hmc" in capsys.readouterr().err
    assert not out.exists()


@pytest.mark.parametrize(
    "doc",
    [
        {"dataset": {"builtin": "mnist"}},
        {"dataset": {"manifest": "missing.json"}},
        {"dataset": {"builtin": "toy"}, "extra": 1},
        {"method": {"method": "svn"}},
    ],
)
def test_config_errors_exit_nonzero(tmp_path, doc):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    assert cmd_run(path) == 2
    assert cmd_run(tmp_path / "nope.json") == 2


def test_run_is_byte_deterministic(tmp_path):
    path, out = _config(tmp_path)
    assert cmd_run(path, out=str(tmp_path / "a")) == 0
    assert cmd_run(path, out=str(tmp_path / "b")) == 0
    for name in ("metrics.json", "history.csv", "predictions.csv", "checkpoint.json"):
        assert (tmp_path / "a" / "fold_0" / name).read_bytes() == (tmp_path / "b" / "fold_0" / name).read_bytes()
    assert not any(f.endswith(".tmp") or ".tmp" in f for f in _all_files(tmp_path))


def test_seed_override_changes_report(tmp_path):
    path, _ = _config(tmp_path)
    cmd_run(path, seed=1, out=str(tmp_path / "s1"))
    cmd_run(path, seed=2, out=str(tmp_path / "s2"))
    a = json.loads((tmp_path / "s1" / "fold_0" / "metrics.json").read_text())
    b = json.loads((tmp_path / "s2" / "fold_0" / "metrics.json").read_text())
    assert a["seed"] == 1 and b["seed"] == 2 and a["metrics"] != b["metrics"]


def test_history_records_every_epoch(tmp_path):
    path, out = _config(tmp_path, epochs=3)
    cmd_run(path)
    rows = _read_csv(out / "fold_0" / "history.csv")
    nll = [r for r in rows if r["metric"] == "nll" and r["split"] == "val"]
    assert [int(r["epoch"]) for r in nll] == [1, 2, 3]
    assert {r["metric"] for r in rows} == {"train_loss", "nll", "rejections", "cg_iters", "fallbacks"}


def _table_dataset(tmp_path, rng, n=40):
    x = rng.standard_normal((n, 2))
    y = x @ [1.0, -2.0] + 0.1 * rng.standard_normal(n)
    lines = ["a,b,t"] + [f"{float(r[0])!r},{float(r[1])!r},{float(t)!r}" for r, t in zip(x, y)]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    (tmp_path / "d.json").write_text('{"file": "d.csv", "target_columns": ["t"]}')
    return {"manifest": "d.json"}


def test_compare_shares_folds_and_counts_rows(tmp_path, rng):
    ds = _table_dataset(tmp_path, rng)
    paths = [_config(tmp_path, name, ds, method=name)[0] for name in ("ensemble", "svgd", "svn")]
    out = tmp_path / "cmp"
    assert cmd_compare(paths, out=str(out), folds=[0, 2]) == 0
    rows = _read_csv(out / "compare_metrics.csv")
    assert len(rows) == 3 * 2
    assert {(r["label"], r["fold"]) for r in rows} == {(m, f) for m in ("ensemble", "svgd", "svn") for f in ("0", "2")}
    hist = _read_csv(out / "compare_history.csv")
    series = {}
    for r in hist:
        if r["metric"] == "nll" and r["fold"] == "0":
            series.setdefault(r["label"], []).append(int(r["epoch"]))
    assert set(series) == {"ensemble", "svgd", "svn"}
    assert len({tuple(v) for v in series.values()}) == 1


def test_compare_identical_configs_identical_rows(tmp_path):
    path, _ = _config(tmp_path)
    out = tmp_path / "same"
    assert cmd_compare([path, path], out=str(out)) == 0
    rows = _read_csv(out / "compare_metrics.csv")
    assert [r["label"] for r in rows] == ["cfg", "cfg_1"]
    strip = lambda r: {k: v for k, v in r.items() if k != "label"}
    assert strip(rows[0]) == strip(rows[1])


def test_snapshot_cadence_and_symmetry(tmp_path):
    ds = dict(SMALL_TOY, n_train=16)
    path, out = _config(tmp_path, dataset=ds, method="svgd", epochs=100, hidden=[2], batch_size=16)
    assert cmd_snapshot(path) == 0
    snap = out / "fold_0" / "snapshots"
    epochs = sorted(os.listdir(snap))
    assert epochs == ["epoch_001", "epoch_020", "epoch_040", "epoch_060", "epoch_080", "epoch_100"]
    for e in epochs:
        files = sorted(os.listdir(snap / e))
        assert files == ["mean.csv", "particle_0.csv", "particle_1.csv"]
        mats = [np.loadtxt(snap / e / f, delimiter=",", ndmin=2) for f in files]
        for m in mats:
            assert m.shape == (10, 10) and np.array_equal(m, m.T)
        assert np.allclose(mats[0], (mats[1] + mats[2]) / 2, atol=1e-12)


def test_snapshot_dimension_guard(tmp_path):
    doc = {"dataset": SMALL_TOY, "method": {"method": "svgd", "epochs": 1, "hidden": [50]},
           "output_dir": str(tmp_path / "o"), "snapshot": {"every": 1, "max_dim": 20}}
    (tmp_path / "c.json").write_text(json.dumps(doc))
    assert cmd_snapshot(tmp_path / "c.json") == 2
    assert not (tmp_path / "o").exists()


def test_failed_fold_is_recorded(tmp_path, rng):
    ds = _table_dataset(tmp_path, rng)
    path, out = _config(tmp_path, dataset=ds, method="svn", hidden=[50], max_full_dim=10)
    assert cmd_run(path, folds=[1]) == 1
    assert (out / "fold_1" / "error.txt").read_text().strip()
