import math

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score

import fused.experiment as experiment
from fused.config import ConfigError, parse_config_text
from fused.data import ShiftSpec, generate_cohort
from fused.experiment import (SOURCE_ONLY, ResultRow, ResultTable, cross_check, export_features,
                              extract_features, run)

TINY = """
data.generator.n_subjects = 3
data.generator.trials_per_class = 4
data.generator.n_channels = 4
data.generator.n_times = 64
data.generator.n_classes = 2
data.shift.noise_sigma = 1
adapt.epochs = 2
adapt.batch_size = 8
adapt.pretrain_epochs = 2
adapt.lr0 = 1e-3
arch.sm.f1 = 2
arch.sm.depth = 2
arch.sm.n_bins = 2
arch.fm.width = 4
arch.fm.proj_dim = 6
arch.fm.n_bins = 2
"""


def _spec(tmp_path, extra="", name="out"):
    return parse_config_text(TINY + extra + f"\nexperiment.output_dir = {tmp_path / name}\n")


def test_empty_grid_one_config_plus_baseline(tmp_path):
    spec = _spec(tmp_path, "experiment.seeds = 0,1")
    table = run(spec)
    assert table.configs() == [SOURCE_ONLY, "full"]
    assert len(table.rows) == 3 * 2 * 2 and not table.failures
    agg = table.aggregate()
    assert [a.config for a in agg] == [SOURCE_ONLY, "full"]
    for a in agg:
        assert abs(a.mean_accuracy - np.mean(table.accuracies(a.config))) < 1e-9
    out = tmp_path / "out"
    for f in ("results.csv", "aggregate.csv", "timing.csv", "summary.txt", "manifest.csv",
              "config.resolved.txt"):
        assert (out / f).exists()
    assert (out / "fold_000" / "seed_1" / "full.report.json").exists()
    assert parse_config_text((out / "config.resolved.txt").read_text()) == spec


def test_rerun_gives_identical_csv_bytes(tmp_path):
    run(_spec(tmp_path, "experiment.grid = table4", "a"))
    run(_spec(tmp_path, "experiment.grid = table4", "b"))
    for f in ("results.csv", "aggregate.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    lines = (tmp_path / "a" / "aggregate.csv").read_text().splitlines()
    assert len(lines) == 1 + 1 + 6
    assert "\r" not in (tmp_path / "a" / "results.csv").read_text()


def test_cross_check_catches_tampering(tmp_path):
    spec = _spec(tmp_path)
    table = run(spec)
    cross_check(table, spec.output_dir)
    bad = ResultTable(list(table.rows))
    r = bad.rows[1]
    bad.rows[1] = ResultRow(r.fold, r.seed, r.config, r.config_hash, r.accuracy + 0.25,
                            r.mask_rate_final, r.epoch_time_s)
    with pytest.raises(AssertionError, match="disagrees"):
        cross_check(bad, spec.output_dir)


def test_failed_unit_is_recorded_and_others_kept(tmp_path, monkeypatch):
    real = experiment.run_unit

    def flaky(spec, cohort, fold, *rest):
        if fold == 1:
            raise RuntimeError("simulated divergence")
        return real(spec, cohort, fold, *rest)

    monkeypatch.setattr(experiment, "run_unit", flaky)
    table = run(_spec(tmp_path))
    assert len(table.failures) == 1 and "fold 1" in table.failures[0]
    assert sorted({r.fold for r in table.rows}) == [0, 2]
    assert "simulated divergence" in (tmp_path / "out" / "failures.txt").read_text()


def test_grid_may_not_vary_pretraining(tmp_path):
    with pytest.raises(ConfigError, match="pretrain_lr"):
        run(_spec(tmp_path, "grid.x = pretrain_lr=0.1"))


def test_parallel_jobs_match_serial(tmp_path):
    run(_spec(tmp_path, "experiment.seeds = 0,1", "serial"))
    run(_spec(tmp_path, "experiment.seeds = 0,1\nexperiment.jobs = 2", "parallel"))
    assert (tmp_path / "serial" / "results.csv").read_bytes() == (tmp_path / "parallel" / "results.csv").read_bytes()


def test_export_features(tmp_path):
    spec = _spec(tmp_path)
    run(spec)
    ckpt = tmp_path / "out" / "fold_000" / "seed_0" / "full.sm.ckpt"
    cohort = experiment.load_cohort(spec)
    n = export_features(ckpt, cohort, tmp_path / "f1.csv")
    export_features(ckpt, cohort, tmp_path / "f2.csv")
    lines = (tmp_path / "f1.csv").read_text().splitlines()
    assert n == len(cohort) and len(lines) == len(cohort) + 1
    assert lines[0].startswith("subject,label,f0,")
    assert (tmp_path / "f1.csv").read_bytes() == (tmp_path / "f2.csv").read_bytes()
    wrong = generate_cohort(1, 1, 5, 64, 2, ShiftSpec(seed=0))
    with pytest.raises(ValueError, match="dimension mismatch"):
        export_features(ckpt, wrong, tmp_path / "bad.csv")


STANDARD = """
data.shift.noise_sigma = 10
adapt.lr0 = 1e-3
adapt.pretrain_lr = 3e-3
adapt.pretrain_epochs = 30
experiment.max_folds = 1
"""


def _probe(features, labels):
    return cross_val_score(LogisticRegression(max_iter=5000, C=0.01), features, labels, cv=4).mean()


def test_adapted_features_probe_better_than_source_features(tmp_path):
    spec = parse_config_text(STANDARD + f"experiment.output_dir = {tmp_path / 'std'}\n")
    table = run(spec)
    assert table.mean("full") > table.mean(SOURCE_ONLY)
    target = experiment.load_cohort(spec).subset([0])
    udir = tmp_path / "std" / "fold_000" / "seed_0"
    before = _probe(extract_features(udir / "sm_source.ckpt", target), target.labels)
    after = _probe(extract_features(udir / "full.sm.ckpt", target), target.labels)
    assert after > before
