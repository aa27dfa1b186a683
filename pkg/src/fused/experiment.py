"""Fold/seed orchestration, ablation grids, result tables and feature export."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import multiprocessing
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .branch import encode, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentSpec, echo_config
from .data import CohortDataset, generate_cohort, load_dataset, logo_splits, loso_splits, preprocess
from .engine import RunReport, adapt_target, build_branches, pretrain_source
from .prototypes import init_from_classifier

log = logging.getLogger(__name__)

SOURCE_ONLY = "source_only"
_FIXED_PER_UNIT = ("seed", "pretrain_epochs", "pretrain_lr", "pretrain_batch_size")


@dataclass
class ResultRow:
    fold: int
    seed: int
    config: str
    config_hash: str
    accuracy: float
    mask_rate_final: float
    epoch_time_s: float


@dataclass
class AggregateRow:
    config: str
    config_hash: str
    n: int
    mean_accuracy: float
    std_accuracy: float
    mean_mask_rate_final: float
    mean_epoch_time_s: float


def _num(v: float) -> str:
    return repr(float(v))


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def configs(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r.config not in seen:
                seen.append(r.config)
        return seen

    def accuracies(self, config: str) -> np.ndarray:
        return np.array([r.accuracy for r in self.rows if r.config == config])

    def mean(self, config: str) -> float:
        acc = self.accuracies(config)
        return float(acc.mean()) if len(acc) else float("nan")

    def aggregate(self) -> list[AggregateRow]:
        out = []
        for name in self.configs():
            rows = [r for r in self.rows if r.config == name]
            acc = np.array([r.accuracy for r in rows])
            out.append(AggregateRow(
                name, rows[0].config_hash, len(rows), float(acc.mean()),
                float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
                float(np.mean([r.mask_rate_final for r in rows])),
                float(np.mean([r.epoch_time_s for r in rows]))))
        return out

    def to_csv(self, timing: bool = False) -> str:
        """Per-run rows. Wall-clock time only appears when ``timing`` is set, so
        the default rendering is byte-identical across reruns."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["fold", "seed", "config", "config_hash", "accuracy", "mask_rate_final"]
        w.writerow(head + (["epoch_time_s"] if timing else []))
        for r in self.rows:
            line = [r.fold, r.seed, r.config, r.config_hash, _num(r.accuracy), _num(r.mask_rate_final)]
            w.writerow(line + ([_num(r.epoch_time_s)] if timing else []))
        return buf.getvalue()

    def aggregate_csv(self, timing: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["config", "config_hash", "n", "mean_accuracy", "std_accuracy", "mean_mask_rate_final"]
        w.writerow(head + (["mean_epoch_time_s"] if timing else []))
        for a in self.aggregate():
            line = [a.config, a.config_hash, a.n, _num(a.mean_accuracy), _num(a.std_accuracy),
                    _num(a.mean_mask_rate_final)]
            w.writerow(line + ([_num(a.mean_epoch_time_s)] if timing else []))
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'config':<16} {'n':>3} {'acc mean':>9} {'acc std':>8} {'mask':>6}"]
        for a in self.aggregate():
            mask = "-" if math.isnan(a.mean_mask_rate_final) else f"{a.mean_mask_rate_final:.3f}"
            lines.append(f"{a.config:<16} {a.n:>3} {a.mean_accuracy * 100:>8.2f}% "
                         f"{a.std_accuracy * 100:>7.2f} {mask:>6}")
        if self.failures:
            lines.append(f"{len(self.failures)} failed unit(s):")
            lines.extend(f"  {f}" for f in self.failures)
        return "\n".join(lines) + "\n"


# --- cohort and splits --------------------------------------------------------

def load_cohort(spec: ExperimentSpec) -> CohortDataset:
    if spec.dataset_path:
        cohort = load_dataset(spec.dataset_path)
    else:
        g = spec.generator
        cohort = generate_cohort(g.n_subjects, g.trials_per_class, g.n_channels, g.n_times,
                                 g.n_classes, spec.shift, g.sampling_rate)
    return preprocess(cohort, spec.pipeline) if spec.pipeline else cohort


def split_plan(spec: ExperimentSpec, cohort: CohortDataset):
    plan = loso_splits(cohort) if spec.scheme == "LOSO" else logo_splits(cohort, spec.group_size)
    if spec.max_folds:
        plan.folds = plan.folds[:spec.max_folds]
    return plan


# --- one (fold, seed) unit ----------------------------------------------------

def _unit_dir(out: Path, fold: int, seed: int) -> Path:
    return out / f"fold_{fold:03d}" / f"seed_{seed}"


def run_unit(spec: ExperimentSpec, cohort: CohortDataset, fold: int, target_ids, source_ids,
             seed: int) -> dict[str, RunReport]:
    """Pretrain once on the source subjects, then adapt a copy for every grid entry."""
    torch.set_num_threads(1)
    base = spec.config_for({}, seed)
    fm, sm = build_branches(cohort.n_channels, cohort.n_times, cohort.n_classes, seed,
                            spec.fm_arch, spec.sm_arch)
    pretrain_source(fm, sm, cohort.subset(source_ids), base)
    target = cohort.subset(target_ids)
    udir = _unit_dir(Path(spec.output_dir), fold, seed)
    udir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(udir / "sm_source.ckpt", sm)
    reports = {}
    for name, overrides in spec.resolved_grid():
        cfg = spec.config_for(overrides, seed)
        f, s = copy.deepcopy(fm), copy.deepcopy(sm)
        banks = {b.role: init_from_classifier(b, cfg.momentum, cfg.margin_threshold, cfg.temperature)
                 for b in (f, s)}
        rep = adapt_target(f, s, banks, target, cfg)
        reports[name] = rep
        (udir / f"{name}.report.json").write_text(json.dumps(rep.to_dict(), sort_keys=True))
        (udir / f"{name}.report.txt").write_text(rep.to_text())
        (udir / f"{name}.loss_trace.csv").write_text(rep.loss_trace_csv())
        (udir / f"{name}.timing.csv").write_text(rep.timing_csv())
        save_checkpoint(udir / f"{name}.sm.ckpt", s, banks[s.role])
    return reports


def _unit_job(args):
    spec, cohort, fold, tgt, src, seed = args
    try:
        return fold, seed, run_unit(spec, cohort, fold, tgt, src, seed), None
    except Exception as exc:  # recorded, never fatal for other units
        return fold, seed, None, f"fold {fold} seed {seed}: {type(exc).__name__}: {exc}\n{traceback.format_exc()}"


def _rows_for(fold: int, seed: int, spec: ExperimentSpec, reports: dict[str, RunReport]) -> list[ResultRow]:
    full = reports["full"]
    rows = [ResultRow(fold, seed, SOURCE_ONLY, SOURCE_ONLY, full.source_only_accuracy, float("nan"), 0.0)]
    for name, _ in spec.resolved_grid():
        rep = reports[name]
        t = float(np.mean(rep.epoch_seconds)) if rep.epoch_seconds else 0.0
        rows.append(ResultRow(fold, seed, name, rep.config_hash, rep.final_accuracy,
                              rep.final_mask_rate, t))
    return rows


def cross_check(table: ResultTable, out_dir: str | Path, tol: float = 1e-9) -> None:
    """Recompute every row and every aggregate mean from the stored run reports."""
    out = Path(out_dir)
    per_config: dict[str, list[float]] = {}
    for row in table.rows:
        udir = _unit_dir(out, row.fold, row.seed)
        if row.config == SOURCE_ONLY:
            stored = RunReport.from_dict(json.loads((udir / "full.report.json").read_text()))
            expected, mask = stored.source_only_accuracy, float("nan")
        else:
            stored = RunReport.from_dict(json.loads((udir / f"{row.config}.report.json").read_text()))
            expected, mask = stored.final_accuracy, stored.final_mask_rate
            if stored.config_hash != row.config_hash:
                raise AssertionError(f"config hash mismatch for {row}")
        same_mask = (math.isnan(mask) and math.isnan(row.mask_rate_final)) or mask == row.mask_rate_final
        if expected != row.accuracy or not same_mask:
            raise AssertionError(f"row disagrees with stored report: {row}")
        per_config.setdefault(row.config, []).append(expected)
    for agg in table.aggregate():
        recomputed = sum(per_config[agg.config]) / len(per_config[agg.config])
        if abs(recomputed - agg.mean_accuracy) > tol:
            raise AssertionError(f"aggregate mean for {agg.config} differs: {agg.mean_accuracy} vs {recomputed}")


def run(spec: ExperimentSpec, progress=None) -> ResultTable:
    """Pretrain + adapt for every fold, seed and grid entry; write CSVs and a summary
    under ``spec.output_dir``. Failed units are listed in ``table.failures``."""
    for name, overrides in spec.resolved_grid():
        fixed = [k for k in overrides if k in _FIXED_PER_UNIT]
        if fixed:
            raise ConfigError(f"grid.{name}: {fixed} cannot vary inside a fold/seed unit")
    out = Path(spec.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(echo_config(spec))
    cohort = load_cohort(spec)
    plan = split_plan(spec, cohort)
    plan.write_manifest(out / "manifest.csv")

    jobs = [(spec, cohort, i, tgt, src, seed)
            for i, (tgt, src) in enumerate(plan.folds) for seed in spec.seeds]
    results = {}
    table = ResultTable()
    if spec.jobs > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=spec.jobs, mp_context=ctx) as pool:
            outcomes = list(pool.map(_unit_job, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(_unit_job(job))
            if progress:
                progress(outcomes[-1])
    for fold, seed, reports, err in outcomes:
        if err:
            log.error(err)
            table.failures.append(err.splitlines()[0])
            continue
        results[(fold, seed)] = reports
    for key in sorted(results):
        table.rows.extend(_rows_for(*key, spec, results[key]))

    if table.rows:
        cross_check(table, out)
    (out / "results.csv").write_text(table.to_csv())
    (out / "aggregate.csv").write_text(table.aggregate_csv())
    (out / "timing.csv").write_text(table.to_csv(timing=True))
    (out / "summary.txt").write_text(table.summary())
    if table.failures:
        (out / "failures.txt").write_text("\n".join(table.failures) + "\n")
    return table


# --- features -----------------------------------------------------------------

@torch.no_grad()
def extract_features(checkpoint: str | Path, dataset: CohortDataset) -> np.ndarray:
    branch, _ = load_checkpoint(checkpoint)
    if (dataset.n_channels, dataset.n_times) != (branch.n_channels, branch.n_times):
        raise ValueError(f"dimension mismatch: checkpoint expects C={branch.n_channels}, "
                         f"T={branch.n_times}; dataset has C={dataset.n_channels}, T={dataset.n_times}")
    branch.eval()
    dtype = next(branch.parameters()).dtype
    x = torch.from_numpy(dataset.samples).to(dtype)
    chunks = [encode(branch, x[i:i + 256]) for i in range(0, len(x), 256)]
    if not chunks:
        return np.zeros((0, branch.feature_dim))
    return torch.cat(chunks).double().numpy()


def export_features(checkpoint: str | Path, dataset: CohortDataset, out_path: str | Path) -> int:
    """One CSV row per sample: subject, label and the encoder features. Returns N."""
    feats = extract_features(checkpoint, dataset)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject", "label"] + [f"f{i}" for i in range(feats.shape[1])])
        for s, y, row in zip(dataset.subjects.tolist(), dataset.labels.tolist(), feats):
            w.writerow([s, y] + [repr(float(v)) for v in row])
    return len(feats)
