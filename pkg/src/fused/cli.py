"""Command-line front end: ``fused <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from .branch import Role, load_checkpoint, save_checkpoint
from .config import (ADAPT_SCHEMA, PRESETS, ConfigError, ExperimentSpec, _coerce, parse_config,
                     parse_config_text)
from .data import ShiftSpec, generate_cohort, load_dataset, preprocess, save_dataset
from .engine import AdaptationConfig, adapt_target, build_branches, pretrain_source
from .experiment import export_features, run
from .prototypes import init_from_classifier
from .selfcheck import run_self_checks

log = logging.getLogger("fused")


def _ids(text: str) -> list[int]:
    return [int(s) for s in text.replace(",", " ").split()]


def _adapt_config(args) -> AdaptationConfig:
    spec = parse_config(args.config) if args.config else ExperimentSpec()
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        key = key.removeprefix("adapt.")
        if key not in ADAPT_SCHEMA:
            raise ConfigError(f"--set {key}: unknown key")
        kind, optional = ADAPT_SCHEMA[key]
        try:
            overrides[key] = _coerce(value, kind, optional)
        except ValueError as exc:
            raise ConfigError(f"--set {key}: {exc}") from None
    try:
        return dataclasses.replace(spec.config, **overrides)
    except ValueError as exc:
        raise ConfigError(f"--set: {exc}") from None


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file (adapt.* keys are used)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one adaptation setting, e.g. --set lr0=1e-3 (repeatable)")


def cmd_gen_data(args) -> int:
    ds = generate_cohort(args.subjects, args.trials_per_class, args.channels, args.times, args.classes,
                         ShiftSpec(args.severity, args.jitter, args.noise, args.seed), args.rate)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} trials ({ds.n_channels}x{ds.n_times}, K={ds.n_classes}) to {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    ds = preprocess(load_dataset(args.input), args.pipeline)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} trials ({ds.n_channels}x{ds.n_times} at {ds.sampling_rate:g} Hz) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _adapt_config(args)
    ds = load_dataset(args.data)
    src = ds.subset(_ids(args.source_subjects)) if args.source_subjects else ds
    fm, sm = build_branches(ds.n_channels, ds.n_times, ds.n_classes, cfg.seed)
    banks = pretrain_source(fm, sm, src, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b in (fm, sm):
        digest = save_checkpoint(out / f"{b.role.value.lower()}.ckpt", b, banks[b.role])
        print(f"{b.role.value} checkpoint sha256 {digest}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _adapt_config(args)
    ds = load_dataset(args.data)
    target = ds.subset(_ids(args.target_subjects)) if args.target_subjects else ds
    fm, bank_fm = load_checkpoint(args.fm)
    sm, bank_sm = load_checkpoint(args.sm)
    if fm.role is not Role.FM or sm.role is not Role.SM:
        raise ValueError("--fm must hold an FM branch and --sm an SM branch")
    banks = {}
    for b, bank in ((fm, bank_fm), (sm, bank_sm)):
        if bank is None:
            bank = init_from_classifier(b, cfg.momentum, cfg.margin_threshold, cfg.temperature)
        banks[b.role] = dataclasses.replace(bank, momentum=cfg.momentum, margin_threshold=cfg.margin_threshold,
                                            temperature=cfg.temperature, owner_role=b.role)
    rep = adapt_target(fm, sm, banks, target, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(rep.to_text())
    (out / "report.json").write_text(json.dumps(rep.to_dict(), sort_keys=True))
    (out / "epochs.csv").write_text(rep.to_csv())
    (out / "loss_trace.csv").write_text(rep.loss_trace_csv())
    (out / "timing.csv").write_text(rep.timing_csv())
    save_checkpoint(out / "fm_adapted.ckpt", fm, banks[Role.FM])
    save_checkpoint(out / "sm_adapted.ckpt", sm, banks[Role.SM])
    print(f"source-only {rep.source_only_accuracy:.4f} -> adapted {rep.final_accuracy:.4f} "
          f"(final mask rate {rep.final_mask_rate:.3f})")
    return 0


def _load_spec(args, presets: list[str] | None = None) -> ExperimentSpec:
    spec = parse_config(args.config) if args.config else parse_config_text("")
    if args.out_dir:
        spec.output_dir = args.out_dir
    if args.jobs:
        spec.jobs = args.jobs
    if presets is not None:
        spec.grid_presets = [p for p in presets if p in PRESETS]
    return spec


def _run_and_report(spec: ExperimentSpec) -> int:
    def progress(outcome):
        fold, seed, _, err = outcome
        print(f"fold {fold} seed {seed}: {'FAILED' if err else 'done'}", flush=True)

    table = run(spec, progress=progress)
    print(table.summary(), end="")
    print(f"results in {spec.output_dir}")
    return 1 if table.failures else 0


def cmd_run(args) -> int:
    return _run_and_report(_load_spec(args))


def cmd_ablate(args) -> int:
    return _run_and_report(_load_spec(args, presets=args.tables))


def cmd_export_features(args) -> int:
    ds = load_dataset(args.data)
    if args.subjects:
        ds = ds.subset(_ids(args.subjects))
    n = export_features(args.checkpoint, ds, args.out)
    print(f"wrote {n} feature rows to {args.out}")
    return 0


def cmd_verify(args) -> int:
    results = run_self_checks()
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fused", description="Dual-branch source-free EEG adaptation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic multi-subject cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--trials-per-class", type=int, default=20)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--times", type=int, default=256)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--rate", type=float, default=128.0)
    p.add_argument("--severity", type=float, default=0.5)
    p.add_argument("--jitter", type=float, default=0.1)
    p.add_argument("--noise", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="apply a preprocessing pipeline to a dataset file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pipeline", required=True,
                   help='e.g. "bandpass:4:40;resample:200;window:2:2;channel_select:0-8;zscore"')
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="train both branches on labeled source subjects")
    p.add_argument("--data", required=True)
    p.add_argument("--source-subjects", help="comma-separated subject ids (default: all)")
    p.add_argument("--out-dir", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt pretrained branches to unlabeled target subjects")
    p.add_argument("--data", required=True)
    p.add_argument("--fm", required=True)
    p.add_argument("--sm", required=True)
    p.add_argument("--target-subjects", help="comma-separated subject ids (default: all)")
    p.add_argument("--out-dir", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_adapt)

    for name, func, helptext in (("run", cmd_run, "full experiment over folds and seeds"),
                                 ("ablate", cmd_ablate, "component and pseudo-label ablation grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config")
        p.add_argument("--out-dir")
        p.add_argument("--jobs", type=int)
        if name == "ablate":
            p.add_argument("--tables", nargs="+", default=["table4", "table6"], choices=sorted(PRESETS))
        p.set_defaults(func=func)

    p = sub.add_parser("export-features", help="write encoder features of a dataset to CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--subjects")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("verify", help="run loss, gradient and refinement self-checks")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
