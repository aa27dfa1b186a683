"""Source pretraining and the calibrate-then-distill adaptation loop."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import objectives as obj
from .branch import (Branch, Phase, Role, checkpoint_bytes, encode, linear_view, predicted_label,
                     set_phase_freezing, state_hash)
from .data import CohortDataset
from .prototypes import (PrototypeBank, cosine_similarities, ema_update, init_from_classifier,
                         margin, prototype_view)
from .pseudo_label import VARIANTS, bundle_from_views


class AdaptationError(RuntimeError):
    pass


@dataclass
class AdaptationConfig:
    epochs: int = 50
    batch_size: int = 32
    lr0: float = 1e-4
    decay_power: float = 0.75
    lr_schedule: str = "inverse_power"
    lr0_fm: float | None = None
    lr0_sm: float | None = None
    momentum: float = 0.9
    margin_threshold: float = 0.6
    temperature: float = 10.0
    lambda_kd: float = 1.0
    lambda_div: float = 1.0
    seed: int = 0
    use_consensus_mask: bool = True
    use_mi: bool = True
    use_kd: bool = True
    use_ce: bool = True
    use_div: bool = True
    pseudo_label_variant: str = "fused"
    ema_cadence: str = "batch"
    freeze_fm_prototypes: bool = False
    detach_teacher: bool = True
    joint_estimate: str = "batch"
    pretrain_epochs: int = 50
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 64

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.pretrain_epochs < 0:
            raise ValueError("pretrain_epochs must be nonnegative")
        if self.batch_size < 1 or self.pretrain_batch_size < 1:
            raise ValueError("batch sizes must be >= 1")
        for name in ("lr0", "pretrain_lr", "lr0_fm", "lr0_sm"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0 <= self.margin_threshold < 1:
            raise ValueError(f"margin_threshold must be in [0, 1), got {self.margin_threshold}")
        if self.temperature < 0:
            raise ValueError("temperature must be nonnegative")
        obj.LossWeights(self.lambda_kd, self.lambda_div)
        if self.pseudo_label_variant not in VARIANTS:
            raise ValueError(f"pseudo_label_variant must be one of {VARIANTS}")
        if self.lr_schedule not in ("inverse_power", "exponential"):
            raise ValueError("lr_schedule must be inverse_power or exponential")
        if self.ema_cadence not in ("batch", "epoch"):
            raise ValueError("ema_cadence must be batch or epoch")
        if self.joint_estimate not in ("batch", "dataset"):
            raise ValueError("joint_estimate must be batch or dataset")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def loss_weights(self) -> obj.LossWeights:
        return obj.LossWeights(self.lambda_kd, self.lambda_div)


def lr_at(step: int, total_steps: int, cfg: AdaptationConfig, lr0: float | None = None) -> float:
    """``lr0 * (1 + 10 p)^-power`` with ``p = step / total_steps``."""
    base = cfg.lr0 if lr0 is None else lr0
    if total_steps <= 0:
        return base
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    p = step / total_steps
    if cfg.lr_schedule == "exponential":
        return base * cfg.decay_power ** (10 * p)
    return base * (1 + 10 * p) ** (-cfg.decay_power)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_mi: float
    l_ce: float
    l_kd: float
    l_div: float
    mask_rate: float
    agreement_rate: float
    pseudo_label_acc: float
    empty_mask_batches: int
    target_acc: float
    # prototype cosine similarities, logged per branch since the two live in different spaces
    sim_fm_mean: float = 0.0
    sim_fm_std: float = 0.0
    sim_sm_mean: float = 0.0
    sim_sm_std: float = 0.0


@dataclass
class RunReport:
    """Outcome of one adaptation run.

    ``to_text``/``to_csv`` are the canonical, reproducible renderings; wall-clock
    times live in ``epoch_seconds`` and are written separately by ``timing_csv``.
    """

    config_hash: str
    epochs: list[EpochRecord] = field(default_factory=list)
    source_only_accuracy: float = float("nan")
    final_accuracy: float = float("nan")
    final_fm_accuracy: float = float("nan")
    mean_prediction_entropy: float = float("nan")
    checkpoint_hashes: dict[str, str] = field(default_factory=dict)
    epoch_seconds: list[float] = field(default_factory=list)

    @property
    def final_mask_rate(self) -> float:
        return self.epochs[-1].mask_rate if self.epochs else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in dataclasses.fields(EpochRecord)]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for rec in self.epochs:
            w.writerow([repr(getattr(rec, n)) for n in names])
        return buf.getvalue()

    def loss_trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "L_MI", "L_CE", "L_KD", "L_Div", "mask_rate"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.l_mi), repr(r.l_ce), repr(r.l_kd), repr(r.l_div),
                        repr(r.mask_rate)])
        return buf.getvalue()

    def timing_csv(self) -> str:
        return "epoch,seconds\n" + "".join(f"{i},{s!r}\n" for i, s in enumerate(self.epoch_seconds))

    def to_text(self) -> str:
        lines = [f"config_hash = {self.config_hash}",
                 f"source_only_accuracy = {self.source_only_accuracy!r}",
                 f"final_accuracy = {self.final_accuracy!r}",
                 f"final_fm_accuracy = {self.final_fm_accuracy!r}",
                 f"mean_prediction_entropy = {self.mean_prediction_entropy!r}"]
        for k in sorted(self.checkpoint_hashes):
            lines.append(f"checkpoint.{k} = {self.checkpoint_hashes[k]}")
        for rec in self.epochs:
            lines.append("")
            lines.append(f"[epoch {rec.epoch}]")
            for f in dataclasses.fields(rec):
                if f.name != "epoch":
                    lines.append(f"{f.name} = {getattr(rec, f.name)!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunReport:
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d.get("epochs", [])]
        return cls(**d)


def build_branches(n_channels: int, n_times: int, n_classes: int, seed: int = 0,
                   fm_arch: dict | None = None, sm_arch: dict | None = None,
                   dtype: torch.dtype = torch.float32) -> tuple[Branch, Branch]:
    torch.manual_seed(seed)
    fm = Branch(Role.FM, n_channels, n_times, n_classes, fm_arch).to(dtype)
    sm = Branch(Role.SM, n_channels, n_times, n_classes, sm_arch).to(dtype)
    return fm, sm


def _tensors(ds: CohortDataset, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(ds.samples).to(dtype), torch.from_numpy(ds.labels).long()


def _batches(n: int, batch_size: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _dtype(branch: Branch) -> torch.dtype:
    return next(branch.parameters()).dtype


@torch.no_grad()
def predict_proba(branch: Branch, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    was = branch.training
    branch.eval()
    out = torch.cat([F.softmax(branch(x[i:i + batch_size]), dim=1)
                     for i in range(0, len(x), batch_size)]) if len(x) else x.new_zeros(0, branch.num_classes)
    branch.train(was)
    return out


def accuracy(branch: Branch, ds: CohortDataset) -> float:
    x, y = _tensors(ds, _dtype(branch))
    if len(y) == 0:
        return float("nan")
    return float((predicted_label(predict_proba(branch, x)) == y).double().mean())


def pretrain_source(fm: Branch, sm: Branch, source: CohortDataset,
                    cfg: AdaptationConfig) -> dict[Role, PrototypeBank]:
    """Train both branches with cross-entropy on labeled source data, then seed
    each prototype bank from its classifier weights."""
    if len(source) == 0:
        raise ValueError("source set is empty")
    set_phase_freezing(fm, sm, Phase.PRETRAIN)
    for offset, branch in enumerate((fm, sm)):
        torch.manual_seed(cfg.seed * 1000 + offset)
        gen = torch.Generator().manual_seed(cfg.seed * 1000 + offset)
        x, y = _tensors(source, _dtype(branch))
        opt = torch.optim.Adam(branch.parameters(), lr=cfg.pretrain_lr)
        n_batches = math.ceil(len(y) / cfg.pretrain_batch_size)
        total = cfg.pretrain_epochs * n_batches
        step = 0
        branch.train()
        for _ in range(cfg.pretrain_epochs):
            for idx in _batches(len(y), cfg.pretrain_batch_size, gen):
                if len(idx) < 2:
                    continue  # batch norm needs two rows
                _set_lr(opt, lr_at(step, total, cfg, cfg.pretrain_lr))
                p = linear_view(branch, encode(branch, x[idx]))
                loss = obj.source_ce(p, y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                step += 1
        branch.eval()
    return {b.role: init_from_classifier(b, cfg.momentum, cfg.margin_threshold, cfg.temperature)
            for b in (fm, sm)}


def _entropy(p: torch.Tensor) -> float:
    mean = p.mean(dim=0)
    return float(-(mean * torch.log(mean + obj.EPS)).sum())


def _sim_stats(sims: dict[Role, list[torch.Tensor]]) -> dict[str, float]:
    out = {}
    for role in (Role.FM, Role.SM):
        tag = role.value.lower()
        if sims[role]:
            v = torch.cat(sims[role]).double()
            out[f"sim_{tag}_mean"] = float(v.mean())
            out[f"sim_{tag}_std"] = float(v.std(unbiased=False))
    return out


def _finite(value: torch.Tensor, name: str, epoch: int, batch: int) -> None:
    if not torch.isfinite(value):
        raise AdaptationError(f"non-finite {name} at epoch {epoch}, batch {batch}")


def adapt_target(fm: Branch, sm: Branch, banks: dict[Role, PrototypeBank],
                 target: CohortDataset, cfg: AdaptationConfig,
                 trace: Callable[[str], None] | None = None) -> RunReport:
    """Run source-free adaptation on the unlabeled target pool.

    Per batch: forward both branches, EMA-update both banks, refine pseudo-labels,
    step the FM classifier on the MI loss, then step the SM encoder on
    CE + KD + Div. ``banks`` is updated in place. Target labels are read only
    to fill in accuracy columns of the report.
    """
    if len(target) == 0:
        raise ValueError("target set is empty")
    emit = trace or (lambda _event: None)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    set_phase_freezing(fm, sm, Phase.ADAPT)

    x, y_true = _tensors(target, _dtype(sm))
    x_fm = x.to(_dtype(fm))
    report = RunReport(cfg.config_hash())
    report.source_only_accuracy = accuracy(sm, target)
    report.checkpoint_hashes["fm_start"] = hashlib.sha256(checkpoint_bytes(fm)).hexdigest()
    report.checkpoint_hashes["sm_start"] = hashlib.sha256(checkpoint_bytes(sm)).hexdigest()
    frozen_before = (state_hash(fm.encoder), state_hash(sm.classifier))

    # the FM backbone is frozen, so its target features are fixed for the whole run
    fm.eval()
    with torch.no_grad():
        z_fm_all = torch.cat([encode(fm, x_fm[i:i + 256]) for i in range(0, len(x_fm), 256)])

    sm_losses = cfg.use_ce or cfg.use_kd or cfg.use_div
    opt_fm = torch.optim.Adam(fm.classifier.parameters(), lr=cfg.lr0_fm or cfg.lr0)
    opt_sm = torch.optim.Adam(sm.encoder.parameters(), lr=cfg.lr0_sm or cfg.lr0)
    n_batches = math.ceil(len(x) / cfg.batch_size)
    total = cfg.epochs * n_batches
    step = 0

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        sums = dict(mi=0.0, ce=0.0, kd=0.0, div=0.0)
        counts = dict(mi=0, ce=0, kd=0, div=0)
        masked = agreed = seen = pl_correct = empty = 0
        pending: list[tuple] = []
        sims_seen: dict[Role, list[torch.Tensor]] = {Role.FM: [], Role.SM: []}
        p_sm_pool = None
        if cfg.joint_estimate == "dataset" and cfg.use_mi:
            p_sm_pool = predict_proba(sm, x)

        for b, idx in enumerate(_batches(len(x), cfg.batch_size, gen)):
            if sm_losses and len(idx) < 2:
                continue  # batch norm in train mode needs two rows
            lr_fm = lr_at(step, total, cfg, cfg.lr0_fm)
            lr_sm = lr_at(step, total, cfg, cfg.lr0_sm)
            _set_lr(opt_fm, lr_fm)
            _set_lr(opt_sm, lr_sm)

            sm.train(sm_losses)
            z_fm = z_fm_all[idx]
            p_fm = linear_view(fm, z_fm)
            z_sm = encode(sm, x[idx])
            p_sm = linear_view(sm, z_sm)
            emit("forward")

            if cfg.ema_cadence == "batch":
                if not cfg.freeze_fm_prototypes:
                    banks[Role.FM] = ema_update(banks[Role.FM], z_fm, predicted_label(p_fm), margin(p_fm))
                banks[Role.SM] = ema_update(banks[Role.SM], z_sm, predicted_label(p_sm), margin(p_sm))
            else:
                pending.append((z_fm.detach(), p_fm.values.detach(), z_sm.detach(), p_sm.values.detach()))
            emit("ema")

            with torch.no_grad():
                zf, zs = z_fm.detach(), z_sm.detach()
                bundle = bundle_from_views(
                    p_fm.values, prototype_view(banks[Role.FM], zf),
                    p_sm.values, prototype_view(banks[Role.SM], zs),
                    cosine_similarities(banks[Role.FM], zf), cosine_similarities(banks[Role.SM], zs),
                    cfg.pseudo_label_variant)
            emit("refine")
            sims_seen[Role.FM].append(bundle.sims_fm.reshape(-1))
            sims_seen[Role.SM].append(bundle.sims_sm.reshape(-1))

            mask = bundle.mask if cfg.use_consensus_mask else torch.ones_like(bundle.mask)
            masked += int(bundle.mask.sum())
            agreed += int((bundle.stage_used == 0).sum())
            seen += len(idx)
            pl_correct += int((bundle.refined == y_true[idx]).sum())

            if cfg.use_mi:
                if p_sm_pool is not None:
                    J = obj.joint_distribution(F.softmax(fm.classifier(z_fm_all), dim=1), p_sm_pool)
                else:
                    J = obj.joint_distribution(p_fm, p_sm.values.detach())
                l_mi = obj.total_fm_loss(J)
                _finite(l_mi, "L_MI", epoch, b)
                opt_fm.zero_grad()
                l_mi.backward()
                opt_fm.step()
                sums["mi"] += l_mi.item()
                counts["mi"] += 1
                emit("fm_step")

            if sm_losses:
                teacher = F.softmax(fm.classifier(z_fm), dim=1)
                if cfg.detach_teacher:
                    teacher = teacher.detach()
                zero = p_sm.values.sum() * 0
                l_ce = obj.masked_ce(p_sm, bundle.refined, mask) if cfg.use_ce else zero
                l_kd = obj.kd_loss(teacher, p_sm, cfg.detach_teacher) if cfg.use_kd else zero
                l_div = obj.div_loss(p_sm) if cfg.use_div else zero
                if cfg.use_ce and int(mask.sum()) == 0:
                    empty += 1
                l_sm = obj.total_sm_loss(l_ce, l_kd, l_div, cfg.loss_weights)
                _finite(l_sm, "L_SM", epoch, b)
                opt_sm.zero_grad()
                opt_fm.zero_grad()
                l_sm.backward()
                opt_sm.step()
                if not cfg.detach_teacher and cfg.use_kd:
                    opt_fm.step()
                for name, v, on in (("ce", l_ce, cfg.use_ce), ("kd", l_kd, cfg.use_kd),
                                    ("div", l_div, cfg.use_div)):
                    if on:
                        sums[name] += v.item()
                        counts[name] += 1
                emit("sm_step")
            step += 1

        if pending:
            zf = torch.cat([p[0] for p in pending])
            pf = torch.cat([p[1] for p in pending])
            zs = torch.cat([p[2] for p in pending])
            ps = torch.cat([p[3] for p in pending])
            if not cfg.freeze_fm_prototypes:
                banks[Role.FM] = ema_update(banks[Role.FM], zf, predicted_label(pf), margin(pf))
            banks[Role.SM] = ema_update(banks[Role.SM], zs, predicted_label(ps), margin(ps))

        report.epochs.append(EpochRecord(
            epoch=epoch,
            lr=lr_at(min(step, total), total, cfg),
            l_mi=sums["mi"] / counts["mi"] if counts["mi"] else 0.0,
            l_ce=sums["ce"] / counts["ce"] if counts["ce"] else 0.0,
            l_kd=sums["kd"] / counts["kd"] if counts["kd"] else 0.0,
            l_div=sums["div"] / counts["div"] if counts["div"] else 0.0,
            mask_rate=masked / seen if seen else 0.0,
            agreement_rate=agreed / seen if seen else 0.0,
            pseudo_label_acc=pl_correct / seen if seen else 0.0,
            empty_mask_batches=empty,
            target_acc=accuracy(sm, target),
            **_sim_stats(sims_seen),
        ))
        report.epoch_seconds.append(time.perf_counter() - t0)

    sm.eval()
    if (state_hash(fm.encoder), state_hash(sm.classifier)) != frozen_before:
        raise AdaptationError("frozen parameters changed during adaptation")
    report.final_accuracy = accuracy(sm, target)
    report.final_fm_accuracy = accuracy(fm, target)
    report.mean_prediction_entropy = _entropy(predict_proba(sm, x))
    report.checkpoint_hashes["fm_end"] = hashlib.sha256(checkpoint_bytes(fm, banks[Role.FM])).hexdigest()
    report.checkpoint_hashes["sm_end"] = hashlib.sha256(checkpoint_bytes(sm, banks[Role.SM])).hexdigest()
    return report


# --- gradient verification --------------------------------------------------

def check_gradients(params, loss_fn: Callable[[], torch.Tensor], step: float = 1e-5,
                    floor: float = 1e-6) -> float:
    """Max over scalar parameters of ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``,
    with the numeric gradient from central differences.

    ``params`` is a Branch (its trainable parameters are used) or a list of tensors.
    An empty parameter set returns 0.
    """
    if isinstance(params, Branch):
        params = params.trainable_parameters()
    params = [p for p in params if p.requires_grad]
    if not params:
        return 0.0
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            if not torch.isfinite(g).all():
                raise ValueError("non-finite analytic gradient")
            flat, gflat = p.view(-1), g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                num = (up - down) / (2 * step)
                ana = float(gflat[i])
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
