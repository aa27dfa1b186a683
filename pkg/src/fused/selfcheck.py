"""Self-checks run by ``fused verify``: loss oracles, gradient checks and the
refinement scan."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import objectives as obj
from .branch import Branch, Phase, Role, encode, linear_view, set_phase_freezing
from .engine import check_gradients
from .pseudo_label import consensus_mask, refine_labels

TOY_SM = {"f1": 2, "depth": 2, "kernel": 5, "sep_kernel": 3, "n_bins": 2, "dropout": 0.0}
TOY_FM = {"width": 4, "kernel": 5, "n_bins": 2, "proj_dim": 6}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _probs(rng: np.random.Generator, n: int, k: int) -> torch.Tensor:
    logits = rng.normal(size=(n, k)) * 2
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return torch.from_numpy(e / e.sum(axis=1, keepdims=True))


def _h(p) -> float:
    return -sum(v * math.log(v + obj.EPS) for v in p)


def loss_oracles(n_cases: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        k, n = int(rng.integers(2, 7)), int(rng.integers(1, 20))
        a, b = _probs(rng, n, k), _probs(rng, n, k)
        J = obj.joint_distribution(a, b)
        P = J.P.tolist()
        rows = [sum(r) for r in P]
        cols = [sum(P[j][c] for j in range(k)) for c in range(k)]
        ref = -(_h(rows) + _h(cols) - _h([v for r in P for v in r]))
        worst = max(worst, abs(float(obj.mi_loss(J)) - ref))
        av, bv = a.tolist(), b.tolist()
        kd = sum(av[i][c] * (math.log(av[i][c] + obj.EPS) - math.log(bv[i][c] + obj.EPS))
                 for i in range(n) for c in range(k)) / n
        worst = max(worst, abs(float(obj.kd_loss(a, b)) - kd))
        mean = [sum(bv[i][c] for i in range(n)) / n for c in range(k)]
        worst = max(worst, abs(float(obj.div_loss(b)) + _h(mean)))
    ok = worst < 1e-9
    return CheckResult("loss oracles", ok, f"max abs deviation {worst:.2e} over {n_cases} cases")


def _toy_branches(seed: int = 0) -> tuple[Branch, Branch]:
    torch.manual_seed(seed)
    fm = Branch(Role.FM, 3, 16, 3, TOY_FM).double().eval()
    sm = Branch(Role.SM, 3, 16, 3, TOY_SM).double().eval()
    return fm, sm


def gradient_checks(seed: int = 0, tol: float = 1e-4) -> list[CheckResult]:
    fm, sm = _toy_branches(seed)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(6, 3, 16, dtype=torch.float64, generator=gen)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    out = []
    set_phase_freezing(fm, sm, Phase.PRETRAIN)
    for b in (fm, sm):
        err = check_gradients(b, lambda b=b: obj.source_ce(linear_view(b, encode(b, x)), y))
        out.append(CheckResult(f"gradient source_ce {b.role.value}", err < tol, f"max rel err {err:.2e}"))

    set_phase_freezing(fm, sm, Phase.ADAPT)
    with torch.no_grad():
        z_fm = encode(fm, x)
        p_sm_fixed = linear_view(sm, encode(sm, x)).values
        teacher = linear_view(fm, z_fm).values
    err = check_gradients(fm, lambda: obj.total_fm_loss(
        obj.joint_distribution(linear_view(fm, z_fm), p_sm_fixed)))
    out.append(CheckResult("gradient L_FM", err < tol, f"max rel err {err:.2e}"))

    labels = torch.tensor([0, 2, 1, 1, 0, 2])
    mask = torch.tensor([True, True, False, True, False, True])
    w = obj.LossWeights()

    def l_sm():
        p = linear_view(sm, encode(sm, x))
        return obj.total_sm_loss(obj.masked_ce(p, labels, mask), obj.kd_loss(teacher, p), obj.div_loss(p), w)

    err = check_gradients(sm, l_sm)
    out.append(CheckResult("gradient L_SM", err < tol, f"max rel err {err:.2e}"))
    return out


def refinement_scan(n_cases: int = 10_000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    k = 4
    fm_l = rng.integers(0, k, n_cases)
    sm_l = rng.integers(0, k, n_cases)
    fm_p = rng.integers(0, k, n_cases)
    sims_fm = rng.integers(-2, 3, (n_cases, k)) / 2.0
    sims_sm = rng.integers(-2, 3, (n_cases, k)) / 2.0
    refined, _ = refine_labels(torch.from_numpy(fm_l), torch.from_numpy(sm_l),
                               torch.from_numpy(sims_fm), torch.from_numpy(sims_sm))
    mask = consensus_mask(torch.from_numpy(fm_l), torch.from_numpy(fm_p))
    bad = 0
    for i in range(n_cases):
        if fm_l[i] == sm_l[i]:
            want = fm_l[i]
        else:
            want, best = 0, -math.inf
            for c in range(k):
                v = max(sims_fm[i, c], sims_sm[i, c])
                if v > best:
                    want, best = c, v
        bad += int(refined[i]) != want or bool(mask[i]) != (fm_l[i] == fm_p[i])
    return CheckResult("refinement scan", bad == 0, f"{bad} mismatches in {n_cases} cases")


def run_self_checks() -> list[CheckResult]:
    return [loss_oracles(), *gradient_checks(), refinement_scan()]
