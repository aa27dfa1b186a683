import numpy as np
import pytest
import torch

from fused.branch import Branch, Role

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_probs(rng, n, k):
    """Row-stochastic float64 matrix with strictly positive entries."""
    logits = rng.normal(size=(n, k)) * 2.0
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return torch.from_numpy(e / e.sum(axis=1, keepdims=True))


# tiny branches so finite-difference checks stay fast
SMALL_SM = {"f1": 2, "depth": 2, "kernel": 5, "sep_kernel": 3, "n_bins": 2, "dropout": 0.0}
SMALL_FM = {"width": 4, "kernel": 5, "n_bins": 2, "proj_dim": 6}


@pytest.fixture
def small_branches():
    torch.manual_seed(0)
    fm = Branch(Role.FM, 3, 16, 3, SMALL_FM).double()
    sm = Branch(Role.SM, 3, 16, 3, SMALL_SM).double()
    return fm, sm


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line, then fail the test if the criterion is not met."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def record(n: int, ok: bool, detail: str) -> None:
        lines.append(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
