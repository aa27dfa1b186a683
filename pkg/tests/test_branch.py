import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fused.branch import (Branch, Phase, ProbBatch, Role, View, encode, linear_view,
                          load_checkpoint, predicted_label, save_checkpoint, set_phase_freezing,
                          state_hash)
from fused.engine import check_gradients
from fused.objectives import source_ce
from fused.prototypes import init_from_classifier

from conftest import random_probs


def _with_weights(branch, W, b):
    with torch.no_grad():
        branch.classifier.weight.copy_(torch.as_tensor(W, dtype=branch.classifier.weight.dtype))
        branch.classifier.bias.copy_(torch.as_tensor(b, dtype=branch.classifier.bias.dtype))


def scalar_softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def test_encode_rejects_wrong_shape(small_branches):
    fm, _ = small_branches
    with pytest.raises(ValueError, match=r"C=3, T=16.*\(2, 4, 16\)"):
        encode(fm, torch.zeros(2, 4, 16, dtype=torch.float64))


def test_zero_encoder_gives_zero_features(small_branches):
    _, sm = small_branches
    sm.eval()
    with torch.no_grad():
        for p in sm.encoder.parameters():
            p.zero_()
    # batch norm with zero affine weight and bias maps everything to zero
    z = encode(sm, torch.randn(4, 3, 16, dtype=torch.float64))
    assert torch.count_nonzero(z) == 0


def test_identical_rows_identical_features(small_branches):
    fm, sm = small_branches
    x = torch.randn(1, 3, 16, dtype=torch.float64).repeat(3, 1, 1)
    for b in (fm, sm):
        b.eval()
        z = encode(b, x)
        assert torch.equal(z[0], z[1]) and torch.equal(z[1], z[2])


def test_encode_matches_stored_parameter_recomputation(small_branches, tmp_path):
    fm, sm = small_branches
    x = torch.randn(5, 3, 16, dtype=torch.float64)
    for b in (fm, sm):
        b.eval()
        save_checkpoint(tmp_path / "b.ckpt", b)
        again, _ = load_checkpoint(tmp_path / "b.ckpt")
        again.eval()
        assert torch.equal(encode(b, x), encode(again, x))


def test_fm_encoder_forward_reevaluated_by_hand(small_branches):
    fm, _ = small_branches
    fm.eval()
    x = torch.randn(2, 3, 16, dtype=torch.float64)
    ref = x
    for layer in fm.encoder.trunk:
        ref = layer(ref)
    lin, _, bn = fm.encoder.projection
    h = torch.nn.functional.elu(ref.flatten(1) @ lin.weight.T + lin.bias)
    h = (h - bn.running_mean) / torch.sqrt(bn.running_var + bn.eps) * bn.weight + bn.bias
    assert torch.allclose(encode(fm, x), h, atol=1e-12)


@pytest.mark.parametrize("logits,expected", [
    ([0.0, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]),
    ([math.log(2), 0.0], [2 / 3, 1 / 3]),
])
def test_linear_view_closed_forms(logits, expected):
    k = len(logits)
    b = Branch(Role.SM, 2, 8, k).double()
    _with_weights(b, np.zeros((k, b.feature_dim)), logits)
    p = linear_view(b, torch.zeros(1, b.feature_dim, dtype=torch.float64))
    assert p.view is View.LINEAR and p.branch_role is Role.SM
    assert torch.allclose(p.values[0], torch.tensor(expected, dtype=torch.float64), atol=1e-15)


def test_linear_view_matches_scalar_softmax(rng, small_branches):
    _, sm = small_branches
    z = torch.from_numpy(rng.normal(size=(6, sm.feature_dim)))
    p = linear_view(sm, z).values.detach()
    W = sm.classifier.weight.detach().numpy()
    bias = sm.classifier.bias.detach().numpy()
    for i in range(6):
        logits = [sum(W[k, d] * float(z[i, d]) for d in range(sm.feature_dim)) + bias[k]
                  for k in range(3)]
        ref = scalar_softmax(logits)
        assert max(abs(float(p[i, k]) - ref[k]) for k in range(3)) < 1e-10


def test_linear_view_flags_nonfinite_row(small_branches):
    _, sm = small_branches
    z = torch.zeros(4, sm.feature_dim, dtype=torch.float64)
    z[2, 0] = float("nan")
    with pytest.raises(ValueError, match="row 2"):
        linear_view(sm, z)


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-50, 50))
@settings(max_examples=60, deadline=None)
def test_linear_view_shift_invariance(logits, shift):
    k = len(logits)
    b = Branch(Role.SM, 2, 8, k).double()
    z = torch.zeros(1, b.feature_dim, dtype=torch.float64)
    _with_weights(b, np.zeros((k, b.feature_dim)), logits)
    p1 = linear_view(b, z).values
    _with_weights(b, np.zeros((k, b.feature_dim)), [v + shift for v in logits])
    p2 = linear_view(b, z).values
    assert torch.allclose(p1, p2, atol=1e-9, rtol=0)


def test_probbatch_rejects_non_stochastic_rows():
    with pytest.raises(ValueError, match="row 1"):
        ProbBatch(torch.tensor([[0.5, 0.5], [0.5, 0.6]]))
    with pytest.raises(ValueError, match="negative"):
        ProbBatch(torch.tensor([[1.5, -0.5]]))


@pytest.mark.parametrize("row,expected", [([0.1, 0.7, 0.2], 1), ([0.5, 0.5], 0)])
def test_predicted_label(row, expected):
    assert int(predicted_label(ProbBatch(torch.tensor([row])))[0]) == expected


def test_predicted_label_matches_linear_scan(rng):
    p = random_probs(rng, 3, 5)
    p[1] = torch.tensor([0.3, 0.1, 0.3, 0.2, 0.1], dtype=torch.float64)  # tie
    got = predicted_label(ProbBatch(p)).tolist()
    expected = []
    for row in p.tolist():
        best = 0
        for k in range(1, len(row)):
            if row[k] > row[best]:
                best = k
        expected.append(best)
    assert got == expected


def test_freezing_flags(small_branches):
    fm, sm = small_branches
    set_phase_freezing(fm, sm, Phase.ADAPT)
    assert (fm.encoder_trainable, fm.classifier_trainable) == (False, True)
    assert (sm.encoder_trainable, sm.classifier_trainable) == (True, False)
    set_phase_freezing(fm, sm, Phase.PRETRAIN)
    assert all([fm.encoder_trainable, fm.classifier_trainable,
                sm.encoder_trainable, sm.classifier_trainable])


def test_frozen_groups_survive_optimizer_step(small_branches):
    fm, sm = small_branches
    set_phase_freezing(fm, sm, Phase.ADAPT)
    before = state_hash(fm.encoder), state_hash(sm.classifier)
    x = torch.randn(4, 3, 16, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 0])
    fm.eval()
    for b in (fm, sm):
        opt = torch.optim.Adam(b.trainable_parameters(), lr=0.1)
        loss = source_ce(linear_view(b, encode(b, x)), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert (state_hash(fm.encoder), state_hash(sm.classifier)) == before


def test_linear_view_gradients_match_finite_differences(rng, small_branches):
    _, sm = small_branches
    z = torch.from_numpy(rng.normal(size=(5, sm.feature_dim)))
    y = torch.tensor([0, 1, 2, 1, 0])
    err = check_gradients(list(sm.classifier.parameters()),
                          lambda: source_ce(linear_view(sm, z), y))
    assert err < 1e-6


def test_checkpoint_roundtrip_with_bank(small_branches, tmp_path):
    fm, _ = small_branches
    bank = init_from_classifier(fm)
    h1 = save_checkpoint(tmp_path / "fm.ckpt", fm, bank)
    again, bank2 = load_checkpoint(tmp_path / "fm.ckpt")
    assert state_hash(again) == state_hash(fm)
    assert torch.equal(bank2.centroids, bank.centroids)
    h2 = save_checkpoint(tmp_path / "fm2.ckpt", again, bank2)
    assert h1 == h2


def test_checkpoint_rejects_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(tmp_path / "x.ckpt")
