import numpy as np
import pytest
import torch

from fused.branch import Branch, Role, encode, predicted_label
from fused.objectives import masked_ce
from fused.prototypes import PrototypeBank, init_from_classifier
from fused.pseudo_label import Stage, build_bundle, consensus_mask, refine_labels


def brute_force_refine(fm_l, sm_l, sims_fm, sims_sm):
    """Scan every (branch, class) pair; keep the first strict maximum in class order."""
    out = []
    for i in range(len(fm_l)):
        if fm_l[i] == sm_l[i]:
            out.append((fm_l[i], Stage.AGREEMENT))
            continue
        best_k, best_v = None, None
        for k in range(len(sims_fm[i])):
            for sims in (sims_fm, sims_sm):
                v = sims[i][k]
                if best_v is None or v > best_v:
                    best_k, best_v = k, v
        out.append((best_k, Stage.ARBITRATION))
    return out


def test_consensus_mask_cases():
    assert consensus_mask(torch.tensor([2]), torch.tensor([2])).tolist() == [True]
    assert consensus_mask(torch.tensor([0]), torch.tensor([3])).tolist() == [False]
    a = torch.tensor([0, 1, 2, 3, 1])
    b = torch.tensor([0, 2, 2, 1, 1])
    assert consensus_mask(a, b).tolist() == [x == y for x, y in zip(a.tolist(), b.tolist())]


def test_refine_agreement_passthrough():
    r, s = refine_labels(torch.tensor([1]), torch.tensor([1]),
                         torch.tensor([[0.9, 0.1]]), torch.tensor([[0.9, 0.1]]))
    assert r.tolist() == [1] and s.tolist() == [Stage.AGREEMENT]


def test_refine_arbitration_example():
    r, s = refine_labels(torch.tensor([0]), torch.tensor([1]),
                         torch.tensor([[0.9, 0.1]]), torch.tensor([[0.2, 0.95]]))
    assert r.tolist() == [1] and s.tolist() == [Stage.ARBITRATION]


def test_refine_matches_brute_force_with_ties(rng):
    n, k = 500, 4
    fm_l = torch.from_numpy(rng.integers(0, k, n))
    sm_l = torch.from_numpy(rng.integers(0, k, n))
    # coarse grid forces plenty of exact ties
    sims_fm = torch.from_numpy(rng.integers(-2, 3, (n, k)) / 2.0)
    sims_sm = torch.from_numpy(rng.integers(-2, 3, (n, k)) / 2.0)
    r, s = refine_labels(fm_l, sm_l, sims_fm, sims_sm)
    expected = brute_force_refine(fm_l.tolist(), sm_l.tolist(), sims_fm.tolist(), sims_sm.tolist())
    assert list(zip(r.tolist(), s.tolist())) == [(k_, int(st)) for k_, st in expected]


def test_refine_invariant_to_common_positive_scale(rng):
    n, k = 200, 5
    fm_l = torch.from_numpy(rng.integers(0, k, n))
    sm_l = torch.from_numpy(rng.integers(0, k, n))
    a = torch.from_numpy(rng.uniform(-1, 1, (n, k)))
    b = torch.from_numpy(rng.uniform(-1, 1, (n, k)))
    r1, _ = refine_labels(fm_l, sm_l, a, b)
    r2, _ = refine_labels(fm_l, sm_l, 3.7 * a, 3.7 * b)
    assert torch.equal(r1, r2)


def test_refine_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        refine_labels(torch.tensor([0, 1]), torch.tensor([0]), torch.zeros(2, 3), torch.zeros(2, 3))


def test_four_way_agreement(rng):
    n, k = 300, 3
    common = torch.from_numpy(rng.integers(0, k, n))
    sims = torch.from_numpy(rng.uniform(-1, 1, (n, k)))
    r, s = refine_labels(common, common, sims, sims)
    assert torch.equal(r, common)
    assert torch.all(consensus_mask(common, common))


def test_mask_rate_drops_under_one_sided_label_noise(rng):
    n, k = 2000, 4
    clean = torch.from_numpy(rng.integers(0, k, n))
    rates = []
    for noise in (0.0, 0.1, 0.3, 0.6):
        flip = torch.from_numpy(rng.uniform(size=n) < noise)
        noisy = torch.where(flip, torch.from_numpy(rng.integers(0, k, n)), clean)
        rates.append(float(consensus_mask(clean, noisy).float().mean()))
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def _aligned_pair():
    torch.manual_seed(3)
    fm = Branch(Role.FM, 3, 16, 3, {"width": 4, "kernel": 5, "n_bins": 2, "proj_dim": 6}).double()
    fm.eval()
    return fm


def test_bundle_identical_branches_all_agree():
    fm = _aligned_pair()
    bank = init_from_classifier(fm, temperature=1.0)
    # with zero bias and centroids equal to normalized weight rows, linear and
    # prototype views can still disagree; make the weight rows equal-norm so
    # both rank classes by the same dot products
    with torch.no_grad():
        w = fm.classifier.weight
        w.copy_(w / w.norm(dim=1, keepdim=True))
        fm.classifier.bias.zero_()
    bank = init_from_classifier(fm, temperature=1.0)
    x = torch.randn(20, 3, 16, dtype=torch.float64)
    b = build_bundle(fm, fm, bank, bank, x)
    assert bool(b.mask.all())
    assert bool((b.stage_used == Stage.AGREEMENT).all())
    assert torch.equal(b.refined, b.labels_fm_linear)


def test_bundle_proto_labels_follow_initial_centroids():
    fm = _aligned_pair()
    bank = init_from_classifier(fm)
    x = torch.randn(10, 3, 16, dtype=torch.float64)
    b = build_bundle(fm, fm, bank, bank, x)
    with torch.no_grad():
        z = encode(fm, x)
        W = fm.classifier.weight
        cos = (z / z.norm(dim=1, keepdim=True)) @ (W / W.norm(dim=1, keepdim=True)).T
    assert torch.equal(b.labels_fm_proto, torch.argmax(cos, dim=1))
    assert torch.allclose(b.sims_fm, cos, atol=1e-12)


def test_bundle_adversarial_all_disagree_gives_zero_ce():
    fm = _aligned_pair()
    x = torch.randn(12, 3, 16, dtype=torch.float64)
    with torch.no_grad():
        z = encode(fm, x)
        lin = predicted_label(torch.softmax(fm.classifier(z), dim=1))
    # build a bank whose class c centroid points at the features of samples
    # whose linear label is (c + 1) mod K, so the prototype view always disagrees
    k = fm.num_classes
    zn = z / z.norm(dim=1, keepdim=True)
    rows = []
    for c in range(k):
        sel = lin == (c + 1) % k
        v = zn[sel].mean(dim=0) if sel.any() else torch.randn(z.shape[1], dtype=torch.float64)
        rows.append(v / v.norm())
    bank = PrototypeBank(torch.stack(rows), temperature=1000.0, owner_role=Role.FM)
    b = build_bundle(fm, fm, bank, bank, x)
    if bool(b.mask.any()):
        pytest.skip("random features did not separate; adversarial construction not exact")
    p = torch.softmax(fm.classifier(z), dim=1)
    assert float(masked_ce(p, b.refined, b.mask).detach()) == 0.0


def test_variant_selects_single_view():
    fm = _aligned_pair()
    bank = init_from_classifier(fm)
    x = torch.randn(10, 3, 16, dtype=torch.float64)
    b = build_bundle(fm, fm, bank, bank, x, variant="fm_proto")
    assert torch.equal(b.refined, b.labels_fm_proto)
    with pytest.raises(ValueError):
        build_bundle(fm, fm, bank, bank, x, variant="nope")
