import math

import numpy as np
import pytest
import torch

from ckda.cka import (
    PrototypeBank,
    affinity,
    cka_losses,
    inter_loss,
    intra_loss,
    prototypes_from_features,
    relational,
    row_kl,
)
from ckda.errors import NumericError

from oracles import affinity as affinity_oracle
from oracles import finite_difference_check
from oracles import relational as relational_oracle
from oracles import row_kl as row_kl_oracle


def _randn(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_single_prototype_gives_ones():
    out = affinity(_randn(5, 4), _randn(1, 4, seed=1))
    assert torch.equal(out, torch.ones(5, 1, dtype=torch.float64))


def test_affinity_hand_example():
    proto = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    row = affinity(torch.tensor([[1.0, 0.0]], dtype=torch.float64), proto, 0.1)[0]
    e = math.exp(10)
    np.testing.assert_allclose(row.tolist(), [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
    np.testing.assert_allclose(row.tolist(), [0.9999546, 4.54e-5], atol=1e-7)


def test_affinity_matches_loop_oracle():
    for seed in range(3):
        feats, protos = _randn(32, 16, seed=seed), _randn(50, 16, seed=seed + 10)
        np.testing.assert_allclose(affinity(feats, protos).numpy(),
                                   affinity_oracle(feats.tolist(), protos.tolist(), 0.1),
                                   rtol=0, atol=1e-10)


def test_affinity_rows_are_distributions():
    a = affinity(_randn(20, 8), _randn(30, 8, seed=2))
    assert torch.all(a > 0) and torch.all(a < 1)
    assert (a.sum(1) - 1).abs().max() < 1e-6


def test_affinity_scale_invariant():
    feats, protos = _randn(10, 8), _randn(12, 8, seed=1)
    scale = torch.rand(10, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(3)) * 100
    torch.testing.assert_close(affinity(feats * scale, protos), affinity(feats, protos),
                               rtol=0, atol=1e-12)


def test_zero_norm_row_reported():
    feats = _randn(4, 3)
    feats[2] = 0
    with pytest.raises(NumericError) as err:
        affinity(feats, _randn(3, 3))
    assert err.value.row == 2


def test_relational_examples():
    assert torch.equal(relational(torch.tensor([[0.3, 0.7]], dtype=torch.float64)),
                       torch.ones(1, 1, dtype=torch.float64))
    a = torch.tensor([[0.2, 0.8], [0.2, 0.8], [0.6, 0.4]], dtype=torch.float64)
    y = relational(a)
    assert torch.equal(y[0], y[1])
    assert (y.sum(1) - 1).abs().max() < 1e-6


def test_relational_matches_loop_oracle():
    for seed in range(3):
        a = affinity(_randn(32, 8, seed=seed), _randn(50, 8, seed=seed + 5))
        np.testing.assert_allclose(relational(a).numpy(), relational_oracle(a.tolist(), 0.1),
                                   rtol=0, atol=1e-10)


def test_kl_hand_example():
    p = torch.tensor([[0.8, 0.2]], dtype=torch.float64)
    q = torch.tensor([[0.5, 0.5]], dtype=torch.float64)
    expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert abs(row_kl(p, q).item() - expected) < 1e-15
    assert abs(expected - 0.19274) < 1e-5


def test_kl_matches_oracle_and_is_nonnegative():
    for seed in range(5):
        p = relational(affinity(_randn(12, 6, seed=seed), _randn(9, 6, seed=seed + 1)))
        q = relational(affinity(_randn(12, 6, seed=seed + 2), _randn(9, 6, seed=seed + 3)))
        kl = row_kl(p, q).item()
        assert kl >= 0
        assert abs(kl - row_kl_oracle(p.tolist(), q.tolist())) < 1e-10
        assert row_kl(p, p).item() == 0.0


def test_inter_intra_combine_directions():
    ys = [relational(affinity(_randn(6, 4, seed=s), _randn(5, 4, seed=50))) for s in range(4)]
    assert inter_loss(ys[0], ys[0], ys[1], ys[1]).item() == 0.0
    expected = row_kl_oracle(ys[0].tolist(), ys[1].tolist()) + row_kl_oracle(ys[2].tolist(),
                                                                             ys[3].tolist())
    assert abs(intra_loss(ys[0], ys[1], ys[2], ys[3]).item() - expected) < 1e-10


def test_prototypes_are_means():
    feats = _randn(8, 3)
    ids = [7, 7, 7, 7, 2, 2, 2, 2]
    mods = [0, 0, 1, 1, 0, 0, 1, 1]
    bank = prototypes_from_features(feats, ids, mods, stage=1)
    assert bank.identity_ids == (2, 7) and len(bank) == 2
    torch.testing.assert_close(bank.visible[1], (feats[0] + feats[1]) / 2, rtol=0, atol=1e-12)
    torch.testing.assert_close(bank.infrared[0], (feats[6] + feats[7]) / 2, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        prototypes_from_features(feats[:3], [1, 1, 1], [0, 0, 0], stage=1)


def _bank(n=6, dim=8):
    return PrototypeBank(1, _randn(n, dim, seed=20), _randn(n, dim, seed=21), tuple(range(n)))


def test_cka_losses_zero_when_models_agree_and_old_side_is_frozen():
    bank = _bank()
    mod = torch.tensor([0, 1] * 4)
    old = _randn(8, 8, seed=3).requires_grad_()
    inter, intra = cka_losses(old, old.detach().clone(), mod, bank)
    assert inter.item() == 0.0 and intra.item() == 0.0

    new = _randn(8, 8, seed=4).requires_grad_()
    inter, intra = cka_losses(old, new, mod, bank)
    (inter + intra).backward()
    assert old.grad is None
    assert new.grad.abs().sum() > 0


def test_cka_gradient_matches_finite_differences():
    bank = _bank()
    mod = torch.tensor([0, 1] * 4)
    old = _randn(8, 8, seed=3)
    new = _randn(8, 8, seed=4).requires_grad_()

    def fn():
        inter, intra = cka_losses(old, new, mod, bank)
        return 1.0 * (0.5 * inter + 0.5 * intra)

    worst, _ = finite_difference_check(fn, [new])
    assert worst < 1e-4
