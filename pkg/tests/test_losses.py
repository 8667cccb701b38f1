import math

import pytest
import torch

from ckda.errors import ConfigError
from ckda.losses import LossWeights, ce_loss, total_loss, triplet_loss

from oracles import finite_difference_check, log_sum_exp_ce, triplet_exhaustive


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


def test_uniform_logits_give_log_n():
    loss = ce_loss(torch.zeros(5, 4, dtype=torch.float64), torch.tensor([0, 1, 2, 3, 0]))
    assert abs(loss.item() - math.log(4)) < 1e-15
    assert abs(loss.item() - 1.386294) < 1e-6


def test_confident_logits_approach_zero():
    logits = torch.full((2, 3), -1e3, dtype=torch.float64)
    logits[0, 1] = logits[1, 2] = 1e3
    assert ce_loss(logits, torch.tensor([1, 2])).item() == 0.0


def test_ce_matches_log_sum_exp_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(32, 7, generator=g, dtype=torch.float64) * 3
    labels = torch.randint(0, 7, (32,), generator=g)
    expected = log_sum_exp_ce(logits.tolist(), labels.tolist())
    assert abs(ce_loss(logits, labels).item() - expected) < 1e-10


def test_ce_rejects_out_of_range_labels():
    with pytest.raises(ValueError):
        ce_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


def _per_anchor(feats, labels, margin=0.3):
    return triplet_loss(_t(feats), torch.tensor(labels), margin, reduction="none")


def test_triplet_hand_examples():
    # anchor is row 0; rows 0/1 share an identity, row 2 is the negative
    assert _per_anchor([[0, 0], [0, 1], [3, 0]], [0, 0, 1])[0].item() == 0.0
    assert abs(_per_anchor([[0, 0], [0, 1], [1.1, 0]], [0, 0, 1])[0].item() - 0.2) < 1e-12


def test_identical_features_give_margin():
    feats = torch.ones(6, 3, dtype=torch.float64)
    loss = triplet_loss(feats, torch.tensor([0, 0, 0, 1, 1, 1]), 0.3)
    assert abs(loss.item() - 0.3) < 1e-6


def test_singleton_anchor_skipped_and_all_skipped_error():
    out = _per_anchor([[0, 0], [0, 1], [3, 0]], [0, 0, 1])
    assert math.isnan(out[2].item())
    with pytest.raises(ValueError):
        triplet_loss(_t([[0, 0], [1, 1]]), torch.tensor([0, 1]))


def test_batch_hard_matches_exhaustive_oracle():
    g = torch.Generator().manual_seed(0)
    for b in (4, 12, 32):
        feats = torch.randn(b, 5, generator=g, dtype=torch.float64)
        labels = torch.arange(b) % max(2, b // 4)
        expected = triplet_exhaustive(feats.tolist(), labels.tolist(), 0.3)
        assert abs(triplet_loss(feats, labels, 0.3).item() - expected) < 1e-10


def test_cross_modality_mining_restricts_candidates():
    feats = _t([[0, 0], [0, 5], [0, 1], [1, 0]])
    labels = torch.tensor([0, 0, 0, 1])
    modality = torch.tensor([0, 1, 0, 1])
    per = triplet_loss(feats, labels, 0.3, modality, "cross_modality", reduction="none")
    # anchor 0 may only use row 1 as positive and row 3 as negative
    assert abs(per[0].item() - max(0.0, 5 - 1 + 0.3)) < 1e-12
    with pytest.raises(ConfigError):
        triplet_loss(feats, labels, mining="within")


def test_base_loss_gradients():
    g = torch.Generator().manual_seed(1)
    feats = torch.randn(8, 4, generator=g, dtype=torch.float64).requires_grad_()
    labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
    worst, _ = finite_difference_check(lambda: triplet_loss(feats, labels, 0.3), [feats])
    assert worst < 1e-4
    logits = torch.randn(8, 4, generator=g, dtype=torch.float64).requires_grad_()
    worst, _ = finite_difference_check(lambda: ce_loss(logits, labels), [logits])
    assert worst < 1e-4


def test_total_loss_examples():
    w = LossWeights()
    one = _t(1.0)
    total = total_loss(_t(0.6), _t(0.4), w, _t(0.5), _t(0.2), _t(0.4))
    assert abs(total.item() - 1.8) < 1e-15
    assert total_loss(_t(0.6), _t(0.4), w).item() == 1.0
    zero_w = LossWeights(alpha=0.0, beta=0.0)
    assert total_loss(one, one, zero_w, _t(3.0), _t(2.0), _t(5.0)).item() == 2.0


def test_total_loss_monotone_in_each_term():
    w = LossWeights()
    base = total_loss(_t(1.0), _t(1.0), w, _t(0.1), _t(0.1), _t(0.1)).item()
    for k in range(5):
        args = [_t(1.0), _t(1.0), _t(0.1), _t(0.1), _t(0.1)]
        args[k] = args[k] + 0.5
        assert total_loss(args[0], args[1], w, *args[2:]).item() >= base


@pytest.mark.parametrize("field,value", [("alpha", -1.0), ("beta", -0.1), ("mu", 1.5),
                                         ("margin", -0.3)])
def test_invalid_weights(field, value):
    with pytest.raises(ConfigError) as err:
        total_loss(_t(1.0), _t(1.0), LossWeights(**{field: value}))
    assert err.value.field == field
