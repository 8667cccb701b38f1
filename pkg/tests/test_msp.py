import math

import numpy as np
import pytest
import torch

from ckda.errors import ConfigError, StateError
from ckda.msp import MSP, compose_prompt, merge_prompt, prompt_alignment_loss
from ckda.synth_data import Modality

from oracles import finite_difference_check, matvec


def _msp(seed=0, dropout=0.1, norm_stats="batch"):
    torch.manual_seed(seed)
    msp = MSP(192, 8, (4, 4), dropout=dropout, norm_stats=norm_stats).double()
    for branch in msp.branches.values():
        torch.nn.init.normal_(branch.fc2.weight, std=0.1)
    return msp


def _tokens(b=4, seed=1):
    return torch.rand(b, 16, 192, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_fresh_branches_emit_zero():
    torch.manual_seed(0)
    msp = MSP(192, 8, (4, 4)).double()
    out = msp(_tokens(), torch.tensor([0, 1, 0, 1]))
    assert out.shape == (4, 32, 32, 3)
    assert torch.count_nonzero(out) == 0


def test_eval_matches_loop_oracle():
    msp = _msp(norm_stats="running")
    branch = msp.branch(Modality.INFRARED)
    bn = branch.bn
    bn.running_mean.normal_()
    bn.running_var.uniform_(0.5, 2.0)
    torch.nn.init.normal_(bn.weight)
    torch.nn.init.normal_(bn.bias)
    msp.eval()
    tokens = _tokens(1)
    out = msp.forward_single(tokens, Modality.INFRARED)
    w1, b1 = branch.fc1.weight.tolist(), branch.fc1.bias.tolist()
    w2, b2 = branch.fc2.weight.tolist(), branch.fc2.bias.tolist()
    rm, rv = bn.running_mean.tolist(), bn.running_var.tolist()
    gamma, shift = bn.weight.tolist(), bn.bias.tolist()
    for t in (0, 9):
        h = matvec(w1, b1, tokens[0, t].tolist())
        h = [(v - rm[i]) / math.sqrt(rv[i] + bn.eps) * gamma[i] + shift[i] for i, v in enumerate(h)]
        expected = matvec(w2, b2, h)
        gi, gj = divmod(t, 4)
        patch = out[0, gi * 8:(gi + 1) * 8, gj * 8:(gj + 1) * 8].reshape(-1)
        np.testing.assert_allclose(patch.tolist(), expected, atol=1e-10)


def test_batch_stats_eval_matches_loop_oracle():
    msp = _msp()
    branch = msp.branch(Modality.VISIBLE)
    torch.nn.init.normal_(branch.bn.weight)
    torch.nn.init.normal_(branch.bn.bias)
    msp.eval()
    tokens = _tokens(2)
    out = msp.forward_single(tokens, Modality.VISIBLE)
    w1, b1 = branch.fc1.weight.tolist(), branch.fc1.bias.tolist()
    w2, b2 = branch.fc2.weight.tolist(), branch.fc2.bias.tolist()
    gamma, shift = branch.bn.weight.tolist(), branch.bn.bias.tolist()
    hidden = [matvec(w1, b1, tokens[b, t].tolist()) for b in range(2) for t in range(16)]
    n = len(hidden)
    mean = [sum(h[i] for h in hidden) / n for i in range(len(gamma))]
    var = [sum((h[i] - mean[i]) ** 2 for h in hidden) / n for i in range(len(gamma))]
    for b, t in ((0, 3), (1, 12)):
        h = hidden[b * 16 + t]
        h = [(v - mean[i]) / math.sqrt(var[i] + branch.bn.eps) * gamma[i] + shift[i]
             for i, v in enumerate(h)]
        expected = matvec(w2, b2, h)
        gi, gj = divmod(t, 4)
        patch = out[b, gi * 8:(gi + 1) * 8, gj * 8:(gj + 1) * 8].reshape(-1)
        np.testing.assert_allclose(patch.tolist(), expected, atol=1e-10)


def test_batch_stats_keep_no_running_state():
    msp = _msp()
    assert all(b.bn.running_mean is None for b in msp.branches.values())
    assert _msp(norm_stats="running").branch(Modality.VISIBLE).bn.running_mean is not None
    with pytest.raises(ConfigError):
        MSP(192, 8, (4, 4), norm_stats="frozen")


def test_eval_is_deterministic():
    msp = _msp().eval()
    tokens, mod = _tokens(), torch.tensor([0, 1, 1, 0])
    assert torch.equal(msp(tokens, mod), msp(tokens, mod))


def test_training_batch_of_one_rejected():
    msp = _msp().train()
    with pytest.raises(StateError):
        msp(_tokens(3), torch.tensor([0, 0, 1]))


def test_modality_isolation():
    msp = _msp().eval()
    tokens, mod = _tokens(), torch.tensor([0, 1, 0, 1])
    before = msp(tokens, mod)
    with torch.no_grad():
        for p in msp.branch(Modality.VISIBLE).parameters():
            p.add_(1.0)
    after = msp(tokens, mod)
    assert torch.equal(before[1::2], after[1::2])
    assert not torch.equal(before[0::2], after[0::2])


def test_routing_matches_single_branch_calls():
    msp = _msp().eval()
    tokens, mod = _tokens(), torch.tensor([1, 0, 0, 1])
    routed = msp(tokens, mod)
    assert torch.equal(routed[[1, 2]], msp.forward_single(tokens[[1, 2]], Modality.VISIBLE))
    assert torch.equal(routed[[0, 3]], msp.forward_single(tokens[[0, 3]], Modality.INFRARED))


def test_bad_config():
    with pytest.raises(ConfigError):
        MSP(190, 8, (4, 4))
    with pytest.raises(ConfigError):
        MSP(192, 8, (4, 4), dropout=1.0)


def test_compose_and_merge():
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(2, 4, 4, 3, generator=g), torch.randn(2, 4, 4, 3, generator=g)
    zero = torch.zeros_like(a)
    assert torch.equal(compose_prompt(zero, b), b)
    assert torch.equal(compose_prompt(a, zero), a)
    assert torch.equal(compose_prompt(a, b), compose_prompt(b, a))
    assert torch.equal(compose_prompt(a, b), b + a)
    # dyadic values: the sum and both differences are exact
    da, db = torch.full((2, 2), 0.375), torch.full((2, 2), -1.25)
    assert torch.count_nonzero(compose_prompt(da, db) - db - da) == 0
    assert torch.equal(merge_prompt(a, zero), a)
    assert torch.equal(merge_prompt(zero, b), b)
    assert torch.equal(merge_prompt(a, b), a + b)
    with pytest.raises(ConfigError):
        merge_prompt(a, b[:1])


def test_alignment_loss_examples():
    ones, zeros = torch.ones(2, 4, 4, 3), torch.zeros(2, 4, 4, 3)
    assert prompt_alignment_loss(ones, ones).item() == 0.0
    assert prompt_alignment_loss(ones, zeros).item() == 1.0
    g = torch.Generator().manual_seed(0)
    a, b = torch.randn(10, generator=g), torch.randn(10, generator=g)
    assert prompt_alignment_loss(a, b) == prompt_alignment_loss(b, a)
    assert prompt_alignment_loss(a, b) > 0
    with pytest.raises(StateError):
        prompt_alignment_loss(ones, None)


def test_forward_gradients_match_finite_differences():
    torch.manual_seed(0)
    msp = MSP(12, 2, (2, 2), reduction=4, dropout=0.0).double()
    for branch in msp.branches.values():
        torch.nn.init.normal_(branch.fc2.weight, std=0.5)
    tokens = torch.rand(4, 4, 12, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    mod = torch.tensor([0, 1, 0, 1])
    target = torch.randn(4, 4, 4, 3, dtype=torch.float64)
    msp.train()
    worst, _ = finite_difference_check(lambda: (msp(tokens, mod) * target).mean(),
                                       list(msp.parameters()))
    assert worst < 1e-4


def test_alignment_loss_gradient():
    torch.manual_seed(0)
    msp = MSP(12, 2, (2, 2), reduction=4, dropout=0.0).double()
    for branch in msp.branches.values():
        torch.nn.init.normal_(branch.fc2.weight, std=0.5)
    tokens = torch.rand(4, 4, 12, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    mod = torch.tensor([0, 1, 0, 1])
    # previous prompt far from current: no difference sits near the kink at 0
    previous = torch.full((4, 4, 4, 3), 5.0, dtype=torch.float64)
    msp.train()
    worst, _ = finite_difference_check(
        lambda: prompt_alignment_loss(msp(tokens, mod), previous), list(msp.parameters()))
    assert worst < 1e-4
