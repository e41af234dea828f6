import math

import pytest
import torch

from _oracles import tiny_problem
from hbenhance.objective import (
    ObjectiveConfig, ObjectiveConfigError, charbonnier_loss, charbonnier_per_sample, total_objective,
)


def test_charbonnier_identity_is_epsilon():
    x = torch.rand(2, 3, 4, 4, dtype=torch.float64)
    assert charbonnier_loss(x, x, 5e-3).item() == 5e-3


def test_charbonnier_uniform_difference():
    x = torch.zeros(1, 3, 4, 4, dtype=torch.float64)
    assert charbonnier_loss(x + 0.12, x, 5e-3).item() == pytest.approx(math.sqrt(0.0144 + 2.5e-5), abs=1e-15)


def test_charbonnier_small_epsilon_tends_to_l1():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(50, generator=g, dtype=torch.float64), torch.rand(50, generator=g, dtype=torch.float64)
    assert charbonnier_loss(a, b, 1e-9).item() == pytest.approx((a - b).abs().mean().item(), abs=1e-8)


def test_literal_form():
    x = torch.zeros(4, dtype=torch.float64)
    assert charbonnier_loss(x + 0.1, x, 0.5, form="literal").item() == pytest.approx(0.01 + 0.25)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        charbonnier_loss(torch.zeros(3), torch.zeros(4))


def test_zero_weights_reduce_to_stage_summed_recovery():
    net, head, proj, bad, clean, labels, _ = tiny_problem(0)
    cfg = ObjectiveConfig(alpha=0.0, beta_fi=0.0)
    terms = total_objective(net, head, proj, bad, clean, labels, cfg)
    outs = net(bad)
    expect = sum(charbonnier_per_sample(o, clean) for o in outs).mean()
    assert terms.total.item() == pytest.approx(expect.item(), rel=1e-12)


def test_weighted_sum_matches_hand_combination():
    net, head, proj, bad, clean, labels, _ = tiny_problem(1)
    cfg = ObjectiveConfig(alpha=0.01, beta_fi=0.1)
    t = total_objective(net, head, proj, bad, clean, labels, cfg)
    assert t.total.item() == pytest.approx(t.recovery.item() + 0.01 * t.task.item() + 0.1 * t.identity.item(),
                                           rel=1e-12)


def test_batch_mean_of_independent_samples():
    net, head, proj, bad, clean, labels, cfg = tiny_problem(2)
    net.eval()  # batch statistics would couple the samples
    both = total_objective(net, head, proj, bad, clean, labels, cfg).total.item()
    singles = [total_objective(net, head, proj, bad[i:i + 1], clean[i:i + 1],
                               {k: v[i:i + 1] for k, v in labels.items()}, cfg).total.item() for i in range(2)]
    assert both == pytest.approx(sum(singles) / 2, rel=1e-10)


def test_final_stage_only():
    net, head, proj, bad, clean, labels, _ = tiny_problem(0)
    cfg = ObjectiveConfig(alpha=0, beta_fi=0, recovery_stages="final")
    t = total_objective(net, head, proj, bad, clean, labels, cfg)
    assert t.total.item() == pytest.approx(charbonnier_per_sample(net(bad)[-1], clean).mean().item(), rel=1e-12)


def test_config_errors():
    net, head, proj, bad, clean, labels, _ = tiny_problem(0)
    with pytest.raises(ObjectiveConfigError):
        total_objective(net, head, proj, bad, clean, None, ObjectiveConfig(alpha=0.1))
    with pytest.raises(ObjectiveConfigError):
        total_objective(net, None, proj, bad, clean, labels, ObjectiveConfig())
    with pytest.raises(ObjectiveConfigError):
        total_objective(net, head, None, bad, clean, labels, ObjectiveConfig(beta_fi=0.1))
    with pytest.raises(ObjectiveConfigError):
        ObjectiveConfig(epsilon=0).validate()


def test_head_receives_no_gradient():
    net, head, proj, bad, clean, labels, cfg = tiny_problem(0)
    total_objective(net, head, proj, bad, clean, labels, cfg).total.backward()
    assert all(p.grad is None for p in head.parameters())
    assert all(p.grad is not None for p in net.parameters())
