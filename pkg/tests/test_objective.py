from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from probprompt.config import RunConfig
from probprompt.errors import DimensionError, DomainError, NormalizationError, SizeError
from probprompt.model import Stage2Model
from probprompt.numerics import grad_check, make_generator
from probprompt.objective import (
    LossBreakdown,
    Temperature,
    contrastive_from_similarity,
    contrastive_loss,
    distill_mse,
    diversity_loss,
    kl_to_standard_normal,
    stage1_loss,
    stage2_loss,
)
from probprompt.oracles import monte_carlo_kl
from probprompt.scenegen import Batch, generate_dataset, scene_tensors
from probprompt.training import _anchors, pseudo3d_loss


def _log_inv(tau):
    return torch.tensor(math.log(1 / tau))


# --- contrastive -----------------------------------------------------------


@pytest.mark.parametrize("n", [2, 5, 16])
def test_constant_similarity_gives_log_n(n):
    mean, per = contrastive_from_similarity(torch.full((n, n), 0.3), _log_inv(0.07))
    assert torch.allclose(per, torch.full((n,), math.log(n)), atol=1e-9)
    assert abs(mean.item() - math.log(n)) < 1e-9


def test_orthogonal_pairs_closed_form():
    e = torch.eye(2)
    _, per = contrastive_loss(e, e, _log_inv(1.0))
    assert torch.allclose(per, torch.full((2,), math.log(1 + math.exp(-1))), atol=1e-12)
    assert per[0].item() == pytest.approx(0.313262, abs=1e-6)
    _, sharp = contrastive_loss(e, e, Temperature(0.07))
    expected = math.log1p(math.exp(-1 / 0.07))
    assert torch.allclose(sharp, torch.full((2,), expected), rtol=1e-9)
    assert expected == pytest.approx(6.2e-7, rel=0.05)


def test_smaller_tau_sharpens_identity_alignment():
    losses = [contrastive_from_similarity(torch.eye(4), _log_inv(t))[0].item() for t in (1.0, 0.5, 0.07)]
    assert losses[0] > losses[1] > losses[2] >= 0


def test_contrastive_needs_two_pairs_and_matching_shapes():
    with pytest.raises(SizeError):
        contrastive_loss(torch.ones(1, 3), torch.ones(1, 3), _log_inv(1))
    with pytest.raises(DimensionError):
        contrastive_loss(torch.ones(2, 3), torch.ones(3, 3), _log_inv(1))


def test_contrastive_matches_direct_softmax():
    gen = make_generator(0)
    a, b = torch.randn(6, 4, generator=gen), torch.randn(6, 4, generator=gen)
    mean, per = contrastive_loss(a, b, _log_inv(0.2))
    an, bn = a / a.norm(dim=1, keepdim=True), b / b.norm(dim=1, keepdim=True)
    expected = [-math.log(math.exp((an[i] @ bn[i]).item() / 0.2) / sum(math.exp((an[i] @ bn[k]).item() / 0.2) for k in range(6))) for i in range(6)]
    assert np.allclose(per.numpy(), expected, atol=1e-12)
    assert mean.item() >= 0


def test_temperature_parameter():
    t = Temperature()
    assert t.tau == pytest.approx(0.07, rel=1e-12)
    assert t.log_inv_tau.requires_grad
    a = torch.randn(3, 4, generator=make_generator(1))
    contrastive_loss(a, a.flip(0), t)[0].backward()
    assert t.log_inv_tau.grad is not None


# --- diversity -------------------------------------------------------------


def test_diversity_basis_and_duplicate():
    assert diversity_loss(torch.eye(5)[:3]).item() == 0
    row = torch.tensor([0.6, 0.8])
    assert diversity_loss(torch.stack([row, row])).item() == pytest.approx(2.0, abs=1e-15)


def test_diversity_matches_elementwise_sum():
    x = torch.randn(4, 8, generator=make_generator(2))
    x = x / x.norm(dim=1, keepdim=True)
    direct = sum((sum(x[i, k].item() * x[j, k].item() for k in range(8)) - (i == j)) ** 2 for i in range(4) for j in range(4))
    assert abs(diversity_loss(x).item() - direct) < 1e-12


def test_diversity_averages_over_rois_and_rejects_unnormalized():
    x = torch.randn(3, 4, 8, generator=make_generator(3))
    x = x / x.norm(dim=-1, keepdim=True)
    assert diversity_loss(x).item() == pytest.approx(np.mean([diversity_loss(x[i]).item() for i in range(3)]), abs=1e-14)
    with pytest.raises(NormalizationError):
        diversity_loss(torch.ones(2, 3))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 5))
def test_diversity_zero_iff_orthonormal(seed, n):
    q, _ = torch.linalg.qr(torch.randn(6, 6, generator=make_generator(seed)))
    assert diversity_loss(q[:n]).item() < 1e-20
    x = torch.randn(n + 1, 6, generator=make_generator(seed))
    x = x / x.norm(dim=1, keepdim=True)
    gram_off = (x @ x.T - torch.eye(n + 1)).abs().max().item()
    assert (diversity_loss(x).item() == 0) == (gram_off <= 1e-10)


# --- KL --------------------------------------------------------------------


def test_kl_closed_forms():
    assert kl_to_standard_normal(torch.zeros(4), torch.ones(4)).item() == 0
    assert kl_to_standard_normal(torch.ones(7), torch.ones(7)).item() == pytest.approx(3.5, abs=1e-15)
    kl = kl_to_standard_normal(torch.zeros(1), torch.full((1,), 2.0)).item()
    assert kl == pytest.approx(0.5 * (4 - 1 - 2 * math.log(2)), abs=1e-15)
    assert kl == pytest.approx(0.806853, abs=1e-6)
    assert abs(monte_carlo_kl([0.0], [2.0], n=10**6, seed=0) - kl) < 1e-2


def test_kl_domain():
    with pytest.raises(DomainError):
        kl_to_standard_normal(torch.zeros(2), torch.tensor([1.0, 0.0]))


def test_kl_nonnegative_and_permutation_invariant():
    gen = make_generator(4)
    mu = torch.randn(10**4, 5, generator=gen) * 3
    sigma = torch.rand(10**4, 5, generator=gen) * 4 + 1e-3
    kl = kl_to_standard_normal(mu, sigma)
    assert torch.all(kl >= 0)
    perm = torch.randperm(5, generator=gen)
    assert torch.allclose(kl_to_standard_normal(mu[:, perm], sigma[:, perm]), kl, atol=1e-12)


# --- composites ------------------------------------------------------------


def test_stage1_composition():
    assert stage1_loss(0.5, 0.2, 0.3, 0.0)[1] == 0.5
    l_prompt, total = stage1_loss(0.5, 0.2, 0.3, 1.0)
    assert l_prompt == pytest.approx(0.5) and total == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        stage1_loss(0.5, 0.2, 0.3, -1.0)


def test_stage2_composition_and_mse():
    assert stage2_loss(0.4, 0.6, 0.0) == 0.4
    assert stage2_loss(0.4, 0.6, 1.0) == pytest.approx(1.0, abs=1e-15)
    t = torch.randn(5, 3, generator=make_generator(5))
    assert distill_mse(t.clone(), t).item() == 0
    assert distill_mse(t + 1, t).item() == pytest.approx(1.0, abs=1e-14)
    s = torch.randn(5, 3, generator=make_generator(6))
    direct = sum((s[i, j].item() - t[i, j].item()) ** 2 for i in range(5) for j in range(3)) / 15
    assert abs(distill_mse(s, t).item() - direct) < 1e-12
    with pytest.raises(DimensionError):
        distill_mse(s, t[:4])


def test_teacher_receives_no_gradient():
    t = torch.randn(3, 2, requires_grad=True)
    s = torch.randn(3, 2, requires_grad=True)
    distill_mse(s, t).backward()
    assert t.grad is None and s.grad is not None


def test_breakdown_fields():
    b = LossBreakdown(l_contrast=1.0, l_div=0.5, kl_mean=0.25, alpha=0.1)
    b.l_prompt, b.l_stage1 = stage1_loss(b.l_contrast, b.l_div, b.kl_mean, b.alpha)
    d = b.as_dict()
    assert abs(d["l_prompt"] - (d["l_div"] + d["kl_mean"])) < 1e-12
    assert abs(d["l_stage1"] - (d["l_contrast"] + d["alpha"] * d["l_prompt"])) < 1e-12


@pytest.mark.parametrize("loss_kind", ["weakm3d", "gga"])
def test_stage2_end_to_end_gradient(loss_kind):
    data = generate_dataset(2, 2, 2, 0.1, seed=3, dim_v=5, dim_c=3)
    cfg = RunConfig(dim=4, dim_v=5, pseudo3d_loss=loss_kind, lam=1.0)
    model = Stage2Model(cfg)
    with torch.no_grad():
        model.head_w.copy_(0.05 * torch.randn(4, 7, generator=make_generator(8)))
    batch = Batch([(0, [0, 1]), (1, [0, 1])])
    feats, _, _ = scene_tensors(data, batch)
    teacher = torch.randn(4, 4, generator=make_generator(9))
    anchors = _anchors(data, batch, "prior")

    def loss():
        student = model(feats)
        return stage2_loss(distill_mse(student, teacher), pseudo3d_loss(cfg, data, batch, model.boxes(student, anchors)), cfg.lam)

    report = grad_check(loss, dict(model.named_parameters()))
    assert report.passed, report.max_rel_error
