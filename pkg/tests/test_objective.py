import dataclasses
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from objclust.config import LossWeights, RunConfig
from objclust.latents import MixturePrior
from objclust.objective import (TERMS, expected_kl_what, kl_bernoulli, kl_categorical,
                                kl_gaussian_diag, kl_what_term, reconstruction_loss, scheduled,
                                total_loss)

D = torch.float64


def t(*v):
    return torch.tensor(v, dtype=D)


def test_kl_bernoulli_examples():
    assert kl_bernoulli(t(0.3), t(0.3)).item() == pytest.approx(0.0, abs=1e-15)
    assert kl_bernoulli(t(0.5), t(0.5)).item() == pytest.approx(0.0, abs=1e-15)
    want = 0.9 * math.log(9) + 0.1 * math.log(1 / 9)
    assert kl_bernoulli(t(0.9), t(0.1)).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(1.7578, abs=1e-4)


def test_kl_bernoulli_clamps_extremes():
    out = kl_bernoulli(t(1.0, 0.0), t(1e-12, 1.0))
    assert torch.isfinite(out).all()


def test_kl_gaussian_examples():
    assert kl_gaussian_diag(t(0.3, -1), t(0.2, 0.1), t(0.3, -1), t(0.2, 0.1)).item() == 0.0
    assert kl_gaussian_diag(t(1.0), t(0.0), t(0.0), t(0.0)).item() == pytest.approx(0.5)
    want = math.e ** 2 / 2 - 1.5
    assert kl_gaussian_diag(t(0.0), t(1.0), t(0.0), t(0.0)).item() == pytest.approx(want)
    assert want == pytest.approx(2.1945, abs=1e-4)


def test_kl_categorical_examples():
    C = 10
    pi = torch.full((C,), 1 / C, dtype=D)
    assert kl_categorical(torch.zeros(C, dtype=D), pi).item() == pytest.approx(0.0, abs=1e-15)
    one_hot = torch.full((C,), -1e4, dtype=D)
    one_hot[3] = 0
    assert kl_categorical(one_hot, pi).item() == pytest.approx(math.log(10), abs=1e-12)
    half = torch.full((C,), -1e4, dtype=D)
    half[:2] = 0
    assert kl_categorical(half, pi).item() == pytest.approx(math.log(10) - math.log(2), abs=1e-12)


def prior(mu, log_sigma):
    mp = MixturePrior(*torch.as_tensor(mu).shape).double()
    with torch.no_grad():
        mp.mu.copy_(torch.as_tensor(mu, dtype=D))
        mp.log_sigma.copy_(torch.as_tensor(log_sigma, dtype=D))
    return mp


def test_kl_what_examples():
    mp = prior([[0.5, -1.0], [2.0, 0.0]], [[0.3, -0.2], [0.0, 0.1]])
    e1 = t(0.0, 1.0)
    sigma = torch.exp(mp.log_sigma[1])
    assert kl_what_term(mp.mu[1].detach(), torch.log(sigma).detach(), e1, mp).item() == \
        pytest.approx(0.0, abs=1e-14)
    mp1 = prior([[0.7]], [[0.0]])
    assert kl_what_term(t(1.7), t(0.0), t(1.0), mp1).item() == pytest.approx(0.5)


def test_kl_what_monte_carlo_variance_shrinks_with_samples():
    mp = prior([[0.0, 0.0], [3.0, -2.0], [-1.0, 1.0]], torch.zeros(3, 2))
    logits = t(0.2, -0.1, 0.4)

    W = torch.tensor([[1.0, 0.5], [0.0, -1.0], [2.0, 0.0]], dtype=D)

    def enc(z_cat):
        return z_cat @ W, torch.zeros(2, dtype=D)

    g = torch.Generator().manual_seed(0)

    def var(m):
        vals = torch.stack([expected_kl_what(enc, logits, mp, 1.0, m, g) for _ in range(2000)])
        return vals.var().item()
    ratio = var(1) / var(10)
    assert 7 < ratio < 14


def test_reconstruction_examples():
    x = torch.rand(2, 3, 4, 4, dtype=D)
    assert torch.all(reconstruction_loss(x, x) == 0)
    y = x.clone()
    y[0, 1, 2, 3] += 0.15
    out = reconstruction_loss(x, y)
    assert out[0].item() == pytest.approx(0.5) and out[1].item() == 0
    assert torch.equal(reconstruction_loss(x, y), reconstruction_loss(y, x))
    with pytest.raises(ValueError):
        reconstruction_loss(x, x[:, :2])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(-3, 3), st.floats(-5, 5), st.floats(-3, 3)),
                min_size=1, max_size=5),
       st.floats(0, 1), st.floats(0, 1),
       st.lists(st.floats(-30, 30), min_size=2, max_size=8))
def test_kls_nonnegative(gauss, q, p, logits):
    qm, qs, pm, ps = (torch.tensor(c, dtype=D) for c in zip(*gauss))
    assert kl_gaussian_diag(qm, qs, pm, ps).item() >= -1e-7
    assert kl_bernoulli(t(q), t(p)).item() >= -1e-7
    C = len(logits)
    assert kl_categorical(torch.tensor(logits, dtype=D),
                          torch.full((C,), 1 / C, dtype=D)).item() >= -1e-7


def test_presence_prior_starts_at_one():
    prior_params, weights = scheduled(RunConfig(), 0)
    assert prior_params.pres_prob == 1.0
    assert weights.alpha_overlap == 2.0
    assert scheduled(RunConfig(), 1000)[1].alpha_overlap == 0.0


@pytest.fixture
def forward(tiny_cfg, tiny_model):
    x = torch.rand(2, 3, 16, 16)
    out = tiny_model(x, generator=torch.Generator().manual_seed(0))
    prior_params, weights = scheduled(tiny_cfg, 123)
    return x, out, prior_params, weights, tiny_model


def test_total_is_weighted_sum(forward):
    x, out, pp, w, m = forward
    br = total_loss(x, out, pp, w, m.prior)
    assert torch.equal(br.total, sum(getattr(w, f"alpha_{k}") * getattr(br, k) for k in TERMS))
    zero = LossWeights(*([0.0] * 7))
    assert total_loss(x, out, pp, zero, m.prior).total.item() == 0.0
    for k in ("pres", "where", "depth", "cat", "what"):
        assert getattr(br, k).item() >= -1e-7


def test_absent_cell_contributes_only_presence_kl(forward):
    x, out, pp, w, m = forward
    post = out.posterior
    logit = post.pres_logit.detach().clone()
    logit[:, 0] = -1e4
    base = dataclasses.replace(out, posterior=dataclasses.replace(post, pres_logit=logit))
    where = post.where_mean.detach().clone()
    where[:, 0] += 50
    what = out.mc[0].what_mean.detach().clone()
    what[:, 0] -= 50
    moved = dataclasses.replace(
        base, posterior=dataclasses.replace(base.posterior, where_mean=where),
        mc=[dataclasses.replace(out.mc[0], what_mean=what)])
    a = total_loss(x, base, pp, w, m.prior)
    b = total_loss(x, moved, pp, w, m.prior)
    for k in ("where", "depth", "cat", "what", "pres"):
        assert torch.equal(getattr(a, k), getattr(b, k)), k


def test_total_loss_backpropagates_to_every_group(forward):
    x, out, pp, w, m = forward
    total_loss(x, out, pp, w, m.prior).total.backward()
    for name, params in m.param_groups().items():
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in params), name
