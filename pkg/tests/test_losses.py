import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from vitae import losses
from vitae.errors import NonPositiveVariance
from vitae.models import VAR_FLOOR, GaussianParams, ModelConfig, build_model
from vitae.tensor import Tensor

TOY = dict(image_shape=(1, 6, 6), enc_widths=(8,), dec_widths=(8,), latent_dim=2, d_A=2, d_P=2)


def toy(kind="VAE", **kw):
    return build_model(ModelConfig(kind=kind, **{**TOY, **kw}), seed=0)


def gauss(mu, var):
    return GaussianParams(Tensor(np.atleast_2d(mu)), Tensor(np.atleast_2d(var)))


def test_kl_zero_at_prior():
    assert losses.kl_std_normal(gauss([0.0, 0.0], [1.0, 1.0])).item() == 0.0


def test_kl_unit_mean_matches_integral():
    q = lambda z: math.exp(-0.5 * (z - 1) ** 2) / math.sqrt(2 * math.pi)
    p = lambda z: math.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    ref, _ = integrate.quad(lambda z: q(z) * math.log(q(z) / p(z)), -30, 30, epsabs=1e-13)
    got = losses.kl_std_normal(gauss([1.0], [1.0])).item()
    assert got == pytest.approx(0.5, abs=1e-15)
    assert abs(got - ref) < 1e-8


@settings(max_examples=100, deadline=None)
@given(mu=st.lists(st.floats(-5, 5), min_size=1, max_size=4),
       logvar=st.lists(st.floats(-6, 3), min_size=4, max_size=4))
def test_kl_nonnegative(mu, logvar):
    var = np.exp(np.array(logvar[:len(mu)]))
    assert losses.kl_std_normal(gauss(mu, var)).item() >= -1e-12


def test_kl_rejects_nonpositive_variance():
    g = gauss([0.0], [1.0])
    g.var = Tensor([[-1.0]])
    with pytest.raises(NonPositiveVariance):
        losses.kl_std_normal(g)


def test_bernoulli_half():
    assert losses.recon_loglik(Tensor([0.5]), Tensor([0.5])).item() == pytest.approx(math.log(0.5), abs=1e-15)


def test_gaussian_zero_residual():
    x = np.random.default_rng(0).normal(size=(2, 5))
    got = losses.recon_loglik(x, x, "gaussian").item()
    assert got == pytest.approx(-0.5 * math.log(2 * math.pi * 0.1) * 5, abs=1e-12)


def test_bernoulli_clamps_saturated_means():
    got = losses.recon_loglik(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).item()
    assert got == pytest.approx(2 * math.log(1e-7), rel=1e-6)


@pytest.mark.parametrize("x,mu", [(1.0, 0.3), (0.0, 0.6), (0.8, 0.2), (0.2, 0.9)])
def test_bernoulli_gradient_points_towards_target(x, mu):
    m = Tensor([[mu]], requires_grad=True)
    losses.recon_loglik(Tensor([[x]]), m).backward()
    h = 1e-6
    fd = (losses.recon_loglik(Tensor([[x]]), Tensor([[mu + h]])).item()
          - losses.recon_loglik(Tensor([[x]]), Tensor([[mu - h]])).item()) / (2 * h)
    assert np.sign(m.grad[0, 0]) == np.sign(x - mu)
    assert m.grad[0, 0] == pytest.approx(fd, rel=1e-6)


def test_elbo_vae_examples():
    lb = losses.elbo_vae(Tensor(-3.0), Tensor(0.0))
    assert lb.elbo == lb.recon == -3.0
    lb = losses.elbo_vae(Tensor(-10.0), Tensor(2.0), beta=8.0, w=0.5)
    assert lb.elbo == -18.0
    assert lb.identity_residual() <= 1e-12
    with pytest.raises(ValueError):
        losses.elbo_vae(Tensor(0.0), Tensor(0.0), beta=0.5)


def test_elbo_decreases_with_beta():
    m = toy()
    x = np.random.default_rng(1).uniform(size=(3, 36))
    r = m.forward(x, m.sample_noise(np.random.default_rng(2), 3))
    elbos = [losses.model_loss(m, x, r, beta=b).elbo for b in (1.0, 2.0, 8.0)]
    assert elbos[0] > elbos[1] > elbos[2]


def test_uvitae_equals_vae_on_summed_kl():
    u = losses.elbo_uvitae(Tensor(-5.0), Tensor(1.25), Tensor(0.5), w=0.4)
    v = losses.elbo_vae(Tensor(-5.0), Tensor(1.75), w=0.4)
    assert u.elbo == v.elbo
    assert losses.elbo_uvitae(Tensor(-5.0), Tensor(0.0), Tensor(0.0)).elbo == -5.0
    assert losses.elbo_cvitae(Tensor(-5.0), Tensor(0.0), Tensor(0.0)).elbo == -5.0


def test_decomposition_identity_on_model_losses():
    rng = np.random.default_rng(3)
    for kind in ("VAE", "BetaVAE", "UVitae", "CVitae"):
        m = toy(kind)
        x = rng.uniform(size=(4, 36))
        for w in (0.0, 0.3, 1.0):
            lb = losses.model_loss(m, x, m.forward(x, m.sample_noise(rng, 4)), beta=8.0 if kind == "BetaVAE" else 1.0, w=w)
            assert lb.identity_residual() <= 1e-12
            assert lb.loss.item() == -lb.elbo


def test_cvitae_elbo_equals_uvitae_under_identity():
    c, u = toy("CVitae"), toy("UVitae")
    r = np.random.default_rng(4)
    for name in ("pG.out.weight", "pG.out.bias"):
        c.params[name].data = r.normal(size=c.params[name].shape) * 0.3
    u.load_state_dict(c.state_dict())
    x = r.uniform(size=(5, 36))
    noise = c.sample_noise(r, 5)
    lc = losses.model_loss(c, x, c.forward(x, noise, force_identity=True), w=0.6)
    lu = losses.model_loss(u, x, u.forward(x, noise, force_identity=True), w=0.6)
    assert abs(lc.elbo - lu.elbo) <= 1e-10


def test_single_sample_estimate_is_stable():
    m = toy("CVitae")
    x = np.tile(np.random.default_rng(5).uniform(size=(1, 36)), (10_000, 1))
    means, ses = [], []
    for seed in (6, 7):
        e = losses.elbo_per_image(m, x, m.sample_noise(np.random.default_rng(seed), len(x)))
        means.append(e.mean())
        ses.append(e.std(ddof=1) / math.sqrt(len(e)))
    assert abs(means[0] - means[1]) <= 3 * math.hypot(*ses)


def test_warmup_weight():
    assert losses.warmup_weight(500, 1000) == 0.5
    assert losses.warmup_weight(0, 10) == 0.0
    assert losses.warmup_weight(10, 10) == 1.0
    assert losses.warmup_weight(25, 10) == 1.0
    with pytest.raises(ValueError):
        losses.warmup_weight(1, 0)


def test_importance_k1_equals_single_sample_integrand():
    m = toy("CVitae")
    x = np.random.default_rng(8).uniform(size=(4, 36))
    est = losses.importance_loglik(m, x, 1, np.random.default_rng(9))
    lw = losses.log_weights(m, x, m.sample_noise(np.random.default_rng(9), 4))
    assert np.allclose(est, lw, rtol=0, atol=1e-12)


def test_importance_nondecreasing_in_k():
    m = toy("VAE")
    x = np.random.default_rng(10).uniform(size=(2, 36))
    rng = np.random.default_rng(11)
    k1 = np.array([losses.importance_loglik(m, x, 1, rng).mean() for _ in range(50)])
    k64 = np.array([losses.importance_loglik(m, x, 64, rng).mean() for _ in range(50)])
    se = math.hypot(k1.std(ddof=1), k64.std(ddof=1)) / math.sqrt(50)
    assert k64.mean() >= k1.mean() - 2 * se


def test_importance_exact_on_degenerate_model():
    m = toy("VAE")
    P = m.params
    for name in ("q.mu.weight", "q.mu.bias", "q.var.weight", "p.out.weight"):
        P[name].data = np.zeros_like(P[name].data)
    # softplus(b) + floor == 1 puts q exactly on the prior
    P["q.var.bias"].data[:] = math.log(math.expm1(1.0 - VAR_FLOOR))
    bias = np.random.default_rng(12).normal(size=(1, 36))
    P["p.out.bias"].data = bias
    x = (np.random.default_rng(13).uniform(size=(3, 36)) > 0.5).astype(float)
    mu = 1.0 / (1.0 + np.exp(-bias))
    exact = np.sum(x * np.log(mu) + (1 - x) * np.log(1 - mu), axis=1)
    est = losses.importance_loglik(m, x, 10, np.random.default_rng(14))
    assert np.allclose(est, exact, rtol=0, atol=1e-9)


def test_importance_needs_positive_k():
    with pytest.raises(ValueError):
        losses.importance_loglik(toy(), np.zeros((1, 36)), 0, np.random.default_rng(0))


def test_logmeanexp_is_stable():
    a = np.array([[1000.0, -1000.0], [1000.0, -1001.0]])
    out = losses.logmeanexp(a, axis=0)
    assert out[0] == pytest.approx(1000.0)
    assert np.isfinite(out[1])
