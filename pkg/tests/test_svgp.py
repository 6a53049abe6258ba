import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import fd_relative_error
from hdgp_bench.errors import InvalidConfig
from hdgp_bench.exact_gp import condition, predict as gp_predict
from hdgp_bench.kernels import RbfParams, kernel_matrix
from hdgp_bench.svgp import (
    DTYPE,
    KZZ_JITTER,
    latent_marginals,
    layer_init,
    layer_kl,
    layer_marginal,
    layer_sample,
)


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def randomize(layer, seed, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in (layer.q_mu, layer.q_sqrt_lower, layer.q_sqrt_logdiag, layer.mixing, layer.log_lengthscale):
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=DTYPE))
    return layer


@pytest.fixture
def X():
    return np.random.default_rng(0).normal(size=(30, 3))


class TestInit:
    def test_kl_zero_at_init(self, X):
        layer = layer_init(3, 2, 4, 8, X, seed=1)
        assert abs(layer_kl(layer).item()) < 1e-10

    def test_deterministic(self, X):
        a, b = layer_init(3, 2, 4, 8, X, seed=5), layer_init(3, 2, 4, 8, X, seed=5)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_more_inducing_than_samples(self, X):
        layer = layer_init(3, 2, 2, 50, X[:10], seed=2)
        assert layer.Z.shape == (2, 50, 3)
        # every inducing point sits within jitter of some sample
        d = torch.cdist(layer.Z.detach().reshape(-1, 3), t(X[:10])).min(dim=1).values
        assert d.max() < 1e-2

    def test_invalid_sizes(self, X):
        with pytest.raises(InvalidConfig):
            layer_init(3, 0, 2, 4, X, seed=0)
        with pytest.raises(InvalidConfig):
            layer_init(3, 2, 0, 4, X, seed=0)

    def test_lower_triangular_positive_diagonal(self, X):
        layer = randomize(layer_init(3, 2, 3, 5, X, seed=0), 1)
        S = layer.q_sqrt().detach()
        assert torch.equal(S, torch.tril(S))
        assert (torch.diagonal(S, dim1=-2, dim2=-1) > 0).all()


class TestMarginal:
    def test_prior_reproduction(self, X):
        layer = layer_init(3, 2, 4, 8, X, seed=3)
        Xs = t(np.random.default_rng(1).normal(size=(20, 3)))
        mean_q, var_q = latent_marginals(layer, Xs)
        assert torch.allclose(mean_q, torch.zeros_like(mean_q))
        kxx = torch.exp(layer.log_signal_variance).unsqueeze(-1).expand_as(var_q)
        assert (var_q - kxx).abs().max().item() < 1e-8
        mg = layer_marginal(layer, Xs)
        assert mg.mean.abs().max().item() == 0.0

    def test_matches_exact_gp_posterior(self):
        Z = np.linspace(-2, 2, 6)[:, None]
        y = np.sin(2 * Z[:, 0])
        kern = RbfParams.create(0.8, 1.3)
        noise = 0.05
        layer = layer_init(1, 1, 1, 6, Z, seed=0)
        K = kernel_matrix(Z, Z, kern)
        Ky = K + noise * np.eye(6)
        mean_u = K @ np.linalg.solve(Ky, y)
        cov_u = K - K @ np.linalg.solve(Ky, K)
        L = np.linalg.cholesky(K + KZZ_JITTER * np.eye(6))
        m_w = np.linalg.solve(L, mean_u)
        S_cov = np.linalg.solve(L, np.linalg.solve(L, cov_u).T)
        S = np.linalg.cholesky(S_cov + 1e-12 * np.eye(6))
        with torch.no_grad():
            layer.Z.copy_(t(Z[None]))
            layer.log_lengthscale.fill_(float(np.log(0.8)))
            layer.log_signal_variance.fill_(float(np.log(1.3)))
            layer.mixing.fill_(1.0)
            layer.q_mu.copy_(t(m_w[None]))
            layer.q_sqrt_lower.copy_(t(np.tril(S, -1)[None]))
            layer.q_sqrt_logdiag.copy_(t(np.log(np.diag(S))[None]))
        Xs = np.linspace(-2.5, 2.5, 11)[:, None]
        mg = layer_marginal(layer, t(Xs))
        ref_mean, ref_sd = gp_predict(condition(Z, y, kern, noise), Xs)
        np.testing.assert_allclose(mg.mean[:, 0].detach().numpy(), ref_mean, atol=1e-3)
        np.testing.assert_allclose(mg.var[:, 0].detach().numpy(), ref_sd ** 2, atol=1e-3)

    def test_variance_nonnegative(self, X):
        layer = randomize(layer_init(3, 4, 3, 6, X, seed=4), 2, scale=1.0)
        mg = layer_marginal(layer, t(np.random.default_rng(3).normal(scale=3, size=(100, 3))))
        assert (mg.var >= 0).all()

    def test_permutation_equivariant(self, X):
        layer = randomize(layer_init(3, 2, 3, 6, X, seed=5), 3)
        Xs = t(np.random.default_rng(4).normal(size=(12, 3)))
        perm = torch.randperm(12, generator=torch.Generator().manual_seed(0))
        a, b = layer_marginal(layer, Xs), layer_marginal(layer, Xs[perm])
        assert torch.allclose(a.mean[perm], b.mean, atol=1e-12)
        assert torch.allclose(a.var[perm], b.var, atol=1e-12)

    def test_sample_axes_fold(self, X):
        layer = randomize(layer_init(3, 2, 3, 6, X, seed=6), 4)
        Xs = t(np.random.default_rng(5).normal(size=(4, 7, 3)))
        mg = layer_marginal(layer, Xs)
        ref = layer_marginal(layer, Xs[2])
        assert mg.mean.shape == (4, 7, 2)
        assert torch.allclose(mg.mean[2], ref.mean, atol=1e-13)


class TestSample:
    def test_zero_variance_gives_mean(self, X):
        layer = randomize(layer_init(3, 2, 3, 6, X, seed=7), 5)
        Xs = t(X[:5])
        mg = layer_marginal(layer, Xs)
        mg.var = torch.zeros_like(mg.var)
        s = layer_sample(layer, Xs, torch.Generator().manual_seed(1), with_noise=False, marginal=mg)
        assert torch.equal(s, mg.mean)

    def test_seeded(self, X):
        layer = layer_init(3, 2, 3, 6, X, seed=8)
        a = layer_sample(layer, t(X[:5]), torch.Generator().manual_seed(9))
        b = layer_sample(layer, t(X[:5]), torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_monte_carlo_moments(self, X):
        layer = randomize(layer_init(3, 1, 3, 6, X, seed=9), 6)
        x = t(X[:1]).expand(10_000, 3)
        with torch.no_grad():
            mg = layer_marginal(layer, t(X[:1]))
            s = layer_sample(layer, x, torch.Generator().manual_seed(2))[:, 0]
        n = s.numel()
        mu, var = mg.mean[0, 0].item(), mg.var[0, 0].item() + layer.noise[0].item()
        assert abs(s.mean().item() - mu) < 3 * np.sqrt(var / n)
        assert abs(s.var().item() - var) < 3 * var * np.sqrt(2 / (n - 1))


class TestKl:
    def test_unit_case(self, X):
        layer = layer_init(3, 1, 1, 1, X, seed=0)
        with torch.no_grad():
            layer.q_mu.fill_(1.0)
        assert layer_kl(layer).item() == pytest.approx(0.5, abs=1e-15)

    def test_dense_oracle(self, X):
        layer = randomize(layer_init(3, 1, 1, 3, X, seed=1), 7, scale=0.5)
        m = layer.q_mu.detach().numpy()[0]
        S = layer.q_sqrt().detach().numpy()[0]
        Sigma = S @ S.T
        ref = 0.5 * (np.trace(Sigma) + m @ m - 3 - np.linalg.slogdet(Sigma)[1])
        assert layer_kl(layer).item() == pytest.approx(ref, abs=1e-10)

    @given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 2.0))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, seed, scale):
        X = np.random.default_rng(seed).normal(size=(10, 2))
        layer = randomize(layer_init(2, 2, 2, 4, X, seed=seed), seed, scale=scale)
        assert layer_kl(layer).item() >= 0


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_marginal_and_kl(self, seed):
        rng = np.random.default_rng(seed)
        n, m, q = 5, 4, 3
        X = rng.normal(size=(n, 2))
        layer = randomize(layer_init(2, 2, q, m, X, seed=seed), seed + 10)
        Xs = t(rng.normal(size=(n, 2)))
        w = t(rng.normal(size=(n, 2)))
        v = t(rng.normal(size=(n, 2)))
        params = [layer.q_mu, layer.q_sqrt_lower, layer.q_sqrt_logdiag, layer.mixing, layer.log_lengthscale]

        def objective():
            mg = layer_marginal(layer, Xs)
            return (w * mg.mean).sum() + (v * mg.var).sum() + layer_kl(layer)

        assert fd_relative_error(objective, params) < 1e-4
