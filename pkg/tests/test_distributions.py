import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate, stats

from ledd.distributions import (
    EPS_SIGMA,
    DiagGaussianParams,
    DiagLaplaceParams,
    DirichletParams,
    RngStream,
    dirichlet_log_pdf,
    fit_gaussian_mle,
    fit_laplace_mle,
    gaussian_log_pdf,
    laplace_log_pdf,
    sample,
)

finite = st.floats(-5, 5, allow_nan=False)
positive = st.floats(0.05, 5)


def _dirichlet_oracle(alpha, pi):
    """Log-density with the normaliser written out through math.lgamma."""
    log_norm = math.lgamma(sum(alpha)) - sum(math.lgamma(a) for a in alpha)
    return log_norm + sum((a - 1) * math.log(p) for a, p in zip(alpha, pi))


class TestDirichletLogPdf:
    def test_uniform_alpha_at_centroid(self):
        assert dirichlet_log_pdf(DirichletParams([1, 1, 1]), [1 / 3] * 3) == pytest.approx(math.log(2), abs=1e-12)

    @given(st.lists(positive, min_size=3, max_size=3), st.permutations([0, 1, 2]))
    def test_permutation_applied_to_both(self, alpha, perm):
        pi = np.array([0.2, 0.5, 0.3])
        a = np.array(alpha)
        base = dirichlet_log_pdf(DirichletParams(a), pi)
        permuted = dirichlet_log_pdf(DirichletParams(a[list(perm)]), pi[list(perm)])
        assert permuted == pytest.approx(base, abs=1e-12)

    def test_matches_quadrature_normalised_density(self):
        alpha = np.array([2.0, 1.0, 1.0])
        # unnormalised density on the 2-simplex, normalised by adaptive quadrature over the triangle
        def kernel(p2, p1):
            return p1 ** (alpha[0] - 1) * p2 ** (alpha[1] - 1) * (1 - p1 - p2) ** (alpha[2] - 1)

        norm, _ = integrate.dblquad(kernel, 0, 1, 0, lambda p1: 1 - p1, epsabs=1e-12, epsrel=1e-12)
        expected = math.log(kernel(0.25, 0.5) / norm)
        got = dirichlet_log_pdf(DirichletParams(alpha), [0.5, 0.25, 0.25])
        assert got == pytest.approx(expected, abs=1e-4)

    @given(st.lists(positive, min_size=2, max_size=6), st.data())
    def test_lgamma_oracle(self, alpha, data):
        raw = data.draw(st.lists(st.floats(0.05, 1.0), min_size=len(alpha), max_size=len(alpha)))
        pi = np.array(raw) / sum(raw)
        got = dirichlet_log_pdf(DirichletParams(alpha), pi)
        assert got == pytest.approx(_dirichlet_oracle(alpha, pi), rel=1e-10, abs=1e-10)

    def test_zero_component_rejected(self):
        with pytest.raises(ValueError, match="smooth"):
            dirichlet_log_pdf(DirichletParams([1, 1]), [1.0, 0.0])

    def test_off_simplex_rejected(self):
        with pytest.raises(ValueError, match="simplex"):
            dirichlet_log_pdf(DirichletParams([1, 1]), [0.5, 0.6])

    def test_invalid_alpha(self):
        for bad in ([0.0, 1.0], [-1.0, 2.0], [np.inf, 1.0]):
            with pytest.raises(ValueError):
                DirichletParams(bad)

    def test_alpha0(self):
        assert DirichletParams([1.5, 2.5]).alpha0 == 4.0


class TestLaplaceLogPdf:
    @pytest.mark.parametrize("k", [1, 3, 10])
    def test_unit_peak(self, k):
        p = DiagLaplaceParams(np.zeros(k), np.ones(k))
        assert laplace_log_pdf(p, np.zeros(k)) == pytest.approx(k * math.log(0.5), abs=1e-12)

    @given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=positive))
    def test_reflection(self, mu, z, sigma):
        p = DiagLaplaceParams(mu, sigma)
        assert laplace_log_pdf(p, 2 * mu - z) == pytest.approx(laplace_log_pdf(p, z), abs=1e-9)

    def test_single_dimension_value(self):
        assert laplace_log_pdf(DiagLaplaceParams([0.0], [2.0]), [2.0]) == pytest.approx(-math.log(4) - 1, abs=1e-12)
        assert -math.log(4) - 1 == pytest.approx(-2.3863, abs=1e-4)

    def test_batched(self):
        p = DiagLaplaceParams(np.zeros((5, 3)), np.ones((5, 3)))
        assert laplace_log_pdf(p, np.zeros((5, 3))).shape == (5,)

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            DiagLaplaceParams([0.0], [0.0])
        with pytest.raises(ValueError):
            DiagLaplaceParams([np.nan], [1.0])


class TestGaussianLogPdf:
    @pytest.mark.parametrize("k", [1, 4])
    def test_standard_peak(self, k):
        p = DiagGaussianParams(np.zeros(k), np.ones(k))
        assert gaussian_log_pdf(p, np.zeros(k)) == pytest.approx(-k / 2 * math.log(2 * math.pi), abs=1e-12)

    @given(arrays(np.float64, 3, elements=finite), arrays(np.float64, 3, elements=positive), st.floats(0.1, 10))
    def test_scale_family(self, d, sigma, c):
        base = gaussian_log_pdf(DiagGaussianParams(np.zeros(3), sigma), d)
        scaled = gaussian_log_pdf(DiagGaussianParams(np.zeros(3), c * sigma), c * d)
        assert scaled == pytest.approx(base - 3 * math.log(c), abs=1e-9)

    def test_two_dimension_value(self):
        got = gaussian_log_pdf(DiagGaussianParams([0.0, 0.0], [1.0, 1.0]), [1.0, 2.0])
        assert got == pytest.approx(-math.log(2 * math.pi) - 2.5, abs=1e-12)
        assert got == pytest.approx(-4.3379, abs=1e-4)


@pytest.mark.parametrize("family,log_pdf", [(DiagLaplaceParams, laplace_log_pdf), (DiagGaussianParams, gaussian_log_pdf)])
def test_density_integrates_to_one(family, log_pdf):
    mu, sigma = 0.7, 1.3
    grid = np.linspace(mu - 40 * sigma, mu + 40 * sigma, 400_001)
    p = family(np.full(1, mu), np.full(1, sigma))
    dens = np.exp(log_pdf(p, grid[:, None]))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-3)


class TestRngStream:
    def test_same_seed_same_draws(self):
        a = RngStream(42).generator().random(5)
        b = RngStream(42).generator().random(5)
        np.testing.assert_array_equal(a, b)

    def test_position_is_part_of_identity(self):
        base = RngStream(3)
        assert not np.array_equal(base.generator().random(4), base.advanced(1).generator().random(4))
        np.testing.assert_array_equal(base.advanced(2).generator().random(3), RngStream(3, 2).generator().random(3))

    def test_children_are_distinct_and_stable(self):
        s = RngStream(9)
        draws = [s.child(i).generator().random() for i in range(5)]
        assert len(set(draws)) == 5
        assert s.child(3).generator().random() == draws[3]

    def test_negative_seed_accepted(self):
        RngStream(-1).generator().random()


class TestSample:
    def test_degenerate_scale(self):
        mu = np.array([0.3, -1.2, 4.0])
        for family in (DiagLaplaceParams, DiagGaussianParams):
            draws = sample(family(mu, np.full(3, 1e-12)), 100, RngStream(0))
            np.testing.assert_allclose(draws, np.broadcast_to(mu, draws.shape), atol=1e-9, rtol=0)

    def test_laplace_moments(self):
        mu, sigma = np.array([1.5, -2.0]), np.array([0.5, 3.0])
        draws = sample(DiagLaplaceParams(mu, sigma), 100_000, RngStream(1))
        assert np.all(np.abs(np.median(draws, 0) - mu) < 0.02 * sigma)
        mad = np.abs(draws - mu).mean(0)
        np.testing.assert_allclose(mad, sigma, rtol=0.02)

    def test_deterministic(self):
        p = DiagGaussianParams([0.0, 1.0], [1.0, 2.0])
        np.testing.assert_array_equal(sample(p, 10, RngStream(5)), sample(p, 10, RngStream(5)))

    def test_shape(self):
        p = DiagLaplaceParams(np.zeros((4, 3)), np.ones((4, 3)))
        assert sample(p, 7, RngStream(0)).shape == (7, 4, 3)

    def test_count_must_be_positive(self):
        with pytest.raises(ValueError):
            sample(DiagLaplaceParams([0.0], [1.0]), 0, RngStream(0))

    @pytest.mark.parametrize("family,dist", [(DiagLaplaceParams, stats.laplace), (DiagGaussianParams, stats.norm)])
    def test_ks_against_analytic_cdf(self, family, dist):
        mu, sigma = np.array([0.0, 2.0, -1.0]), np.array([1.0, 0.3, 2.5])
        draws = sample(family(mu, sigma), 50_000, RngStream(7))
        for k in range(3):
            stat = stats.kstest(draws[:, k], dist(loc=mu[k], scale=sigma[k]).cdf).statistic
            assert stat < 0.01


def _total_laplace(samples, mu, sigma):
    return float(laplace_log_pdf(DiagLaplaceParams(mu, sigma), samples).sum())


def _total_gaussian(samples, mu, sigma):
    return float(gaussian_log_pdf(DiagGaussianParams(mu, sigma), samples).sum())


class TestFitLaplace:
    def test_closed_form(self):
        p = fit_laplace_mle([[-1.0], [0.0], [2.0]])
        assert p.mu.tolist() == [0.0] and p.sigma.tolist() == [1.0]

    def test_even_count_uses_midpoint(self):
        p = fit_laplace_mle([[0.0], [1.0], [3.0], [10.0]])
        assert p.mu.tolist() == [2.0]
        assert p.sigma.tolist() == [pytest.approx((2 + 1 + 1 + 8) / 4)]

    def test_identical_samples(self):
        p = fit_laplace_mle(np.full((5, 2), 0.25))
        np.testing.assert_array_equal(p.mu, [0.25, 0.25])
        np.testing.assert_array_equal(p.sigma, [EPS_SIGMA, EPS_SIGMA])

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            fit_laplace_mle([[1.0, 2.0]])

    @given(arrays(np.float64, (7, 3), elements=finite))
    def test_single_coordinate_probe(self, samples):
        p = fit_laplace_mle(samples)
        best = _total_laplace(samples, p.mu, p.sigma)
        for k in range(3):
            for which in ("mu", "sigma"):
                for d in (-1e-3, 1e-3):
                    mu, sigma = p.mu.copy(), p.sigma.copy()
                    (mu if which == "mu" else sigma)[k] += d
                    if sigma[k] <= 0:
                        continue
                    assert _total_laplace(samples, mu, sigma) <= best + 1e-9

    def test_random_perturbations(self):
        rng = np.random.default_rng(0)
        samples = rng.laplace(size=(9, 4))
        p = fit_laplace_mle(samples)
        best = _total_laplace(samples, p.mu, p.sigma)
        for _ in range(1000):
            d = rng.normal(size=8)
            d *= rng.uniform(0, 0.1) / np.linalg.norm(d)
            assert _total_laplace(samples, p.mu + d[:4], p.sigma + d[4:]) <= best + 1e-9

    @given(arrays(np.float64, (5, 4), elements=finite), st.permutations(range(4)))
    def test_permutation_equivariance(self, samples, perm):
        perm = list(perm)
        p = fit_laplace_mle(samples)
        q = fit_laplace_mle(samples[:, perm])
        np.testing.assert_array_equal(q.mu, p.mu[perm])
        np.testing.assert_array_equal(q.sigma, p.sigma[perm])


class TestFitGaussian:
    def test_closed_form(self):
        p = fit_gaussian_mle([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_array_equal(p.mu, [1.0, 1.0])
        np.testing.assert_array_equal(p.sigma, [1.0, 1.0])

    def test_identical_samples(self):
        assert fit_gaussian_mle([[3.0], [3.0]]).sigma.tolist() == [EPS_SIGMA]

    @given(arrays(np.float64, (6, 2), elements=finite), st.floats(-100, 100))
    def test_translation_equivariance(self, samples, c):
        p = fit_gaussian_mle(samples)
        q = fit_gaussian_mle(samples + c)
        np.testing.assert_allclose(q.mu, p.mu + c, atol=1e-9)
        np.testing.assert_allclose(q.sigma, p.sigma, atol=1e-9)

    def test_random_perturbations(self):
        rng = np.random.default_rng(1)
        samples = rng.normal(size=(10, 3))
        p = fit_gaussian_mle(samples)
        best = _total_gaussian(samples, p.mu, p.sigma)
        for _ in range(1000):
            d = rng.normal(size=6)
            d *= rng.uniform(0, 0.1) / np.linalg.norm(d)
            assert _total_gaussian(samples, p.mu + d[:3], p.sigma + d[3:]) <= best + 1e-9

    @given(arrays(np.float64, (5, 3), elements=finite), st.permutations(range(3)))
    def test_permutation_equivariance(self, samples, perm):
        perm = list(perm)
        p = fit_gaussian_mle(samples)
        q = fit_gaussian_mle(samples[:, perm])
        np.testing.assert_allclose(q.mu, p.mu[perm], atol=1e-12)
        np.testing.assert_allclose(q.sigma, p.sigma[perm], atol=1e-12)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError):
            fit_gaussian_mle(np.zeros((1, 3)))
