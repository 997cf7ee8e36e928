import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actionvae.errors import ContractViolation
from actionvae.gaussmath import (
    DiagGaussian,
    cross_entropy,
    entropy,
    kl_diag,
    log_pdf_identity_cov,
    sample_reparam,
    sigma_points,
)


def quad_kl_1d(q: DiagGaussian, p: DiagGaussian, half_width=12.0, n=400_001):
    """Trapezoid quadrature of the 1-D KL integral, independent of kl_diag."""
    mq, sq = q.mean[0], np.exp(0.5 * q.log_var[0])
    lo, hi = mq - half_width * sq, mq + half_width * sq
    x = np.linspace(lo, hi, n)

    def logpdf(x, mean, log_var):
        return -0.5 * (np.log(2 * np.pi) + log_var + (x - mean) ** 2 / np.exp(log_var))

    lq = logpdf(x, q.mean[0], q.log_var[0])
    lp = logpdf(x, p.mean[0], p.log_var[0])
    return np.trapezoid(np.exp(lq) * (lq - lp), x)


def quad_cross_entropy_1d(q: DiagGaussian, p: DiagGaussian, half_width=12.0, n=400_001):
    mq, sq = q.mean[0], np.exp(0.5 * q.log_var[0])
    x = np.linspace(mq - half_width * sq, mq + half_width * sq, n)

    def logpdf(x, mean, log_var):
        return -0.5 * (np.log(2 * np.pi) + log_var + (x - mean) ** 2 / np.exp(log_var))

    lq = logpdf(x, q.mean[0], q.log_var[0])
    lp = logpdf(x, p.mean[0], p.log_var[0])
    return -np.trapezoid(np.exp(lq) * lp, x)


class TestDiagGaussian:
    def test_clamps_log_var(self):
        g = DiagGaussian(np.zeros(2), np.array([-50.0, 50.0]))
        assert g.log_var.tolist() == [-10.0, 10.0]

    def test_rejects_mismatch(self):
        with pytest.raises(ContractViolation):
            DiagGaussian(np.zeros(2), np.zeros(3))


class TestKl:
    def test_identical_is_zero(self):
        g = DiagGaussian(np.zeros(3), np.zeros(3))
        assert kl_diag(g, g) == 0.0

    def test_matches_quadrature_shifted_mean(self):
        q = DiagGaussian([1.0], [0.0])
        p = DiagGaussian([0.0], [0.0])
        assert kl_diag(q, p) == pytest.approx(quad_kl_1d(q, p), abs=1e-8)

    def test_matches_quadrature_wider_variance(self):
        q = DiagGaussian([0.0], [np.log(4.0)])
        p = DiagGaussian([0.0], [0.0])
        assert kl_diag(q, p) == pytest.approx(quad_kl_1d(q, p), abs=1e-8)

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            kl_diag(DiagGaussian([0.0], [0.0]), DiagGaussian([0, 0], [0, 0]))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 6))
        q = DiagGaussian(rng.normal(size=d) * 3, rng.normal(size=d))
        p = DiagGaussian(rng.normal(size=d) * 3, rng.normal(size=d))
        assert kl_diag(q, p) >= 0.0

    def test_zero_iff_equal_params(self):
        rng = np.random.default_rng(7)
        q = DiagGaussian(rng.normal(size=4), rng.normal(size=4))
        p = DiagGaussian(q.mean.copy(), q.log_var.copy())
        assert abs(kl_diag(q, p)) <= 1e-12
        p2 = DiagGaussian(q.mean + 1e-3, q.log_var)
        assert kl_diag(q, p2) > 1e-12


class TestCrossEntropy:
    def test_self_is_entropy(self):
        g = DiagGaussian([0.0], [0.0])
        expected = 0.5 * np.log(2 * np.pi * np.e)
        assert cross_entropy(g, g) == pytest.approx(expected, abs=1e-12)

    def test_identity_with_kl(self):
        rng = np.random.default_rng(3)
        q = DiagGaussian(rng.normal(size=2), rng.normal(size=2))
        p = DiagGaussian(rng.normal(size=2), rng.normal(size=2))
        assert cross_entropy(q, p) == pytest.approx(
            kl_diag(q, p) + entropy(q), abs=1e-12)

    def test_matches_quadrature(self):
        q = DiagGaussian([0.0], [0.0])
        p = DiagGaussian([3.0], [np.log(2.0)])
        assert cross_entropy(q, p) == pytest.approx(
            quad_cross_entropy_1d(q, p), abs=1e-8)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_difference_independent_of_p(self, seed):
        rng = np.random.default_rng(seed)
        q = DiagGaussian(rng.normal(size=3), rng.normal(size=3))
        p1 = DiagGaussian(rng.normal(size=3) * 2, rng.normal(size=3))
        p2 = DiagGaussian(rng.normal(size=3) * 2, rng.normal(size=3))
        d1 = cross_entropy(q, p1) - kl_diag(q, p1)
        d2 = cross_entropy(q, p2) - kl_diag(q, p2)
        assert d1 == pytest.approx(d2, abs=1e-9)
        assert d1 == pytest.approx(entropy(q), abs=1e-9)


class TestLogPdfIdentityCov:
    def test_zero_residual(self):
        m = np.array([1.0, -2.0])
        assert log_pdf_identity_cov(m, m) == pytest.approx(-np.log(2 * np.pi))

    def test_unit_residual_1d(self):
        assert log_pdf_identity_cov([0.0], [1.0]) == pytest.approx(
            -0.5 * np.log(2 * np.pi) - 0.5)

    def test_per_coordinate_sum(self):
        rng = np.random.default_rng(11)
        mean = rng.normal(size=4)
        point = rng.normal(size=4)
        per_coord = sum(
            -0.5 * np.log(2 * np.pi) - 0.5 * (point[i] - mean[i]) ** 2
            for i in range(4))
        assert log_pdf_identity_cov(mean, point) == pytest.approx(
            per_coord, abs=1e-12)

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            log_pdf_identity_cov([0.0], [0.0, 1.0])


class TestSampleReparam:
    def test_zero_noise_is_mean(self):
        g = DiagGaussian([2.0, -1.0], [0.3, -0.4])
        z = sample_reparam(g, np.zeros(2))
        assert np.array_equal(z.coords, g.mean)

    def test_standard_normal_passthrough(self):
        g = DiagGaussian(np.zeros(3), np.zeros(3))
        e1 = np.array([1.0, 0.0, 0.0])
        assert np.array_equal(sample_reparam(g, e1).coords, e1)

    def test_scale_and_shift(self):
        g = DiagGaussian([2.0], [np.log(4.0)])
        assert sample_reparam(g, np.array([1.0])).coords[0] == pytest.approx(4.0)

    def test_empirical_moments(self):
        rng = np.random.default_rng(99)
        g = DiagGaussian([1.5, -0.5], [np.log(2.0), np.log(0.5)])
        n = 100_000
        noise = rng.standard_normal((n, 2))
        draws = g.mean + g.sigma * noise
        se_mean = g.sigma / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - g.mean) < 3 * se_mean)
        # variance standard error ~ var * sqrt(2/n)
        se_var = g.var * np.sqrt(2.0 / n)
        assert np.all(np.abs(draws.var(axis=0) - g.var) < 3 * se_var)


class TestSigmaPoints:
    def test_unit_2d(self):
        pts = sigma_points(DiagGaussian(np.zeros(2), np.zeros(2)))
        coords = [p.coords.tolist() for p in pts]
        assert coords == [[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]]

    def test_sigma_three(self):
        pts = sigma_points(DiagGaussian([3.0], [np.log(9.0)]))
        assert [p.coords[0] for p in pts] == pytest.approx([3.0, 6.0, 0.0])

    def test_count_and_mean(self):
        rng = np.random.default_rng(5)
        g = DiagGaussian(rng.normal(size=5), rng.normal(size=5))
        pts = sigma_points(g)
        assert len(pts) == 11
        assert np.array_equal(pts[0].coords, g.mean)
        stacked = np.stack([p.coords for p in pts])
        assert np.allclose(stacked.mean(axis=0), g.mean, rtol=1e-12, atol=1e-12)
