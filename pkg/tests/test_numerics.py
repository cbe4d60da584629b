import math

import numpy as np
import pytest

from bptrack.errors import DimensionMismatch, EmptyWeights, NotPositiveDefinite
from bptrack.numerics import (
    GaussianState,
    Rng,
    UTParams,
    cholesky_psd,
    cv_transition,
    gaussian_logpdf,
    generate_sigma_points,
    systematic_resample,
)


def random_spd(rng, n):
    a = rng.standard_normal((n, n))
    return a @ a.T + n * np.eye(n)


class TestCholesky:
    def test_identity(self):
        assert np.array_equal(cholesky_psd(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        assert np.allclose(cholesky_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_reconstruction_random_spd(self):
        rng = Rng(3)
        c = random_spd(rng, 5)
        ell = cholesky_psd(c)
        assert np.max(np.abs(ell @ ell.T - c)) < 1e-10

    def test_jitter_repairs_singular(self):
        c = np.diag([1.0, 0.0])
        ell = cholesky_psd(c)
        assert np.all(np.isfinite(ell))

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky_psd(np.array([[1.0, 0.0], [0.0, -1.0]]))


class TestGaussianLogpdf:
    def test_at_mean_identity_cov(self):
        g = GaussianState(np.zeros(2), np.eye(2))
        assert gaussian_logpdf(np.zeros(2), g) == pytest.approx(-math.log(2 * math.pi))

    def test_scalar_case(self):
        g = GaussianState(np.zeros(1), np.eye(1))
        expected = -0.5 - 0.5 * math.log(2 * math.pi)
        assert gaussian_logpdf(np.ones(1), g) == pytest.approx(expected)

    def test_quadrature_normalization(self):
        # numerical normalization oracle: 2-D grid over +-8 sigma integrates to 1
        g = GaussianState(np.array([0.3, -0.2]),
                          np.array([[1.2, 0.4], [0.4, 0.9]]))
        n = 400
        lim = 8.0 * math.sqrt(1.2)
        xs = np.linspace(g.mean[0] - lim, g.mean[0] + lim, n)
        ys = np.linspace(g.mean[1] - lim, g.mean[1] + lim, n)
        dx = xs[1] - xs[0]
        dy = ys[1] - ys[0]
        total = 0.0
        for x in xs:
            row = np.array([gaussian_logpdf(np.array([x, y]), g) for y in ys])
            total += np.exp(row).sum() * dx * dy
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_maximized_at_mean(self):
        rng = Rng(11)
        g = GaussianState(rng.standard_normal(3), random_spd(rng, 3))
        peak = gaussian_logpdf(g.mean, g)
        for _ in range(100):
            x = g.mean + rng.standard_normal(3)
            assert gaussian_logpdf(x, g) <= peak

    def test_dimension_mismatch(self):
        g = GaussianState(np.zeros(2), np.eye(2))
        with pytest.raises(DimensionMismatch):
            gaussian_logpdf(np.zeros(3), g)


class TestSystematicResample:
    def test_degenerate_mass(self):
        idx = systematic_resample([1.0, 0.0, 0.0], 5, Rng(0))
        assert list(idx) == [0, 0, 0, 0, 0]

    def test_uniform_stratification(self):
        idx = systematic_resample([0.25] * 4, 4, Rng(5))
        assert sorted(idx.tolist()) == [0, 1, 2, 3]

    def test_count_bound(self):
        idx = systematic_resample([0.5, 0.3, 0.2], 1000, Rng(9))
        counts = np.bincount(idx, minlength=3)
        assert np.all(np.abs(counts - np.array([500, 300, 200])) <= 1)

    def test_all_zero_raises(self):
        with pytest.raises(EmptyWeights):
            systematic_resample([0.0, 0.0], 3, Rng(0))

    def test_unbiased(self):
        # mean count over repeated draws stays within 3 sqrt(n w) of n w
        w = np.array([0.5, 0.3, 0.2])
        n = 100
        totals = np.zeros(3)
        reps = 10_000
        for seed in range(reps):
            idx = systematic_resample(w, n, Rng(seed))
            totals += np.bincount(idx, minlength=3)
        mean_counts = totals / reps
        assert np.all(np.abs(mean_counts - n * w) < 3.0 * np.sqrt(n * w))

    def test_deterministic(self):
        a = systematic_resample([0.2, 0.8], 50, Rng(123))
        b = systematic_resample([0.2, 0.8], 50, Rng(123))
        assert np.array_equal(a, b)


class TestSigmaPoints:
    def test_unit_1d_lambda_zero(self):
        # alpha=1, kappa=0 gives lambda = 0: points {0, +1, -1}, weights {0, .5, .5}
        g = GaussianState(np.zeros(1), np.eye(1))
        sps = generate_sigma_points(g, UTParams(alpha=1.0, beta=2.0, kappa=0.0))
        assert np.allclose(sps.points.ravel(), [0.0, 1.0, -1.0])
        assert np.allclose(sps.weights_mean, [0.0, 0.5, 0.5])

    def test_point_count_stacked_dim(self):
        # stacked dimension 4 * (10 + 1) = 44 gives 89 points
        n = 44
        g = GaussianState(np.zeros(n), np.eye(n))
        sps = generate_sigma_points(g, UTParams())
        assert len(sps.points) == 89

    def test_moment_reconstruction(self):
        rng = Rng(21)
        g = GaussianState(rng.standard_normal(3), random_spd(rng, 3))
        sps = generate_sigma_points(g, UTParams())
        assert np.allclose(sps.mean(), g.mean, atol=1e-12)
        err = np.max(np.abs(sps.cov() - g.cov)) / np.max(np.abs(g.cov))
        assert err < 1e-8

    def test_mean_weights_sum_to_one(self):
        for seed in range(5):
            rng = Rng(seed)
            n = int(rng.integers(1, 8))
            g = GaussianState(rng.standard_normal(n), random_spd(rng, n))
            sps = generate_sigma_points(g, UTParams())
            assert abs(sps.weights_mean.sum() - 1.0) < 1e-9


class TestRng:
    def test_identical_streams(self):
        a = Rng(42).standard_normal(10)
        b = Rng(42).standard_normal(10)
        assert np.array_equal(a, b)

    def test_substreams_differ_and_reproduce(self):
        base = Rng(42)
        x = base.substream("sim").standard_normal(4)
        y = base.substream("track").standard_normal(4)
        assert not np.array_equal(x, y)
        assert np.array_equal(x, Rng(42).substream("sim").standard_normal(4))


def test_cv_transition_structure():
    f = cv_transition(0.5)
    assert np.allclose(f @ np.array([0.0, 0.0, 1.0, 0.0]), [0.5, 0.0, 1.0, 0.0])
