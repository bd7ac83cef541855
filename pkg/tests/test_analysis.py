import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from shapecal.analysis import (AnalysisError, LaplaceError, export_tables, histogram, laplace_approximation,
                               map_binned, map_from_particles, marginalize, read_particles_csv, select_bandwidth,
                               silverman_bandwidth, weighted_kde, weighted_moments)
from shapecal.smc import ParticleSet, effective_sample_size


def weighted_set(rng, n=1000, dim=3):
    return ParticleSet(rng.normal(size=(n, dim)) * [1.0, 2.0, 0.5][:dim], rng.normal(size=n))


def two_pass(pos, w):
    mean = np.zeros(pos.shape[1])
    for x, wi in zip(pos, w):
        mean += wi * x
    cov = np.zeros((pos.shape[1], pos.shape[1]))
    for x, wi in zip(pos, w):
        cov += wi * np.outer(x - mean, x - mean)
    return mean, cov


class TestMoments:
    def test_two_points(self):
        mean, cov = weighted_moments(np.array([0.0, 2.0]))
        assert mean[0] == 1.0 and cov[0, 0] == 1.0

    def test_point_mass(self):
        mean, cov = weighted_moments(np.array([[1.0, 5.0], [2.0, 3.0]]), weights=[0.0, 1.0])
        np.testing.assert_array_equal(mean, [2.0, 3.0])
        np.testing.assert_array_equal(cov, np.zeros((2, 2)))

    def test_matches_two_pass(self, rng):
        p = weighted_set(rng)
        mean, cov = weighted_moments(p)
        m2, c2 = two_pass(p.positions, p.weights)
        np.testing.assert_allclose(mean, m2, atol=1e-12)
        np.testing.assert_allclose(cov, c2, atol=1e-12)
        assert np.all(np.diag(cov) >= 0) and np.array_equal(cov, cov.T)


class TestMarginalize:
    def test_identity(self, rng):
        p = weighted_set(rng, 50)
        q = marginalize(p, [0, 1, 2])
        np.testing.assert_array_equal(q.positions, p.positions)
        np.testing.assert_array_equal(q.weights, p.weights)

    def test_sub_block(self, rng):
        p = weighted_set(rng)
        mean, cov = weighted_moments(p)
        m, c = weighted_moments(marginalize(p, [0, 2]))
        np.testing.assert_allclose(m, mean[[0, 2]], atol=1e-12)
        np.testing.assert_allclose(c, cov[np.ix_([0, 2], [0, 2])], atol=1e-12)

    def test_histogram_sum(self, rng):
        p = weighted_set(rng)
        ranges = [(-4, 4), (-8, 8), (-2, 2)]
        full, _ = np.histogramdd(p.positions, bins=8, range=ranges, weights=p.weights)
        _, mass = histogram(marginalize(p, [0, 2]), [0, 1], 8, ranges=[ranges[0], ranges[2]])
        np.testing.assert_allclose(mass, full.sum(axis=1) / full.sum(), atol=1e-12)

    def test_invalid(self, rng):
        with pytest.raises(AnalysisError):
            marginalize(weighted_set(rng, 5), [3])


class TestMAP:
    def test_argmax(self):
        np.testing.assert_array_equal(map_from_particles([[0.0], [1.0], [2.0]], [-3, -1, -2]), [1.0])

    def test_tie(self):
        assert map_from_particles([5.0, 6.0, 7.0], [0, 0, 0])[0] == 5.0

    def test_empty(self):
        with pytest.raises(AnalysisError):
            map_from_particles(np.empty((0, 1)), [])

    @settings(max_examples=50)
    @given(st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
    def test_monotone_transform(self, a, b):
        rng = np.random.default_rng(0)
        pos = rng.normal(size=(30, 2))
        s = rng.normal(size=30)
        want = map_from_particles(pos, s)
        np.testing.assert_array_equal(map_from_particles(pos, a * s + b), want)
        np.testing.assert_array_equal(map_from_particles(pos, np.exp(s)), want)


class TestMapBinned:
    def test_single_bin(self):
        pos = np.array([[0.0, 0.0], [0.01, 0.02], [1.0, 1.0]])
        center, spec = map_binned(pos, 10, weights=[0.45, 0.45, 0.1])
        np.testing.assert_allclose(center, [0.05, 0.05])

    def test_two_clusters(self, rng):
        a = rng.uniform(0, 0.05, size=(50, 2))
        b = rng.uniform(0.95, 1.0, size=(50, 2))
        w = np.r_[np.full(50, 0.4 / 50), np.full(50, 0.6 / 50)]
        center, _ = map_binned(np.vstack([a, b]), 5, weights=w)
        assert np.all(center > 0.8)

    def test_tie_lexicographic(self):
        center, _ = map_binned(np.array([[1.0, 0.0], [0.0, 1.0]]), 2)
        np.testing.assert_allclose(center, [0.25, 0.75])

    def test_refinement_approaches_mode(self):
        rng = np.random.default_rng(7)
        pos = rng.uniform(0, 1, size=(400_000, 2))
        mode = np.array([0.31, 0.62])
        w = np.exp(-0.5 * np.sum(((pos - mode) / [0.15, 0.1]) ** 2, axis=1))
        coarse, _ = map_binned(pos, 10, weights=w)
        fine, _ = map_binned(pos, 30, weights=w)
        assert np.linalg.norm(fine - mode) <= np.linalg.norm(coarse - mode)

    def test_too_few_bins(self):
        with pytest.raises(AnalysisError):
            map_binned(np.zeros((3, 1)), 1)


class TestKDE:
    def test_degenerate(self):
        with pytest.raises(AnalysisError):
            weighted_kde(np.zeros(5), np.zeros(1))
        with pytest.raises(AnalysisError):
            weighted_kde(np.zeros(5), np.zeros(1), "silverman")

    def test_kernel_center(self):
        h = 0.37
        val = weighted_kde(np.zeros(2), np.zeros(1), h, weights=[0.5, 0.5])
        assert val[0] == pytest.approx(1 / (h * math.sqrt(2 * math.pi)), rel=1e-14)

    def test_silverman_rule(self, rng):
        x = rng.normal(size=500)
        w = rng.uniform(size=500)
        w /= w.sum()
        sd = math.sqrt(np.sum(w * (x - np.sum(w * x)) ** 2))
        want = sd * (4 / (3 * effective_sample_size(w))) ** 0.2
        assert silverman_bandwidth(x, w)[0] == pytest.approx(want, rel=1e-12)

    def test_loo_grid_on_grid(self, rng):
        x = rng.normal(size=(300, 1))
        h0 = select_bandwidth(x, None, "silverman")
        h = select_bandwidth(x, None, "loo_grid")
        factors = np.geomspace(0.2, 5, 20)
        assert np.min(np.abs(factors - h[0] / h0[0])) < 1e-12

    @pytest.mark.parametrize("mode", ["silverman", "loo_grid"])
    def test_mass_1d(self, rng, mode):
        x = np.r_[rng.normal(-1, 0.3, 300), rng.normal(2, 0.8, 300)]
        w = rng.uniform(0.5, 1.5, 600)
        grid = np.linspace(-8, 10, 20001)
        dens = weighted_kde(x, grid, mode, weights=w)
        assert abs(integrate.trapezoid(dens, grid) - 1) < 1e-3

    @pytest.mark.parametrize("mode", ["silverman", "loo_grid"])
    def test_mass_2d(self, rng, mode):
        x = rng.multivariate_normal([0, 0], [[1, 0.6], [0.6, 1]], size=400)
        g = np.linspace(-7, 7, 281)
        gx, gy = np.meshgrid(g, g, indexing="ij")
        dens = weighted_kde(x, np.c_[gx.ravel(), gy.ravel()], mode).reshape(gx.shape)
        assert abs(integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g) - 1) < 1e-3

    def test_3d_rejected(self, rng):
        with pytest.raises(AnalysisError):
            weighted_kde(rng.normal(size=(10, 3)), np.zeros((1, 3)))


class TestLaplace:
    def test_1d_quadratic(self):
        a, s = 2.5, 0.3
        mean, cov = laplace_approximation(lambda x: -(x[0] - a) ** 2 / (2 * s**2), [a])
        assert mean[0] == a
        assert cov[0, 0] == pytest.approx(s**2, rel=1e-6)

    def test_2d_quadratic(self):
        A = np.array([[3.0, 1.2], [1.2, 2.0]])
        m = np.array([400.0, 0.2])
        fn = lambda x: -0.5 * (x - m) @ A @ (x - m)  # noqa: E731
        _, cov = laplace_approximation(fn, m, scale=[700.0, 1.3])
        np.testing.assert_allclose(cov, np.linalg.inv(A), rtol=1e-6)

    def test_saddle(self):
        with pytest.raises(LaplaceError, match="non-PD Hessian"):
            laplace_approximation(lambda x: -x[0] ** 2 + x[1] ** 2, [0.0, 0.0])


class TestExport:
    def test_round_trip(self, rng, tmp_path):
        p = ParticleSet(rng.normal(size=(500, 3)), rng.normal(size=500), 1.0, rng.normal(size=500),
                        rng.normal(size=500))
        scores = p.log_lik + p.log_prior
        files = export_tables(p, scores, tmp_path, n_params=2, names=["E_1", "nu_1"], hist_bins=12, map_bins=10,
                              laplace={"error": "non-PD Hessian"})
        q, n_params = read_particles_csv(files["particles"])
        assert n_params == 2 and q.dim == 3
        summary = json.loads(files["summary"].read_text())
        mean, cov = weighted_moments(marginalize(q, [0, 1]))
        np.testing.assert_allclose(summary["posterior_mean"], mean, atol=1e-10)
        np.testing.assert_allclose(summary["covariance"], cov, atol=1e-10)
        np.testing.assert_array_equal(summary["map_particle"], p.positions[np.argmax(scores)])
        assert summary["laplace"] == {"error": "non-PD Hessian"}
        assert summary["names"] == ["E_1", "nu_1"]

        for key in ("hist_0", "hist_1", "hist_0_1"):
            with open(files[key]) as fh:
                mass = [float(r["mass"]) for r in csv.DictReader(fh)]
            assert abs(sum(mass) - 1) < 1e-9
        with open(files["parallel_axis"]) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["E_1", "nu_1", "theta_0", "log_posterior"]
        assert len(rows) - 1 == p.n
        with open(files["kde_0"]) as fh:
            assert len(list(csv.reader(fh))) == 201

    def test_unwritable(self, rng, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        p = ParticleSet.uniform(rng.normal(size=(10, 1)))
        with pytest.raises(AnalysisError):
            export_tables(p, np.zeros(10), blocker / "sub")
