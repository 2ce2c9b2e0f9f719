import math

import numpy as np
import pytest

from floodem.errors import DataError, DegenerateError, DimError
from floodem.gaussian import GaussianParams, log_pdf, regularize, weighted_mle


def test_log_pdf_standard_normal_at_mode():
    g = GaussianParams(np.zeros(1), np.eye(1))
    assert log_pdf(g, np.zeros(1)) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_log_pdf_bivariate_standard_at_mode():
    g = GaussianParams(np.zeros(2), np.eye(2))
    assert log_pdf(g, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)


def test_log_pdf_matches_direct_formula():
    # m=1, mu=3, var=4, x=5: direct scalar evaluation of the density formula
    g = GaussianParams(np.array([3.0]), np.array([[4.0]]))
    expected = -0.5 * math.log(2 * math.pi * 4.0) - (5.0 - 3.0) ** 2 / (2 * 4.0)
    assert expected == pytest.approx(-0.5 * math.log(8 * math.pi) - 0.5, abs=1e-15)
    assert log_pdf(g, np.array([5.0])) == pytest.approx(expected, abs=1e-12)


def test_log_pdf_batch_matches_scalar(rng):
    g = GaussianParams(rng.normal(size=3), np.diag([1.0, 2.0, 3.0]))
    pts = rng.normal(size=(10, 3))
    batch = log_pdf(g, pts)
    for i in range(10):
        assert batch[i] == pytest.approx(log_pdf(g, pts[i]), abs=1e-12)


def test_log_pdf_integrates_to_one_1d():
    mu, sig = 1.7, 1.5
    g = GaussianParams(np.array([mu]), np.array([[sig**2]]))
    xs = np.linspace(mu - 6 * sig, mu + 6 * sig, 200001)
    dens = np.exp(log_pdf(g, xs[:, None]))
    integral = float(np.sum((dens[1:] + dens[:-1]) * np.diff(xs)) / 2.0)
    assert abs(integral - 1.0) <= 1e-8


def test_log_pdf_dim_mismatch():
    g = GaussianParams(np.zeros(2), np.eye(2))
    with pytest.raises(DimError):
        log_pdf(g, np.zeros(3))


def test_weighted_mle_two_points_unit_weights():
    est = weighted_mle(np.array([[0.0], [2.0]]), np.array([1.0, 1.0]))
    assert est.mean[0] == pytest.approx(1.0, abs=1e-15)
    assert est.cov[0, 0] == pytest.approx(1.0 + 1e-9, abs=1e-15)


def test_weighted_mle_zero_weight_removes_point():
    est = weighted_mle(np.array([[0.0], [2.0]]), np.array([1.0, 0.0]))
    assert est.mean[0] == pytest.approx(0.0, abs=1e-15)
    assert est.cov[0, 0] == pytest.approx(1e-9, abs=1e-18)  # rank-0 repair floor


def test_weighted_mle_matches_independent_moments(rng):
    pts = rng.normal(size=(50, 3)) * 2.0 + 1.0
    est = weighted_mle(pts, np.ones(50))
    mean = pts.mean(axis=0)
    centered = pts - mean
    cov = centered.T @ centered / 50.0
    cov = regularize(cov, 1e-9 * np.trace(cov) / 3.0)
    np.testing.assert_allclose(est.mean, mean, atol=1e-12)
    np.testing.assert_allclose(est.cov, cov, atol=1e-12)


def test_weighted_mle_weight_homogeneity(rng):
    pts = rng.normal(size=(20, 2))
    w = rng.uniform(0.1, 2.0, size=20)
    a = weighted_mle(pts, w)
    b = weighted_mle(np.vstack([pts, pts]), np.concatenate([w / 2, w / 2]))
    np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
    np.testing.assert_allclose(a.cov, b.cov, atol=1e-12)


def test_weighted_mle_errors():
    with pytest.raises(DegenerateError):
        weighted_mle(np.array([[1.0], [2.0]]), np.array([0.0, 0.0]))
    with pytest.raises(DimError):
        weighted_mle(np.array([[1.0], [2.0]]), np.array([1.0]))
    with pytest.raises(DataError):
        weighted_mle(np.array([[1.0], [2.0]]), np.array([1.0, -1.0]))


def test_weighted_mle_cov_always_factorizes(rng):
    # includes nearly-degenerate weight patterns
    for _ in range(25):
        pts = rng.normal(size=(12, 3))
        w = rng.uniform(0.0, 1.0, size=12) ** 8
        if w.sum() == 0.0:
            continue
        est = weighted_mle(pts, w)
        np.linalg.cholesky(est.cov)


def test_regularize_identity():
    out = regularize(np.eye(2), 1e-9)
    np.testing.assert_allclose(out, np.eye(2) * (1.0 + 1e-9), rtol=0, atol=0)


def test_regularize_zero_matrix():
    out = regularize(np.zeros((2, 2)), 1e-9)
    np.testing.assert_allclose(out, np.eye(2) * 1e-9, rtol=0, atol=0)


def test_regularize_rank_one_escalates_until_cholesky_passes():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    out = regularize(cov, 1e-9)
    np.linalg.cholesky(out)
    eps = out[0, 0] - 1.0
    assert out[0, 1] == 1.0 and out[1, 0] == 1.0
    # first accepted jitter is from the escalation ladder {1e-9, 1e-8, ...}
    ladder = 1e-9 * 10.0 ** np.arange(0, 6)
    assert any(eps == pytest.approx(e, rel=1e-12) for e in ladder)
    smaller = eps / 10.0
    if smaller >= 1e-9:
        with pytest.raises(np.linalg.LinAlgError):
            np.linalg.cholesky(cov + smaller * np.eye(2))


def test_gaussian_params_symmetrizes_and_repairs():
    g = GaussianParams(np.zeros(2), np.array([[2.0, 0.3], [0.1, 2.0]]))
    np.testing.assert_array_equal(g.cov, g.cov.T)
    singular = GaussianParams(np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]))
    np.linalg.cholesky(singular.cov)
