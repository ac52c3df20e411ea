import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from bodyfit.errors import DegenerateCluster
from bodyfit.model import AnglePriorTerm
from bodyfit.priors import (GmmPrior, ShapePriorMatrix, angle_prior, angle_prior_residuals, fit_gmm,
                            gmm_energy, shape_prior, shape_prior_residuals, solver_constant)
from bodyfit.solver import check_jacobian

from conftest import bundled_assets

TERMS = [AnglePriorTerm(1, 0, -1.0), AnglePriorTerm(2, 0, -1.0), AnglePriorTerm(3, 1, 1.0),
         AnglePriorTerm(4, 1, -1.0)]


def random_gmm(rng, n=3, P=4, c=1.0):
    w = rng.uniform(0.5, 1.5, n)
    chol = np.tril(rng.normal(size=(n, P, P)) * 0.3)
    idx = np.arange(P)
    chol[:, idx, idx] = rng.uniform(0.3, 1.2, (n, P))
    return GmmPrior(w / w.sum(), rng.normal(size=(n, P)), chol, c)


def test_angle_prior_values():
    theta = np.zeros(15)
    assert angle_prior(theta, TERMS) == pytest.approx(4.0)
    theta[3 * 3 + 1] = 1.0
    assert angle_prior(theta, TERMS) - 3.0 == pytest.approx(np.e)
    theta[3 * 3 + 1] = -1.0
    assert angle_prior(theta, TERMS) - 3.0 == pytest.approx(np.exp(-1))


def test_angle_prior_residuals_square_to_energy_and_jacobian():
    rng = np.random.default_rng(0)
    for _ in range(10):
        theta = rng.normal(size=15)
        r, _ = angle_prior_residuals(theta, TERMS)
        assert r @ r == pytest.approx(angle_prior(theta, TERMS), rel=1e-13)
        rep = check_jacobian(lambda t: angle_prior_residuals(t, TERMS), theta, 1e-6, 1e-6)
        assert rep.ok, rep.max_rel_error


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(1e-3, 1.0))
def test_angle_prior_monotone_along_hyperextension(a, da):
    for t in TERMS:
        theta = np.zeros(15)
        theta[3 * t.joint + t.axis] = t.sign * a
        lo = angle_prior(theta, TERMS)
        theta[3 * t.joint + t.axis] = t.sign * (a + da)
        assert angle_prior(theta, TERMS) > lo


def test_bundled_angle_signs_penalize_hyperextension(model):
    # the natural bend of every monitored component lowers the prior
    for t in model.angle_prior_terms:
        theta = np.zeros(model.n_pose)
        theta[3 * t.joint + t.axis] = -0.5 * t.sign
        assert angle_prior(theta, model.angle_prior_terms) < 4.0
    names = {model.joint_names[t.joint] for t in model.angle_prior_terms}
    assert names == {"l_knee", "r_knee", "l_elbow", "r_elbow"}


def test_shape_prior_values():
    m = ShapePriorMatrix(np.array([4.0, 1.0, 2.0]))
    assert shape_prior(np.zeros(3), m) == 0.0
    assert shape_prior(np.array([1.0, 0, 0]), m) == 4.0
    b = np.array([0.3, -1.2, 0.5])
    assert shape_prior(2 * b, m) == pytest.approx(4 * shape_prior(b, m))
    r, J = shape_prior_residuals(b, m)
    assert r @ r == pytest.approx(shape_prior(b, m))
    assert check_jacobian(lambda x: shape_prior_residuals(x, m), b).ok


def test_shape_prior_rejects_nonpositive():
    with pytest.raises(ValueError):
        ShapePriorMatrix(np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        shape_prior(np.zeros(2), ShapePriorMatrix(np.ones(3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_shape_prior_convex_midpoint(seed):
    rng = np.random.default_rng(seed)
    m = ShapePriorMatrix(rng.uniform(0.1, 5, 6))
    a, b = rng.normal(size=6), rng.normal(size=6)
    assert shape_prior(0.5 * (a + b), m) <= 0.5 * (shape_prior(a, m) + shape_prior(b, m)) + 1e-12


def test_gmm_single_component_at_mean():
    P = 5
    g = GmmPrior(np.ones(1), np.zeros((1, P)), np.eye(P)[None], c=1.0)
    e, j = gmm_energy(g, np.zeros(P))
    assert j == 0
    assert e == pytest.approx(-np.log((2 * np.pi) ** (-P / 2)), rel=1e-13)
    g2 = g.with_c(0.01)
    assert gmm_energy(g2, np.zeros(P))[0] == pytest.approx(-np.log(0.01 * (2 * np.pi) ** (-P / 2)))


def test_gmm_heavier_weight_wins_at_equal_distance():
    P = 3
    g = GmmPrior(np.array([0.3, 0.7]), np.zeros((2, P)), np.stack([np.eye(P)] * 2))
    assert gmm_energy(g, np.array([0.2, -0.1, 0.4]))[1] == 1


def test_gmm_mode_energies_match_scipy():
    rng = np.random.default_rng(1)
    g = random_gmm(rng)
    covs = g.covariances
    for x in rng.normal(size=(20, 4)):
        ref = [-np.log(g.weights[j]) - multivariate_normal(g.means[j], covs[j]).logpdf(x)
               for j in range(g.n_components)]
        np.testing.assert_allclose(g.mode_energies(x), ref, rtol=1e-11)
        e, j = gmm_energy(g, x)
        assert j == int(np.argmin(ref)) and e == pytest.approx(min(ref), rel=1e-11)


def test_gmm_exact_nll_matches_scipy():
    rng = np.random.default_rng(2)
    g = random_gmm(rng)
    covs = g.covariances
    for x in rng.normal(size=(10, 4)):
        ref = -logsumexp([np.log(g.weights[j]) + multivariate_normal(g.means[j], covs[j]).logpdf(x)
                          for j in range(g.n_components)])
        assert g.exact_nll(x) == pytest.approx(ref, rel=1e-11)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_max_approximation_upper_bounds_exact(seed):
    rng = np.random.default_rng(seed)
    g = random_gmm(rng)
    x = 2 * rng.normal(size=4)
    assert gmm_energy(g, x)[0] >= g.exact_nll(x) - 1e-12


def test_gmm_residuals_square_to_energy():
    rng = np.random.default_rng(3)
    g = random_gmm(rng)
    g = g.with_c(solver_constant(g.weights, g.chol))
    for x in rng.normal(size=(10, 4)):
        r, _, j = g.residuals(x)
        e, j2 = gmm_energy(g, x)
        assert j == j2
        assert r @ r == pytest.approx(e, rel=1e-12)


def test_gmm_residual_jacobian_off_boundaries():
    rng = np.random.default_rng(4)
    g = random_gmm(rng)
    g = g.with_c(solver_constant(g.weights, g.chol))
    checked = 0
    for x in rng.normal(size=(40, 4)):
        modes = {g.residuals(x + d)[2] for d in np.vstack([np.zeros(4), 1e-6 * np.eye(4), -1e-6 * np.eye(4)])}
        if len(modes) > 1:
            continue
        rep = check_jacobian(lambda t: g.residuals(t)[:2], x, 1e-6, 1e-6)
        assert rep.ok, rep.max_rel_error
        checked += 1
    assert checked > 30


def test_solver_constant_is_largest_power_of_ten():
    rng = np.random.default_rng(5)
    g = random_gmm(rng, n=4, P=6)
    c = solver_constant(g.weights, g.chol)
    assert np.log10(c) == pytest.approx(round(np.log10(c)))
    assert np.all(g.with_c(c).constants() >= 0)
    assert np.any(g.with_c(10 * c).constants() < 0)


def test_bundled_prior_constants_nonnegative(assets):
    assert np.all(assets.gmm.constants() >= 0)
    assert assets.gmm.dim == 3 * (assets.model.K - 1)
    assert assets.gmm.n_components == 8


def test_gmm_rejects_inconsistent_inputs():
    with pytest.raises(ValueError):
        GmmPrior(np.array([0.5, 0.6]), np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    with pytest.raises(ValueError):
        GmmPrior(np.array([1.0]), np.zeros((1, 2)), -np.eye(2)[None])
    with pytest.raises(ValueError):
        GmmPrior(np.array([1.0]), np.zeros((1, 2)), np.eye(2)[None], c=0.0)


def test_fit_gmm_single_gaussian():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(2000, 3)) * [1.0, 2.0, 0.5] + [1, -2, 3]
    g = fit_gmm(X, 1, seed=0)
    se = X.std(axis=0) / np.sqrt(len(X))
    assert np.all(np.abs(g.means[0] - X.mean(axis=0)) <= 3 * se)
    np.testing.assert_allclose(g.covariances[0], np.cov(X.T, bias=True) + 1e-6 * np.eye(3), rtol=1e-8)


def test_fit_gmm_two_clusters_and_monotone_likelihood():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(300, 2)) * 0.3 + [5, 0]
    b = rng.normal(size=(300, 2)) * 0.3 + [-5, 2]
    g = fit_gmm(np.vstack([a, b]), 2, seed=1)
    got = g.means[np.argsort(g.means[:, 0])]
    np.testing.assert_allclose(got, [[-5, 2], [5, 0]], atol=0.1)
    ll = np.array(g.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-10)


def test_fit_gmm_deterministic():
    X = np.random.default_rng(8).normal(size=(400, 3))
    a, b = fit_gmm(X, 3, seed=5), fit_gmm(X, 3, seed=5)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.chol, b.chol)


def test_fit_gmm_errors():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((20, 2)), 3)
    X = np.r_[np.zeros((99, 2)), [[1e6, 1e6]]]
    with pytest.raises(DegenerateCluster):
        fit_gmm(np.tile(X, (1, 1)), 10, seed=0)


def test_prior_samples_follow_mixture():
    g = bundled_assets().gmm
    X = g.sample(np.random.default_rng(9), 4000)
    np.testing.assert_allclose(X.mean(axis=0), g.weights @ g.means, atol=0.03)
