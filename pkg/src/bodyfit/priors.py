"""Pose and shape priors: bending-angle prior, max-approximated Gaussian mixture, shape prior."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.special import logsumexp

from .errors import DegenerateCluster

LOG_2PI = np.log(2.0 * np.pi)


# --- bending prior ----------------------------------------------------------

def _angle_index(terms):
    idx = np.array([3 * t.joint + t.axis for t in terms], dtype=np.int64)
    sign = np.array([t.sign for t in terms], dtype=np.float64)
    return idx, sign


def angle_prior(theta, terms):
    """Sum of ``exp(sign * theta_i)`` over the monitored knee/elbow components."""
    idx, sign = _angle_index(terms)
    return float(np.sum(np.exp(sign * np.asarray(theta)[idx])))


def angle_prior_residuals(theta, terms):
    """Residuals ``exp(sign * theta_i / 2)`` and their Jacobian with respect to theta."""
    theta = np.asarray(theta, dtype=np.float64)
    idx, sign = _angle_index(terms)
    r = np.exp(0.5 * sign * theta[idx])
    J = np.zeros((len(idx), theta.size))
    J[np.arange(len(idx)), idx] = 0.5 * sign * r
    return r, J


# --- shape prior --------------------------------------------------------------

@dataclass(frozen=True)
class ShapePriorMatrix:
    inv_sigma_diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.inv_sigma_diag, dtype=np.float64)
        if d.ndim != 1 or np.any(d <= 0):
            raise ValueError("inv_sigma_diag must be a vector of positive reals")
        object.__setattr__(self, "inv_sigma_diag", d)

    def sample(self, rng, n=None):
        std = 1.0 / np.sqrt(self.inv_sigma_diag)
        size = (len(std),) if n is None else (n, len(std))
        return rng.standard_normal(size) * std


def shape_prior(beta, m: ShapePriorMatrix):
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != m.inv_sigma_diag.shape:
        raise ValueError("beta and prior lengths differ")
    return float(np.sum(m.inv_sigma_diag * beta * beta))


def shape_prior_residuals(beta, m: ShapePriorMatrix):
    s = np.sqrt(m.inv_sigma_diag)
    return s * np.asarray(beta, dtype=np.float64), np.diag(s)


# --- mixture pose prior -------------------------------------------------------

@dataclass
class GmmPrior:
    """Gaussian mixture over body pose (global orientation excluded).

    Covariances are stored as lower Cholesky factors, ``cov[j] = L_j L_j^T``.
    ``c`` scales every component so each per-mode energy is nonnegative.
    """

    weights: np.ndarray
    means: np.ndarray
    chol: np.ndarray
    c: float = 1.0
    log_likelihood: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.chol = np.asarray(self.chol, dtype=np.float64)
        n, P = self.means.shape
        if self.weights.shape != (n,) or self.chol.shape != (n, P, P):
            raise ValueError("inconsistent mixture shapes")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")
        diag = np.diagonal(self.chol, axis1=1, axis2=2)
        if np.any(diag <= 0):
            raise ValueError("covariance factors need a positive diagonal")
        if not self.c > 0:
            raise ValueError("c must be positive")
        self.chol = np.tril(self.chol)
        self._inv_chol = np.stack([solve_triangular(L, np.eye(P), lower=True) for L in self.chol])
        # -log(g_j N(mu_j; mu_j, cov_j)), before c
        self._peak_nll = -np.log(self.weights) + 0.5 * P * LOG_2PI + np.sum(np.log(diag), axis=1)

    @property
    def n_components(self):
        return len(self.weights)

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def covariances(self):
        return np.einsum("jab,jcb->jac", self.chol, self.chol)

    def constants(self):
        """Per-mode energy at its own mean: ``-log(c g_j N(mu_j))``."""
        return self._peak_nll - np.log(self.c)

    def with_c(self, c):
        return GmmPrior(self.weights, self.means, self.chol, c)

    def mode_energies(self, theta_body):
        d = np.asarray(theta_body, dtype=np.float64) - self.means
        z = np.einsum("jab,jb->ja", self._inv_chol, d)
        return 0.5 * np.sum(z * z, axis=1) + self.constants()

    def exact_nll(self, theta_body):
        """``-log sum_j c g_j N_j(theta)``, the quantity the max operator approximates."""
        return float(-logsumexp(-self.mode_energies(theta_body)))

    def residuals(self, theta_body):
        """Residuals of the minimum-energy mode and the index of that mode.

        ``|r|^2`` equals :func:`gmm_energy`; the Jacobian is that of the
        selected mode.
        """
        e = self.mode_energies(theta_body)
        j = int(np.argmin(e))
        const = self.constants()[j]
        if const < 0:
            raise ValueError("c too large: mode constant is negative")
        z = self._inv_chol[j] @ (np.asarray(theta_body, dtype=np.float64) - self.means[j])
        r = np.r_[z / np.sqrt(2.0), np.sqrt(const)]
        J = np.vstack([self._inv_chol[j] / np.sqrt(2.0), np.zeros((1, self.dim))])
        return r, J, j

    def sample(self, rng, n):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nab,nb->na", self.chol[comp], eps)


def gmm_energy(prior: GmmPrior, theta_body):
    """Max-approximated mixture energy ``min_j -log(c g_j N_j(theta))`` and the argmin mode."""
    e = prior.mode_energies(theta_body)
    j = int(np.argmin(e))
    return float(e[j]), j


def solver_constant(weights, chol):
    """Largest power of ten keeping every per-mode energy nonnegative."""
    P = chol.shape[1]
    diag = np.diagonal(chol, axis1=1, axis2=2)
    peak = -np.log(weights) + 0.5 * P * LOG_2PI + np.sum(np.log(diag), axis=1)
    return 10.0 ** np.floor(peak.min() / np.log(10.0))


def _kmeans_pp(X, k, rng):
    S = X.shape[0]
    centers = [X[rng.integers(S)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(S)
        else:
            idx = rng.choice(S, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _log_gauss(X, means, chols):
    S, P = X.shape
    out = np.empty((S, len(means)))
    for j, (mu, L) in enumerate(zip(means, chols)):
        z = solve_triangular(L, (X - mu).T, lower=True)
        out[:, j] = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * P * LOG_2PI
    return out


def fit_gmm(samples, n_components=8, seed=0, max_iter=300, tol=1e-8, reg=1e-6):
    """Full-covariance EM with k-means++ seeding.

    Deterministic given ``seed``. The returned prior carries the per-iteration
    mean log-likelihood in ``log_likelihood`` and a solver constant ``c``
    from :func:`solver_constant`.
    """
    X = np.asarray(samples, dtype=np.float64)
    S, P = X.shape
    if S < 10 * n_components:
        raise ValueError(f"need at least {10 * n_components} samples, got {S}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, n_components, rng)
    assign = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((S, n_components))
    resp[np.arange(S), assign] = 1.0
    history = []
    eye = np.eye(P)
    for it in range(max_iter):
        # M step
        Nk = resp.sum(axis=0)
        if np.any(Nk < 1.0):
            raise DegenerateCluster(
                f"component {int(np.argmin(Nk))} holds responsibility mass {Nk.min():.3g} < 1/S"
            )
        weights = Nk / S
        means = (resp.T @ X) / Nk[:, None]
        chols = np.empty((n_components, P, P))
        for j in range(n_components):
            D = X - means[j]
            cov = (resp[:, j, None] * D).T @ D / Nk[j] + reg * eye
            chols[j] = cholesky(cov, lower=True)
        # E step
        logp = _log_gauss(X, means, chols) + np.log(weights)
        lse = logsumexp(logp, axis=1)
        history.append(float(lse.mean()))
        resp = np.exp(logp - lse[:, None])
        if it > 0 and history[-1] - history[-2] < tol * max(1.0, abs(history[-2])):
            break
    prior = GmmPrior(weights, means, chols, solver_constant(weights, chols))
    prior.log_likelihood = history
    return prior
