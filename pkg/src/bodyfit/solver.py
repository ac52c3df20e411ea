"""Trust-region dogleg least squares, finite-difference Jacobian checks, robust penalties."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import InfeasiblePoint, NonFiniteResidual

ResidualFn = Callable[[np.ndarray], tuple]


@dataclass
class SolveOptions:
    max_iters: int = 100
    gradient_tol: float = 1e-6
    step_tol: float = 1e-8
    initial_radius: float = 1.0


@dataclass
class Iterate:
    cost: float
    step_norm: float
    radius: float
    accepted: bool


@dataclass
class SolveReport:
    iterations: int
    accepted_steps: int
    initial_cost: float
    final_cost: float
    reason: str
    term_energies: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "accepted_steps": self.accepted_steps,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "reason": self.reason,
            "term_energies": dict(self.term_energies),
        }


@dataclass
class _Term:
    name: str
    fn: ResidualFn
    weight: float


class ResidualProblem:
    """A sum of weighted squared residual terms over named parameter blocks.

    Each term function maps the full parameter vector to ``(r, J)`` where ``J``
    has one column per parameter. Its energy is ``weight * ||r||^2``.
    Blocks can be frozen with :meth:`fix`; the solver then leaves them at
    their starting values.
    """

    def __init__(self, blocks):
        self.blocks = [(str(n), int(d)) for n, d in blocks]
        self.slices = {}
        start = 0
        for name, dim in self.blocks:
            self.slices[name] = slice(start, start + dim)
            start += dim
        self.size = start
        self.terms: list[_Term] = []
        self._fixed: set[str] = set()

    def add_term(self, name, fn, weight=1.0):
        if weight < 0:
            raise ValueError("term weights must be nonnegative")
        self.terms.append(_Term(name, fn, float(weight)))
        return self

    def fix(self, *names):
        for n in names:
            if n not in self.slices:
                raise KeyError(n)
            self._fixed.add(n)
        return self

    def free_mask(self):
        mask = np.ones(self.size, dtype=bool)
        for n in self._fixed:
            mask[self.slices[n]] = False
        return mask

    def unpack(self, x):
        return {n: x[s] for n, s in self.slices.items()}

    def evaluate(self, x, jacobian=True):
        """Stacked weighted residuals, their Jacobian and per-term energies."""
        rs, Js, energies = [], [], {}
        for t in self.terms:
            if t.weight == 0.0:
                energies[t.name] = 0.0
                continue
            r, J = t.fn(x)
            r = np.asarray(r, dtype=np.float64).ravel()
            s = np.sqrt(t.weight)
            rs.append(s * r)
            energies[t.name] = t.weight * float(r @ r)
            if jacobian:
                J = np.asarray(J, dtype=np.float64).reshape(r.size, self.size)
                Js.append(s * J)
        r = np.concatenate(rs) if rs else np.zeros(0)
        J = np.vstack(Js) if (jacobian and Js) else np.zeros((r.size, self.size))
        return r, J, energies


def _gn_step(A, g):
    """Minimum-norm solution of ``A h = -g`` for symmetric PSD ``A``.

    A Cholesky solve is used when ``A`` is comfortably positive definite, where
    it gives the same step; otherwise small eigenvalues are truncated.
    """
    if A.size:
        try:
            c, low = cho_factor(A, check_finite=False)
        except LinAlgError:
            pass
        else:
            d = np.abs(np.diag(c))
            if d.min() ** 2 > 1e-10 * np.max(np.diag(A)):
                return -cho_solve((c, low), g, check_finite=False)
    w, V = np.linalg.eigh(A)
    wmax = w[-1] if w.size else 0.0
    if wmax <= 0.0:
        return np.zeros_like(g)
    keep = w > 1e-13 * wmax
    c = (V[:, keep].T @ g) / w[keep]
    return -(V[:, keep] @ c)


def _dogleg_step(h_gn, g, A, radius):
    n_gn = np.linalg.norm(h_gn)
    if n_gn <= radius:
        return h_gn
    gnorm2 = float(g @ g)
    if gnorm2 == 0.0:
        return h_gn * (radius / n_gn)
    gAg = float(g @ A @ g)
    alpha = gnorm2 / gAg if gAg > 0 else np.inf
    h_sd = -alpha * g
    n_sd = np.linalg.norm(h_sd)
    if n_sd >= radius:
        return -(radius / np.sqrt(gnorm2)) * g
    d = h_gn - h_sd
    a = float(d @ d)
    b = 2.0 * float(h_sd @ d)
    c = float(h_sd @ h_sd) - radius * radius
    # positive root of a s^2 + b s + c = 0 (c < 0), written to avoid cancellation
    disc = np.sqrt(b * b - 4 * a * c)
    s = (-2.0 * c) / (b + disc) if b > 0 else (-b + disc) / (2 * a)
    return h_sd + s * d


def solve_dogleg(problem: ResidualProblem, x0, opts: SolveOptions | None = None):
    """Minimize the problem's total energy with Powell's dogleg method.

    Returns ``(x, report)``. Costs of accepted steps never increase. Trial
    points whose residuals raise :class:`InfeasiblePoint` are rejected and the
    trust region shrinks.
    """
    opts = opts or SolveOptions()
    x = np.array(x0, dtype=np.float64)
    if x.shape != (problem.size,) or not np.all(np.isfinite(x)):
        raise ValueError("x0 must be a finite vector matching the problem size")
    free = problem.free_mask()
    r, J, energies = problem.evaluate(x)
    if not np.all(np.isfinite(r)) or not np.all(np.isfinite(J)):
        raise NonFiniteResidual("residuals or Jacobian at x0 are not finite")
    cost = float(r @ r)
    report = SolveReport(0, 0, cost, cost, "max_iters", energies)
    radius = float(opts.initial_radius)
    Jf = J[:, free]
    for it in range(opts.max_iters):
        g = Jf.T @ r
        A = Jf.T @ Jf
        h_gn = _gn_step(A, g)
        h = _dogleg_step(h_gn, g, A, radius)
        hnorm = float(np.linalg.norm(h))
        report.iterations = it + 1
        if hnorm <= opts.step_tol * (np.linalg.norm(x[free]) + opts.step_tol):
            report.iterations = it
            report.reason = "step_tol"
            break
        if np.max(np.abs(g), initial=0.0) <= opts.gradient_tol:
            report.iterations = it
            report.reason = "gradient_tol"
            break
        predicted = -(2.0 * float(g @ h) + float(h @ A @ h))
        x_new = x.copy()
        x_new[free] += h
        try:
            r_new, J_new, e_new = problem.evaluate(x_new)
        except InfeasiblePoint:
            r_new = None
        if r_new is not None and not (np.all(np.isfinite(r_new)) and np.all(np.isfinite(J_new))):
            raise NonFiniteResidual(f"non-finite residuals at iteration {it}")
        accepted = False
        if r_new is not None:
            cost_new = float(r_new @ r_new)
            rho = (cost - cost_new) / predicted if predicted > 0 else -1.0
            if rho > 0 and cost_new <= cost:
                accepted = True
                x, r, Jf, cost, energies = x_new, r_new, J_new[:, free], cost_new, e_new
                report.accepted_steps += 1
            if rho > 0.75:
                radius = max(radius, 3.0 * hnorm)
            elif rho < 0.25:
                radius = 0.5 * min(radius, hnorm)
        else:
            radius = 0.5 * min(radius, hnorm)
        report.history.append(Iterate(cost, hnorm, radius, accepted))
    report.final_cost = cost
    report.term_energies = energies
    return x, report


@dataclass
class JacobianReport:
    max_rel_error: float
    offending: list
    ok: bool


def numeric_jacobian(fn, x, step=1e-6):
    """Central-difference Jacobian of ``fn`` (returning a residual vector)."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(fn(x), dtype=np.float64).ravel()
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        J[:, i] = (np.ravel(fn(xp)) - np.ravel(fn(xm))) / (2 * step)
    return J


def relative_error(analytic, numeric):
    """Entrywise relative error, floored at 1e-6 of the largest entry."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    return np.abs(analytic - numeric) / denom


def check_jacobian(residual_fn, x, step=1e-6, tol=1e-5, value_fn=None):
    """Compare the analytic Jacobian of ``residual_fn`` with central differences.

    ``residual_fn(x)`` returns ``(r, J)``. The differences are taken on
    ``value_fn(x)`` when given (a cheaper way to compute ``r`` alone). The
    report lists every entry whose relative error exceeds ``tol`` as
    ``(row, col, analytic, numeric)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    _, Ja = residual_fn(x)
    Ja = np.asarray(Ja, dtype=np.float64).reshape(-1, x.size)
    if value_fn is None:
        def value_fn(z):
            return residual_fn(z)[0]
    Jn = numeric_jacobian(value_fn, x, step)
    err = relative_error(Ja, Jn)
    bad = np.argwhere(err > tol)
    offending = [(int(i), int(j), float(Ja[i, j]), float(Jn[i, j])) for i, j in bad]
    mx = float(err.max(initial=0.0))
    return JacobianReport(mx, offending, mx <= tol)


def robustify_gm(residual, rho0):
    """Geman-McClure penalty ``rho0^2 |e|^2 / (|e|^2 + rho0^2)`` and its gradient."""
    if rho0 <= 0:
        raise ValueError("rho0 must be positive")
    e = np.asarray(residual, dtype=np.float64)
    n2 = float(e @ e)
    s2 = rho0 * rho0
    value = s2 * n2 / (n2 + s2)
    grad = 2.0 * s2 * s2 * e / (n2 + s2) ** 2
    return value, grad


def gm_residuals(errors, rho0):
    """Least-squares form of the Geman-McClure penalty.

    For 2D errors ``e`` (M, 2) returns residuals ``r = e * rho0 / sqrt(|e|^2 + rho0^2)``
    so that ``|r|^2`` equals the penalty, plus ``dr/de`` of shape (M, 2, 2).
    """
    e = np.asarray(errors, dtype=np.float64)
    n2 = np.einsum("md,md->m", e, e)
    s2 = rho0 * rho0
    a = rho0 / np.sqrt(n2 + s2)
    r = a[:, None] * e
    d = e.shape[1]
    dr = a[:, None, None] * (np.eye(d) - np.einsum("mi,mj->mij", e, e) / (n2 + s2)[:, None, None])
    return r, dr
