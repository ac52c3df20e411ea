"""Capsule proxies for the body: fitting, shape regression, sphere decomposition, overlap energy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .errors import EmptyPart, InfeasiblePoint
from .solver import ResidualProblem, SolveOptions, solve_dogleg

N_SURFACE_SAMPLES = 200
SURFACE_SUBDIV = 4
REST_OVERLAP_CUTOFF = 1e-4


@dataclass
class CapsuleSet:
    """One capsule per listed part, attached to the rig in the rest pose.

    The axis of capsule ``i`` runs through the midpoint of the rest joints of
    ``parts[i]`` and ``child[i]`` when ``child[i] >= 0``; otherwise through
    ``joint[parts[i]] + offset[i]`` along the fixed unit ``direction[i]``.
    """

    parts: np.ndarray
    radii: np.ndarray
    lengths: np.ndarray
    child: np.ndarray
    offset: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.parts = np.asarray(self.parts, dtype=np.int64)
        self.child = np.asarray(self.child, dtype=np.int64)
        self.radii = np.asarray(self.radii, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(-1, 3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(-1, 3)
        n = len(self.parts)
        if len(set(self.parts.tolist())) != n:
            raise ValueError("exactly one capsule per part")
        for arr in (self.radii, self.lengths, self.child, self.offset, self.direction):
            if len(arr) != n:
                raise ValueError("capsule arrays differ in length")
        if np.any(self.radii <= 0) or np.any(self.lengths < 0):
            raise ValueError("radii must be > 0 and lengths >= 0")

    def __len__(self):
        return len(self.parts)

    def axes(self, rest_joints):
        """Rest-pose capsule centers and unit axis directions."""
        J = np.asarray(rest_joints)
        centers = np.empty((len(self), 3))
        dirs = np.empty((len(self), 3))
        for i, (p, c) in enumerate(zip(self.parts, self.child)):
            if c >= 0:
                seg = J[c] - J[p]
                centers[i] = 0.5 * (J[p] + J[c]) + self.offset[i]
                dirs[i] = seg / np.linalg.norm(seg)
            else:
                centers[i] = J[p] + self.offset[i]
                dirs[i] = self.direction[i]
        return centers, dirs

    def with_dimensions(self, radii, lengths):
        return CapsuleSet(self.parts, radii, lengths, self.child, self.offset, self.direction)


@dataclass
class CapsuleRegressor:
    """Linear map from shape coefficients to capsule radii then lengths."""

    weights: np.ndarray
    intercept: np.ndarray
    ridge_lambda: float
    cv_error: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.intercept = np.asarray(self.intercept, dtype=np.float64)

    @property
    def n_capsules(self):
        return len(self.intercept) // 2

    def predict(self, beta):
        out = self.weights @ np.asarray(beta, dtype=np.float64) + self.intercept
        n = self.n_capsules
        return out[:n], out[n:]


@dataclass
class SphereCloud:
    centers: np.ndarray
    sigmas: np.ndarray
    part_of: np.ndarray
    pairs: np.ndarray
    capsule_of: np.ndarray | None = None

    def incompatible(self, i):
        """Indices of the spheres incompatible with sphere ``i``."""
        a = self.pairs[self.pairs[:, 0] == i, 1]
        b = self.pairs[self.pairs[:, 1] == i, 0]
        return np.sort(np.r_[a, b])


# --- capsule geometry ---------------------------------------------------------

def _frame(d):
    """Two unit vectors completing ``d`` to an orthonormal frame."""
    a = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(d, a)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _fibonacci_hemisphere(n):
    i = np.arange(n) + 0.5
    z = i / n  # axial component in (0, 1)
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    rho = np.sqrt(1.0 - z * z)
    return np.stack([z, rho * np.cos(phi), rho * np.sin(phi)], axis=1)


def surface_design(radius, length, n=N_SURFACE_SAMPLES):
    """Fixed sample layout on a capsule, split by area at the given dimensions.

    Returns ``(kind, a, b)`` arrays: cylinder samples (kind 0) sit at axial
    fraction ``a`` in [-0.5, 0.5] and angle ``b``; cap samples (kind +1/-1)
    use a unit hemisphere direction stored in ``a`` (axial) and ``b``
    (2-vector radial).
    """
    cyl_area = 2 * math.pi * radius * length
    cap_area = 4 * math.pi * radius * radius
    n_cyl = int(round(n * cyl_area / (cyl_area + cap_area)))
    n_cap = n - n_cyl
    n_top = n_cap // 2
    n_bot = n_cap - n_top
    design = {}
    if n_cyl:
        # golden-ratio lattice on the lateral surface
        k = np.arange(n_cyl) + 0.5
        design["cyl"] = (k / n_cyl - 0.5, 2 * math.pi * ((k * 0.6180339887498949) % 1.0))
    design["top"] = _fibonacci_hemisphere(n_top)
    design["bot"] = _fibonacci_hemisphere(n_bot)
    return design


def surface_points(center, d, radius, length, design):
    """Sample points and their derivatives with respect to (radius, length)."""
    e1, e2 = _frame(d)
    pts, dp_dr, dp_dl = [], [], []
    if "cyl" in design:
        u, phi = design["cyl"]
        radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        pts.append(center + (u * length)[:, None] * d + radius * radial)
        dp_dr.append(radial)
        dp_dl.append(u[:, None] * d * np.ones((len(u), 1)))
    for key, sgn in (("top", 1.0), ("bot", -1.0)):
        w = design[key]
        if len(w) == 0:
            continue
        omega = sgn * w[:, :1] * d + w[:, 1:2] * e1 + w[:, 2:3] * e2
        pts.append(center + sgn * 0.5 * length * d + radius * omega)
        dp_dr.append(omega)
        dp_dl.append(np.tile(sgn * 0.5 * d, (len(w), 1)))
    return np.vstack(pts), np.vstack(dp_dr), np.vstack(dp_dl)


def capsule_distance(points, center, d, radius, length):
    """Signed distance of points to a capsule surface and its (radius, length) gradient."""
    rel = points - center
    t = rel @ d
    half = 0.5 * length
    tc = np.clip(t, -half, half)
    foot = center + tc[:, None] * d
    diff = points - foot
    dist = np.linalg.norm(diff, axis=1)
    safe = np.maximum(dist, 1e-15)
    outside = np.abs(t) > half
    dd_dl = np.where(outside, -np.einsum("md,d->m", diff, d) * np.sign(t) * 0.5 / safe, 0.0)
    return dist - radius, -np.ones_like(dist), dd_dl


def _part_vertices(model, vertices, part):
    owner = np.argmax(model.skin_weights, axis=1)
    pts = vertices[owner == part]
    if len(pts) == 0:
        raise EmptyPart(f"part {part} ({model.joint_names[part]}) owns no vertices")
    return pts


def _barycentric_grid(n):
    pts = [(i / n, j / n) for i in range(n + 1) for j in range(n + 1 - i)]
    w = np.array([(a, b, 1.0 - a - b) for a, b in pts])
    # drop the corners; vertices are added separately
    return w[np.max(w, axis=1) < 1.0 - 1e-12]


def part_surface_points(model, vertices, part, subdiv=SURFACE_SUBDIV):
    """Vertices of a part plus barycentric samples on the faces it fully owns."""
    owner = np.argmax(model.skin_weights, axis=1)
    pts = _part_vertices(model, vertices, part)
    if subdiv <= 1 or model.faces.size == 0:
        return pts
    faces = model.faces[np.all(owner[model.faces] == part, axis=1)]
    if len(faces) == 0:
        return pts
    w = _barycentric_grid(subdiv)
    tri = vertices[faces]  # (F, 3, 3)
    inner = np.einsum("sk,fkd->fsd", w, tri).reshape(-1, 3)
    return np.vstack([pts, inner])


def default_axes(model, beta=None, parts=None):
    """Axis attachment for every capsule part.

    Parts with exactly one child span the joint-to-child segment; other parts
    use the principal axis of their vertices through the vertex centroid.
    """
    beta = np.zeros(model.B) if beta is None else beta
    parts = np.arange(model.K) if parts is None else np.asarray(parts)
    V = model.shaped_vertices(beta)
    J = model.rest_joints(beta)
    child = np.full(len(parts), -1)
    offset = np.zeros((len(parts), 3))
    direction = np.zeros((len(parts), 3))
    for i, p in enumerate(parts):
        kids = np.nonzero(model.parents == p)[0]
        if len(kids) == 1:
            child[i] = kids[0]
            seg = J[kids[0]] - J[p]
            direction[i] = seg / np.linalg.norm(seg)
            continue
        pts = _part_vertices(model, V, p)
        centroid = pts.mean(axis=0)
        _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
        axis = vt[0]
        # deterministic orientation of the principal axis
        if axis[np.argmax(np.abs(axis))] < 0:
            axis = -axis
        offset[i] = centroid - J[p]
        direction[i] = axis
    return child, offset, direction


def _initial_dimensions(pts, center, d, child_len):
    rel = pts - center
    t = rel @ d
    radial = np.linalg.norm(rel - t[:, None] * d, axis=1)
    r0 = max(float(np.median(radial)), 1e-3)
    if child_len is not None:
        l0 = child_len
    else:
        l0 = max(float(t.max() - t.min()) - 2 * r0, 0.0)
    return r0, l0


def fit_one_capsule(pts, center, d, r0, l0, opts=None):
    """Fit radius and axis length of one capsule to a vertex cloud.

    Minimizes the mean squared distance from the vertices to the capsule
    surface plus the mean squared distance from capsule surface samples to
    the nearest vertex.
    """
    tree = cKDTree(pts)
    design = surface_design(r0, max(l0, 0.0))
    nv = len(pts)

    def residual(x):
        r, l = x
        if r <= 0 or l < 0:
            raise InfeasiblePoint("capsule radius must be > 0 and length >= 0")
        dv, dvr, dvl = capsule_distance(pts, center, d, r, l)
        sp, spr, spl = surface_points(center, d, r, l, design)
        _, nn = tree.query(sp)
        diff = sp - pts[nn]
        ds = np.linalg.norm(diff, axis=1)
        unit = diff / np.maximum(ds, 1e-15)[:, None]
        ns = len(sp)
        res = np.r_[dv / np.sqrt(nv), ds / np.sqrt(ns)]
        J = np.zeros((nv + ns, 2))
        J[:nv, 0] = dvr / np.sqrt(nv)
        J[:nv, 1] = dvl / np.sqrt(nv)
        J[nv:, 0] = np.einsum("md,md->m", unit, spr) / np.sqrt(ns)
        J[nv:, 1] = np.einsum("md,md->m", unit, spl) / np.sqrt(ns)
        return res, J

    problem = ResidualProblem([("dims", 2)]).add_term("distance", residual)
    scale = max(r0, l0, 1e-3)
    x, _ = solve_dogleg(problem, [r0, l0], opts or SolveOptions(
        max_iters=100, step_tol=1e-10, gradient_tol=1e-12, initial_radius=0.5 * scale))
    return float(x[0]), float(x[1])


def fit_capsules(model, beta, axes=None, init=None, parts=None):
    """Fit one capsule per part to the rest-pose surface of shape ``beta``.

    ``axes`` is a ``(child, offset, direction)`` triple as returned by
    :func:`default_axes`; ``init`` optional ``(radii, lengths)`` to start from.
    """
    beta = np.asarray(beta, dtype=np.float64)
    parts = np.arange(model.K) if parts is None else np.asarray(parts)
    child, offset, direction = axes if axes is not None else default_axes(model, beta, parts)
    template = CapsuleSet(parts, np.ones(len(parts)), np.zeros(len(parts)), child, offset, direction)
    V = model.shaped_vertices(beta)
    J = model.rest_joints(beta)
    centers, dirs = template.axes(J)
    radii = np.empty(len(parts))
    lengths = np.empty(len(parts))
    for i, p in enumerate(parts):
        pts = part_surface_points(model, V, p)
        if init is not None:
            r0, l0 = float(init[0][i]), float(max(init[1][i], 0.0))
        else:
            seg = np.linalg.norm(J[child[i]] - J[p]) if child[i] >= 0 else None
            r0, l0 = _initial_dimensions(pts, centers[i], dirs[i], seg)
        radii[i], lengths[i] = fit_one_capsule(pts, centers[i], dirs[i], r0, l0)
    return template.with_dimensions(radii, lengths)


# --- shape -> capsule regression ---------------------------------------------

def ridge_fit(X, Y, lam):
    """Ridge regression with an unpenalized intercept. Returns (W, b) with Y ~ X W^T + b."""
    xm = X.mean(axis=0)
    ym = Y.mean(axis=0)
    Xc = X - xm
    Yc = Y - ym
    A = Xc.T @ Xc + lam * np.eye(X.shape[1])
    W = np.linalg.solve(A, Xc.T @ Yc).T
    return W, ym - W @ xm


def kfold_indices(n, k=5):
    folds = np.array_split(np.arange(n), k)
    return [(np.setdiff1d(np.arange(n), f), f) for f in folds]


def cross_validate(X, Y, lam, k=5):
    """Held-out predictions for every sample under k-fold ridge regression."""
    pred = np.empty_like(Y)
    for train, test in kfold_indices(len(X), k):
        W, b = ridge_fit(X[train], Y[train], lam)
        pred[test] = X[test] @ W.T + b
    return pred


def _choose_lambda(X, Y, lambdas, k=5):
    best = None
    for lam in lambdas:
        err = float(np.mean((cross_validate(X, Y, lam, k) - Y) ** 2))
        if best is None or err < best[1]:
            best = (lam, err)
    return best[0]


def regression_errors(X, Y, lam, k=5):
    """Per-output held-out and in-fold mean absolute errors, and per-output mean targets."""
    held = np.abs(cross_validate(X, Y, lam, k) - Y).mean(axis=0)
    infold = np.zeros(Y.shape[1])
    for train, _ in kfold_indices(len(X), k):
        W, b = ridge_fit(X[train], Y[train], lam)
        infold += np.abs(X[train] @ W.T + b - Y[train]).mean(axis=0)
    infold /= k
    return held, infold, np.abs(Y).mean(axis=0)


def capsule_targets(caps_list):
    return np.array([np.r_[c.radii, c.lengths] for c in caps_list])


def train_capsule_regressor(model, beta_samples, ridge_lambdas=(1e-6, 1e-4, 1e-2, 1e-1, 1.0, 10.0),
                            axes=None, parts=None):
    """Fit capsules per shape sample, ridge-regress their dimensions on beta, iterate once.

    The second pass refits every sample's capsules starting from the first
    regressor's prediction and refits the regressor. Returns
    ``(regressor, mean_shape_capsules)``.
    """
    X = np.asarray(beta_samples, dtype=np.float64)
    if len(X) < 20:
        raise ValueError("need at least 20 shape samples")
    parts = np.arange(model.K) if parts is None else np.asarray(parts)
    axes = axes if axes is not None else default_axes(model, None, parts)
    caps = [fit_capsules(model, b, axes=axes, parts=parts) for b in X]
    Y = capsule_targets(caps)
    lam = _choose_lambda(X, Y, ridge_lambdas)
    W, b = ridge_fit(X, Y, lam)
    n = len(parts)
    caps = []
    for beta in X:
        pred = W @ beta + b
        caps.append(fit_capsules(model, beta, axes=axes, init=(pred[:n], pred[n:]), parts=parts))
    Y = capsule_targets(caps)
    lam = _choose_lambda(X, Y, ridge_lambdas)
    W, b = ridge_fit(X, Y, lam)
    held, infold, mean_target = regression_errors(X, Y, lam)
    reg = CapsuleRegressor(W, b, lam, {
        "heldout_mae": held.tolist(), "infold_mae": infold.tolist(), "mean_target": mean_target.tolist(),
    })
    mean_caps = CapsuleSet(parts, np.maximum(b[:n], 1e-4), np.maximum(b[n:], 0.0),
                           axes[0], axes[1], axes[2])
    return reg, mean_caps


# --- spheres and overlap --------------------------------------------------------

def sphere_layout(caps: CapsuleSet, radii, lengths, rest_joints):
    """Rest-pose sphere centers, radii per sphere and owning capsule index."""
    centers, dirs = caps.axes(rest_joints)
    pts, rad, cap_of = [], [], []
    for i in range(len(caps)):
        r, l = float(radii[i]), float(max(lengths[i], 0.0))
        n = int(math.ceil(l / r)) + 1 if l > 0 else 1
        ts = np.linspace(-0.5 * l, 0.5 * l, n) if n > 1 else np.zeros(1)
        pts.append(centers[i] + ts[:, None] * dirs[i])
        rad.append(np.full(n, r))
        cap_of.append(np.full(n, i))
    return np.vstack(pts), np.concatenate(rad), np.concatenate(cap_of)


def incompatible_part_pairs(model, caps, regressor=None, beta=None, cutoff=REST_OVERLAP_CUTOFF):
    """Capsule pairs that should not touch: not the same or adjacent parts, and apart at rest.

    Returns a sorted (E, 2) array of capsule-index pairs ``i < j``.
    """
    beta = np.zeros(model.B) if beta is None else beta
    radii, lengths = regressor.predict(beta) if regressor is not None else (caps.radii, caps.lengths)
    centers, rad, cap_of = sphere_layout(caps, radii, lengths, model.rest_joints(beta))
    sig2 = (rad / 3.0) ** 2
    out = []
    for i in range(len(caps)):
        for j in range(i + 1, len(caps)):
            pi, pj = caps.parts[i], caps.parts[j]
            if model.parents[pi] == pj or model.parents[pj] == pi:
                continue
            a = np.nonzero(cap_of == i)[0]
            b = np.nonzero(cap_of == j)[0]
            d2 = np.sum((centers[a, None] - centers[None, b]) ** 2, axis=-1)
            overlap = np.exp(-d2 / (sig2[a, None] + sig2[None, b]))
            if overlap.max() > cutoff:
                continue
            out.append((i, j))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


@dataclass
class CapsuleModel:
    """Everything needed to build sphere clouds for a body model."""

    capsules: CapsuleSet
    regressor: CapsuleRegressor
    pairs: np.ndarray

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)


class SphereRig:
    """Sphere decomposition frozen at one shape, posable by pose alone.

    Sphere positions, sizes and the rotation centers used to pose them are
    taken from ``beta``, so the overlap energy depends only on ``theta``.
    """

    def __init__(self, model, capsule_model: CapsuleModel, beta):
        self.model = model
        caps = capsule_model.capsules
        self.beta = np.array(beta, dtype=np.float64)
        self.rest_joints = model.rest_joints(self.beta)
        radii, lengths = capsule_model.regressor.predict(self.beta)
        radii = np.maximum(radii, 1e-4)
        lengths = np.maximum(lengths, 0.0)
        self.rest_centers, rad, self.capsule_of = sphere_layout(caps, radii, lengths, self.rest_joints)
        self.sigmas = rad / 3.0
        self.part_of = caps.parts[self.capsule_of]
        n_caps = len(caps)
        allowed = np.zeros((n_caps, n_caps), dtype=bool)
        if len(capsule_model.pairs):
            a, b = capsule_model.pairs.T
            allowed[a, b] = allowed[b, a] = True
        ci = self.capsule_of
        ii, jj = np.triu_indices(len(ci), 1)
        keep = allowed[ci[ii], ci[jj]]
        self.pairs = np.stack([ii[keep], jj[keep]], axis=1).astype(np.int64)
        self._sig2 = self.sigmas ** 2

    def cloud(self, theta, gamma=None):
        chain = self.model.chain(self.beta, theta)
        centers = chain.pose_points(self.rest_centers, self.part_of)
        if gamma is not None:
            centers = centers + gamma
        return SphereCloud(centers, self.sigmas.copy(), self.part_of.copy(), self.pairs, self.capsule_of)

    def residuals(self, theta, cutoff=None):
        """Overlap residuals (squares sum to the energy) and their theta-Jacobian.

        With ``cutoff`` only pairs with ``d^2 / (2 (s_i^2 + s_j^2)) < cutoff``
        are returned; each dropped pair contributes less than
        ``2 exp(-2 cutoff)`` to the energy. The number of residuals then
        depends on ``theta``.
        """
        chain = self.model.chain(self.beta, theta)
        centers = chain.pose_points(self.rest_centers, self.part_of)
        pairs = self.pairs
        if cutoff is not None and len(pairs):
            i, j = pairs[:, 0], pairs[:, 1]
            d2 = np.sum((centers[i] - centers[j]) ** 2, axis=1)
            pairs = pairs[d2 < 2.0 * cutoff * (self._sig2[i] + self._sig2[j])]
        jac = chain.point_jacobian(centers, self.part_of)
        r, J = kernels.overlap_residuals(centers, self._sig2, pairs, jac)
        r *= math.sqrt(2.0)
        J *= math.sqrt(2.0)
        return r, J


def spheres_from_capsules(caps, regressor, beta, theta, model, pairs=None, gamma=None):
    """Posed sphere cloud for shape ``beta`` and pose ``theta``.

    ``pairs`` are incompatible capsule pairs; by default they are derived
    with :func:`incompatible_part_pairs`.
    """
    if pairs is None:
        pairs = incompatible_part_pairs(model, caps, regressor)
    rig = SphereRig(model, CapsuleModel(caps, regressor, pairs), beta)
    return rig.cloud(theta, gamma)


def interpenetration_energy(cloud: SphereCloud):
    """Sum over ordered incompatible sphere pairs of ``exp(-d^2 / (s_i^2 + s_j^2))``."""
    if len(cloud.pairs) == 0:
        return 0.0
    i, j = cloud.pairs[:, 0], cloud.pairs[:, 1]
    d2 = np.sum((cloud.centers[i] - cloud.centers[j]) ** 2, axis=1)
    s = cloud.sigmas[i] ** 2 + cloud.sigmas[j] ** 2
    return float(2.0 * np.sum(np.exp(-d2 / s)))
