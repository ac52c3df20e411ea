"""Pure numpy implementations of the hot kernels.

The compiled module ``bodyfit._kernels`` exposes the same functions with the
same signatures; ``bodyfit.kernels`` picks one at import time.
"""
import numpy as np

SMALL_ANGLE = 1e-8


def skew(v):
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    o = np.zeros_like(x)
    return np.stack(
        [np.stack([o, -z, y], -1), np.stack([z, o, -x], -1), np.stack([-y, x, o], -1)],
        -2,
    )


_E = np.eye(3)
_SKEW_E = skew(_E)  # [e_i]x for i = 0, 1, 2


def rodrigues_batch(v):
    """Rotation matrices and their derivatives for a batch of axis-angle vectors.

    Returns ``R`` of shape (K, 3, 3) and ``dR`` of shape (K, 3, 3, 3) with
    ``dR[k, i] = dR_k / dv_{k,i}``.
    """
    v = np.ascontiguousarray(v, dtype=np.float64).reshape(-1, 3)
    n = v.shape[0]
    R = np.empty((n, 3, 3))
    dR = np.empty((n, 3, 3, 3))
    for k in range(n):
        R[k], dR[k] = _rodrigues_one(v[k])
    return R, dR


def _rodrigues_one(v):
    theta2 = float(v @ v)
    theta = np.sqrt(theta2)
    K = skew(v)
    if theta < SMALL_ANGLE:
        R = _E + K + 0.5 * (K @ K)
        dR = np.empty((3, 3, 3))
        for i in range(3):
            Ei = _SKEW_E[i]
            dR[i] = Ei + 0.5 * (Ei @ K + K @ Ei)
        return R, dR
    s = np.sin(theta)
    c = np.cos(theta)
    R = _E + (s / theta) * K + ((1.0 - c) / theta2) * (K @ K)
    ImR = _E - R
    dR = np.empty((3, 3, 3))
    for i in range(3):
        w = np.cross(v, ImR[:, i])
        dR[i] = ((v[i] * K + skew(w)) / theta2) @ R
    return R, dR


def forward_chain(parents, R_local, joints):
    """World transforms of a kinematic tree.

    Part ``k`` rotates by ``R_local[k]`` about its rest joint ``joints[k]`` and
    inherits its parent's transform. Returns rotations (K, 3, 3) and
    translations (K, 3) mapping rest-pose points to posed points.
    """
    K = len(parents)
    Rw = np.empty((K, 3, 3))
    tw = np.empty((K, 3))
    for k in range(K):
        Rk = R_local[k]
        tk = joints[k] - Rk @ joints[k]
        p = parents[k]
        if p < 0:
            Rw[k] = Rk
            tw[k] = tk
        else:
            Rw[k] = Rw[p] @ Rk
            tw[k] = Rw[p] @ tk + tw[p]
    return Rw, tw


def point_jacobian(points, part_of, ancestors, parents, Rw, tw, R_local, dR, joints):
    """Derivative of posed points with respect to every pose component.

    ``points`` are posed world positions (M, 3); ``part_of`` the owning part of
    each; ``ancestors`` a (K, K) boolean table, ``ancestors[p, k]`` true when
    part ``k`` is ``p`` or one of its ancestors. Returns (M, 3, 3K).
    """
    M = points.shape[0]
    K = len(parents)
    out = np.zeros((M, 3, 3 * K))
    affected = ancestors[part_of]
    for k in range(K):
        sel = np.nonzero(affected[:, k])[0]
        if sel.size == 0:
            continue
        p = parents[k]
        if p < 0:
            AR = _E
            At = np.zeros(3)
        else:
            AR = Rw[p]
            At = tw[p]
        w = (points[sel] - At) @ AR - joints[k]
        u = w @ R_local[k]
        for i in range(3):
            out[sel, :, 3 * k + i] = u @ (AR @ dR[k, i]).T
    return out


def overlap_residuals(centers, sigma2, pairs, jac):
    """Gaussian-overlap residuals for sphere pairs and their Jacobian.

    For pair ``e = (i, j)`` the residual is ``exp(-d^2 / (2 s))`` with ``d`` the
    center distance and ``s = sigma2[i] + sigma2[j]``, so its square is the
    Gaussian-product overlap. ``jac`` is the (Q, 3, P) derivative of the
    centers. Returns residuals (E,) and their Jacobian (E, P).
    """
    i = pairs[:, 0]
    j = pairs[:, 1]
    diff = centers[i] - centers[j]
    s = sigma2[i] + sigma2[j]
    d2 = np.einsum("ec,ec->e", diff, diff)
    r = np.exp(-0.5 * d2 / s)
    coef = (-r / s)[:, None] * diff
    J = np.einsum("ec,ecp->ep", coef, jac[i] - jac[j])
    return r, J
