"""Parametric skinned body model: shape blendshapes, joint regression, posing and skinning."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, InvariantViolation
from .kinematics import Chain, ancestor_table

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class AnglePriorTerm:
    """One monitored bending component: ``sign * theta[3 * joint + axis]``."""

    joint: int
    axis: int
    sign: float


@dataclass
class BodyModel:
    """Immutable skinned body model.

    ``joint_regressor`` is a (K, N) scipy sparse matrix. ``detection_map`` maps
    detector joint names to model joint names; ``roles`` names special joints
    (``left_shoulder``, ``right_shoulder``, ``left_hip``, ``right_hip``) and
    ``joint_sets`` holds named subsets used by the synthetic experiments.
    """

    template_vertices: np.ndarray
    shape_dirs: np.ndarray
    joint_regressor: sp.csr_matrix
    parents: np.ndarray
    skin_weights: np.ndarray
    joint_names: list
    faces: np.ndarray
    pose_dirs: np.ndarray | None = None
    angle_prior_terms: list = field(default_factory=list)
    detection_map: dict = field(default_factory=dict)
    roles: dict = field(default_factory=dict)
    joint_sets: dict = field(default_factory=dict)

    def __post_init__(self):
        self.template_vertices = np.ascontiguousarray(self.template_vertices, dtype=np.float64)
        self.shape_dirs = np.ascontiguousarray(self.shape_dirs, dtype=np.float64)
        self.joint_regressor = sp.csr_matrix(self.joint_regressor, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.skin_weights = np.ascontiguousarray(self.skin_weights, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.joint_names = [str(n) for n in self.joint_names]
        if self.pose_dirs is not None:
            self.pose_dirs = np.ascontiguousarray(self.pose_dirs, dtype=np.float64)
        violations = self.validate()
        if violations:
            raise InvariantViolation(violations)
        self.ancestors = ancestor_table(self.parents)
        # joints are affine in beta: J(beta) = J0 + Jdirs . beta
        self._joint_template = np.asarray(self.joint_regressor @ self.template_vertices)
        N, _, B = self.shape_dirs.shape
        self._joint_dirs = np.asarray(
            self.joint_regressor @ self.shape_dirs.reshape(N, 3 * B)
        ).reshape(self.K, 3, B)
        self._joint_index = {n: i for i, n in enumerate(self.joint_names)}
        for arr in (self.template_vertices, self.shape_dirs, self.skin_weights, self.faces):
            arr.setflags(write=False)

    @property
    def N(self):
        return self.template_vertices.shape[0]

    @property
    def K(self):
        return len(self.parents)

    @property
    def B(self):
        return self.shape_dirs.shape[2]

    @property
    def n_pose(self):
        return 3 * self.K

    def joint_index(self, name):
        return self._joint_index[name]

    def role_index(self, role):
        return self._joint_index[self.roles.get(role, role)]

    def validate(self):
        """Every violated invariant as ``(field_path, message)``; empty when valid."""
        out = []
        V = self.template_vertices
        if V.ndim != 2 or V.shape[1] != 3:
            return [("template_vertices", f"expected (N, 3), got {V.shape}")]
        N = V.shape[0]
        K = len(self.parents)
        if self.shape_dirs.ndim != 3 or self.shape_dirs.shape[:2] != (N, 3):
            out.append(("shape_dirs", f"expected (N={N}, 3, B), got {self.shape_dirs.shape}"))
        if self.pose_dirs is not None and self.pose_dirs.shape != (N, 3, 9 * (K - 1)):
            out.append(("pose_dirs", f"expected ({N}, 3, {9 * (K - 1)}), got {self.pose_dirs.shape}"))
        if not np.all(np.isfinite(V)):
            out.append(("template_vertices", "non-finite entries"))
        if K == 0 or self.parents[0] >= 0:
            out.append(("parents[0]", "part 0 must be the root"))
        for k in range(1, K):
            if not 0 <= self.parents[k] < k:
                out.append((f"parents[{k}]", f"parent {self.parents[k]} not in [0, {k})"))
        if len(self.joint_names) != K:
            out.append(("joint_names", f"expected {K} names, got {len(self.joint_names)}"))
        elif len(set(self.joint_names)) != K:
            out.append(("joint_names", "names are not unique"))
        Jr = self.joint_regressor
        if Jr.shape != (K, N):
            out.append(("joint_regressor", f"expected ({K}, {N}), got {Jr.shape}"))
        else:
            if Jr.nnz and Jr.data.min() < 0:
                out.append(("joint_regressor", "negative entries"))
            sums = np.asarray(Jr.sum(axis=1)).ravel()
            nnz = np.diff(Jr.indptr)
            for k in range(K):
                if nnz[k] == 0:
                    out.append((f"joint_regressor[{k}]", "row has no nonzero entry"))
                elif abs(sums[k] - 1.0) > ROW_SUM_TOL:
                    out.append((f"joint_regressor[{k}]", f"row sums to {sums[k]:.6g}, expected 1"))
        W = self.skin_weights
        if W.shape != (N, K):
            out.append(("skin_weights", f"expected ({N}, {K}), got {W.shape}"))
        else:
            neg = np.nonzero((W < 0).any(axis=1))[0]
            for n in neg[:20]:
                out.append((f"skin_weights[{n}]", "negative weight"))
            bad = np.nonzero(np.abs(W.sum(axis=1) - 1.0) > ROW_SUM_TOL)[0]
            for n in bad[:20]:
                out.append((f"skin_weights[{n}]", f"row sums to {W[n].sum():.6g}, expected 1"))
            if len(bad) > 20:
                out.append(("skin_weights", f"{len(bad) - 20} more rows do not sum to 1"))
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= N):
            out.append(("faces", f"indices must lie in [0, {N})"))
        for i, t in enumerate(self.angle_prior_terms):
            if not (0 <= t.joint < K and 0 <= t.axis < 3 and t.sign in (-1.0, 1.0)):
                out.append((f"angle_prior[{i}]", f"invalid term {t}"))
        names = set(self.joint_names)
        for det, jn in self.detection_map.items():
            if jn not in names:
                out.append((f"detection_map[{det}]", f"unknown model joint {jn!r}"))
        for role, jn in self.roles.items():
            if jn not in names:
                out.append((f"roles[{role}]", f"unknown model joint {jn!r}"))
        for set_name, members in self.joint_sets.items():
            for jn in members:
                if jn not in names:
                    out.append((f"joint_sets[{set_name}]", f"unknown model joint {jn!r}"))
        return out

    def _check_beta(self, beta):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (self.B,):
            raise DimensionMismatch(f"beta must have length {self.B}, got {beta.shape}")
        return beta

    def shaped_vertices(self, beta):
        beta = self._check_beta(beta)
        return self.template_vertices + self.shape_dirs @ beta

    def rest_joints(self, beta):
        beta = self._check_beta(beta)
        return self._joint_template + self._joint_dirs @ beta

    def joint_shape_dirs(self):
        """(K, 3, B) derivative of the rest joints with respect to beta."""
        return self._joint_dirs

    def chain(self, beta, theta):
        return Chain(self.parents, self.rest_joints(beta), theta, self.ancestors)


@dataclass(frozen=True)
class FitParams:
    beta: np.ndarray
    theta: np.ndarray
    gamma: np.ndarray

    @classmethod
    def zeros(cls, model):
        return cls(np.zeros(model.B), np.zeros(model.n_pose), np.zeros(3))

    @classmethod
    def from_vector(cls, x, model):
        x = np.asarray(x, dtype=np.float64)
        B, P = model.B, model.n_pose
        return cls(x[:B].copy(), x[B : B + P].copy(), x[B + P : B + P + 3].copy())

    def to_vector(self):
        return np.concatenate([self.beta, self.theta, self.gamma]).astype(np.float64)

    def replace(self, **kw):
        d = {"beta": self.beta, "theta": self.theta, "gamma": self.gamma}
        d.update(kw)
        return FitParams(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})

    def check(self, model):
        problems = []
        if self.beta.shape != (model.B,):
            problems.append("beta length")
        if self.theta.shape != (model.n_pose,):
            problems.append("theta length")
        if self.gamma.shape != (3,):
            problems.append("gamma length")
        if problems:
            raise DimensionMismatch(", ".join(problems))
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("non-finite parameters")
        if np.any(np.linalg.norm(self.theta.reshape(-1, 3), axis=1) >= 2 * np.pi):
            raise ValueError("axis-angle norm must be < 2*pi")


@dataclass(frozen=True)
class MeshSurface:
    vertices: np.ndarray
    faces: np.ndarray


def shaped_vertices(model: BodyModel, beta):
    return model.shaped_vertices(beta)


def rest_joints(model: BodyModel, beta):
    return model.rest_joints(beta)


def posed_joints(model: BodyModel, params: FitParams, jacobian=False):
    """Posed 3D joints (K, 3) in the camera frame.

    With ``jacobian=True`` also returns the derivative with respect to the
    stacked parameter vector ``[beta, theta, gamma]``, shape (K, 3, B+3K+3).
    """
    chain = model.chain(params.beta, params.theta)
    joints = chain.posed_joints()
    out = joints + params.gamma
    if not jacobian:
        return out
    return out, _posed_joint_jacobian(model, chain, joints)


def _posed_joint_jacobian(model, chain, joints):
    K, B = model.K, model.B
    J = np.zeros((K, 3, B + 3 * K + 3))
    S = model.joint_shape_dirs()
    dbeta = J[:, :, :B]
    dbeta[0] = S[0]
    Rw = chain.rotations
    for k in range(1, K):
        p = model.parents[k]
        dbeta[k] = dbeta[p] + Rw[p] @ (S[k] - S[p])
    J[:, :, B : B + 3 * K] = chain.point_jacobian(joints, np.arange(K))
    J[:, :, B + 3 * K :] = np.eye(3)
    return J


def pose_feature(R_local):
    """Pose-blendshape driver: flattened (R_k - I) for every non-root part."""
    return (R_local[1:] - np.eye(3)).reshape(-1)


def skinned_surface(model: BodyModel, params: FitParams) -> MeshSurface:
    """Linear blend skinning of the shaped (and pose-corrected) template."""
    chain = model.chain(params.beta, params.theta)
    v = model.shaped_vertices(params.beta)
    if model.pose_dirs is not None:
        v = v + model.pose_dirs @ pose_feature(chain.R_local)
    W = model.skin_weights
    R = np.einsum("nk,kij->nij", W, chain.rotations)
    t = W @ chain.translations
    verts = np.einsum("nij,nj->ni", R, v) + t + params.gamma
    return MeshSurface(verts, model.faces)
