"""Axis-angle rotations and kinematic-tree transforms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import MalformedTree


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def rodrigues(axis_angle, jacobian=False):
    """Rotation matrix for an axis-angle vector.

    With ``jacobian=True`` also returns d R / d axis_angle as (3, 3, 3),
    indexed ``[component, row, col]``.
    """
    R, dR = kernels.rodrigues_batch(np.asarray(axis_angle, dtype=np.float64).reshape(1, 3))
    if jacobian:
        return R[0], dR[0]
    return R[0]


def validate_parents(parents):
    """Check that ``parents`` encodes a tree rooted at 0 with parents before children."""
    parents = np.asarray(parents)
    if parents.ndim != 1 or len(parents) == 0:
        raise MalformedTree("parent array must be a non-empty 1-D array")
    if parents[0] >= 0:
        raise MalformedTree("part 0 must be the root (parent < 0)")
    for k in range(1, len(parents)):
        if not 0 <= parents[k] < k:
            raise MalformedTree(f"parent[{k}] = {parents[k]} must lie in [0, {k})")
    return parents.astype(np.int64)


def ancestor_table(parents):
    """(K, K) bool table; ``[p, k]`` is true if ``k`` is ``p`` or an ancestor of ``p``."""
    parents = validate_parents(parents)
    K = len(parents)
    table = np.zeros((K, K), dtype=bool)
    for p in range(K):
        table[p, p] = True
        if parents[p] >= 0:
            table[p] |= table[parents[p]]
    return table


def descendants(parents, k):
    """Indices of ``k`` and every part below it."""
    return np.nonzero(ancestor_table(parents)[:, k])[0]


class Chain:
    """Posed kinematic tree: world transforms plus what the Jacobians need.

    Built from a parent array, rest joint locations (K, 3) and a pose vector
    of length 3K. ``rotations``/``translations`` map rest-pose points to posed
    points, before any global translation.
    """

    def __init__(self, parents, rest_joints, theta, ancestors=None):
        self.parents = validate_parents(parents)
        K = len(self.parents)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (3 * K,):
            raise MalformedTree(f"pose vector must have length {3 * K}, got {theta.shape}")
        self.rest_joints = np.ascontiguousarray(rest_joints, dtype=np.float64)
        self.ancestors = ancestor_table(self.parents) if ancestors is None else ancestors
        self.R_local, self.dR_local = kernels.rodrigues_batch(theta.reshape(K, 3))
        self.rotations, self.translations = kernels.forward_chain(
            self.parents, self.R_local, self.rest_joints
        )

    def __len__(self):
        return len(self.parents)

    def transform(self, k) -> RigidTransform:
        return RigidTransform(self.rotations[k], self.translations[k])

    def pose_points(self, points, part_of):
        """Rigidly carry rest-pose ``points`` with their owning parts."""
        points = np.asarray(points, dtype=np.float64)
        R = self.rotations[part_of]
        return np.einsum("mij,mj->mi", R, points) + self.translations[part_of]

    def posed_joints(self):
        # joint k rotates with its parent; its own rotation leaves it fixed
        return self.pose_points(self.rest_joints, np.arange(len(self)))

    def point_jacobian(self, posed_points, part_of):
        """d posed_point / d theta, shape (M, 3, 3K)."""
        return kernels.point_jacobian(
            np.ascontiguousarray(posed_points, dtype=np.float64),
            np.ascontiguousarray(part_of, dtype=np.int64),
            self.ancestors,
            self.parents,
            self.rotations,
            self.translations,
            self.R_local,
            self.dR_local,
            self.rest_joints,
        )


def chain_transforms(model, beta, theta):
    """World rigid transform of every part for shape ``beta`` and pose ``theta``."""
    chain = Chain(model.parents, model.rest_joints(beta), theta, model.ancestors)
    return [chain.transform(k) for k in range(len(chain))]
