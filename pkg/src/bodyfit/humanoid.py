"""Deterministic low-resolution humanoid used for tests and synthetic experiments.

The body is a set of tapered tubes, one per part, in a T-pose with y up,
x toward the body's left and z forward. Shape modes are exact linear
displacements of tube endpoints and radii, so the blendshapes are linear by
construction. Joints are regressed from the tube cross-section rings.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .assets import ModelAssets
from .capsules import (CapsuleModel, CapsuleSet, _frame, incompatible_part_pairs,
                       train_capsule_regressor)
from .model import AnglePriorTerm, BodyModel
from .priors import ShapePriorMatrix, fit_gmm

JOINT_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine", "l_knee", "r_knee", "chest", "l_ankle",
    "r_ankle", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
]
PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 6, 6, 10, 11, 12, 13]

# joints 0-15 followed by tube end points
POINTS = np.array([
    [0.0, 0.0, 0.0], [0.09, -0.06, 0.0], [-0.09, -0.06, 0.0], [0.0, 0.10, 0.0],
    [0.09, -0.48, 0.0], [-0.09, -0.48, 0.0], [0.0, 0.34, 0.0], [0.09, -0.88, 0.0],
    [-0.09, -0.88, 0.0], [0.0, 0.56, 0.0], [0.17, 0.50, 0.0], [-0.17, 0.50, 0.0],
    [0.44, 0.50, 0.0], [-0.44, 0.50, 0.0], [0.69, 0.50, 0.0], [-0.69, 0.50, 0.0],
    [0.0, -0.10, 0.0],    # 16 pelvis bottom
    [0.0, 0.84, 0.0],     # 17 head top
    [0.86, 0.50, 0.0],    # 18 left hand tip
    [-0.86, 0.50, 0.0],   # 19 right hand tip
    [0.09, -0.95, 0.14],  # 20 left toe
    [-0.09, -0.95, 0.14],  # 21 right toe
])

# part: (start point, end point, start radius, end radius)
TUBES = [
    (16, 3, 0.15, 0.14), (1, 4, 0.075, 0.05), (2, 5, 0.075, 0.05), (3, 6, 0.14, 0.15),
    (4, 7, 0.05, 0.038), (5, 8, 0.05, 0.038), (6, 9, 0.16, 0.12), (7, 20, 0.035, 0.03),
    (8, 21, 0.035, 0.03), (9, 17, 0.07, 0.09), (10, 12, 0.045, 0.04), (11, 13, 0.045, 0.04),
    (12, 14, 0.038, 0.03), (13, 15, 0.038, 0.03), (14, 18, 0.03, 0.025), (15, 19, 0.03, 0.025),
]

# torso tubes are elliptical: depth (z) semi-axis relative to the width (x) semi-axis
DEPTH_RATIO = {0: 0.65, 3: 0.65, 6: 0.65}
# capsule attachment: explicit child for limb segments, the rest run along their
# tube through its midpoint
CAPSULE_CHILD = {1: 4, 2: 5, 4: 7, 5: 8, 10: 12, 11: 13, 12: 14, 13: 15}

DETECTION_MAP = {
    "right_ankle": "r_ankle", "right_knee": "r_knee", "right_hip": "r_hip",
    "left_hip": "l_hip", "left_knee": "l_knee", "left_ankle": "l_ankle",
    "right_wrist": "r_wrist", "right_elbow": "r_elbow", "right_shoulder": "r_shoulder",
    "left_shoulder": "l_shoulder", "left_elbow": "l_elbow", "left_wrist": "l_wrist",
    "neck": "neck",
}
ROLES = {"left_shoulder": "l_shoulder", "right_shoulder": "r_shoulder",
         "left_hip": "l_hip", "right_hip": "r_hip"}
JOINT_SETS = {
    "all": list(JOINT_NAMES),
    "limbs12": ["l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
                "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle"],
    "torso4": ["l_shoulder", "r_shoulder", "l_hip", "r_hip"],
}
# knees flex about +x, elbows about -y (left) / +y (right) in the rest frame
ANGLE_PRIOR = [AnglePriorTerm(4, 0, -1.0), AnglePriorTerm(5, 0, -1.0),
               AnglePriorTerm(12, 1, 1.0), AnglePriorTerm(13, 1, -1.0)]

_LEFT_ARM = [10, 12, 14, 18]
_RIGHT_ARM = [11, 13, 15, 19]
_LEFT_LEG = [1, 4, 7, 20]
_RIGHT_LEG = [2, 5, 8, 21]


def shape_modes():
    """Ten shape modes as (point displacement (22, 3), radius scale deltas (16, 2))."""
    modes = []
    r = np.array([[t[2], t[3]] for t in TUBES])

    def mode():
        return np.zeros_like(POINTS), np.zeros((len(TUBES), 2))

    dP, dR = mode()  # overall size
    dP[:] = 0.06 * POINTS
    dR[:] = 0.03 * r
    modes.append((dP, dR))
    dP, dR = mode()  # girth
    dR[:] = 0.15 * r
    modes.append((dP, dR))
    dP, dR = mode()  # leg length
    for side in (_LEFT_LEG, _RIGHT_LEG):
        dP[side[1], 1] = -0.025
        dP[side[2], 1] = -0.05
        dP[side[3], 1] = -0.05
    modes.append((dP, dR))
    dP, dR = mode()  # arm length
    for side, s in ((_LEFT_ARM, 1.0), (_RIGHT_ARM, -1.0)):
        dP[side[1], 0] = 0.02 * s
        dP[side[2], 0] = 0.04 * s
        dP[side[3], 0] = 0.05 * s
    modes.append((dP, dR))
    dP, dR = mode()  # shoulder width
    for side, s in ((_LEFT_ARM, 1.0), (_RIGHT_ARM, -1.0)):
        dP[side, 0] = 0.02 * s
    modes.append((dP, dR))
    dP, dR = mode()  # hip width
    for side, s in ((_LEFT_LEG, 1.0), (_RIGHT_LEG, -1.0)):
        dP[side, 0] = 0.018 * s
    dR[0] += 0.1 * r[0]
    modes.append((dP, dR))
    dP, dR = mode()  # torso length
    dP[3, 1] = 0.01
    dP[6, 1] = 0.025
    dP[9, 1] = 0.045
    dP[17, 1] = 0.045
    dP[_LEFT_ARM + _RIGHT_ARM, 1] = 0.04
    modes.append((dP, dR))
    dP, dR = mode()  # belly
    dR[[0, 3, 6]] = 0.2 * r[[0, 3, 6]]
    modes.append((dP, dR))
    dP, dR = mode()  # neck length
    dP[9, 1] = 0.02
    dP[17, 1] = 0.045
    modes.append((dP, dR))
    dP, dR = mode()  # lumbar proportion
    dP[3, 1] = 0.02
    modes.append((dP, dR))
    return modes


def _ring_layout(n_vertices, segs):
    n_parts = len(TUBES)
    n_rings = (n_vertices - 2 * n_parts)
    if n_rings % segs:
        raise ValueError(f"n_vertices - {2 * n_parts} must be divisible by segs={segs}")
    n_rings //= segs
    if n_rings < 2 * n_parts:
        raise ValueError("too few vertices for two rings per part")
    lengths = np.array([np.linalg.norm(POINTS[b] - POINTS[a]) for a, b, _, _ in TUBES])
    extra = n_rings - 2 * n_parts
    share = extra * lengths / lengths.sum()
    rings = 2 + np.floor(share).astype(int)
    remainder = extra - (rings - 2).sum()
    order = np.argsort(-(share - np.floor(share)), kind="stable")
    rings[order[:remainder]] += 1
    return rings


class _TubeMesh:
    """Vertex layout of the tube body; positions are linear in (points, radii)."""

    def __init__(self, n_vertices, segs):
        self.segs = segs
        self.rings = _ring_layout(n_vertices, segs)
        self.frames = []
        for k, (a, b, _, _) in enumerate(TUBES):
            d = POINTS[b] - POINTS[a]
            d = d / np.linalg.norm(d)
            if k in DEPTH_RATIO:
                e1 = np.array([1.0, 0.0, 0.0])
                e1 = e1 - (e1 @ d) * d
                e1 /= np.linalg.norm(e1)
                e2 = np.cross(d, e1) * DEPTH_RATIO[k]
            else:
                e1, e2 = _frame(d)
            self.frames.append((d, e1, e2))
        self.phi = 2 * math.pi * np.arange(segs) / segs
        self.offsets = np.cumsum([0] + [n * segs + 2 for n in self.rings])

    @property
    def n_vertices(self):
        return int(self.offsets[-1])

    def vertices(self, points, radii):
        out = np.empty((self.n_vertices, 3))
        for k, (a, b, _, _) in enumerate(TUBES):
            d, e1, e2 = self.frames[k]
            pa, pb = points[a], points[b]
            r0, r1 = radii[k]
            t = np.linspace(0.0, 1.0, self.rings[k])
            rad = r0 + t * (r1 - r0)
            circle = np.cos(self.phi)[:, None] * e1 + np.sin(self.phi)[:, None] * e2
            ring = (pa + t[:, None] * (pb - pa))[:, None, :] + rad[:, None, None] * circle[None]
            o = self.offsets[k]
            n = self.rings[k] * self.segs
            out[o : o + n] = ring.reshape(-1, 3)
            out[o + n] = pa - 0.5 * r0 * d
            out[o + n + 1] = pb + 0.5 * r1 * d
        return out

    def faces(self):
        F = []
        S = self.segs
        for k in range(len(TUBES)):
            o = self.offsets[k]
            R = self.rings[k]
            for i in range(R - 1):
                for j in range(S):
                    a = o + i * S + j
                    b = o + i * S + (j + 1) % S
                    c = o + (i + 1) * S + (j + 1) % S
                    d = o + (i + 1) * S + j
                    F += [(a, b, c), (a, c, d)]
            cap0 = o + R * S
            cap1 = cap0 + 1
            for j in range(S):
                F.append((cap0, o + (j + 1) % S, o + j))
                last = o + (R - 1) * S
                F.append((cap1, last + j, last + (j + 1) % S))
        return np.array(F, dtype=np.int64)

    def owner(self):
        own = np.empty(self.n_vertices, dtype=np.int64)
        for k in range(len(TUBES)):
            own[self.offsets[k] : self.offsets[k + 1]] = k
        return own

    def axial(self):
        """Axial fraction of every vertex along its tube."""
        t_all = np.empty(self.n_vertices)
        for k in range(len(TUBES)):
            o = self.offsets[k]
            n = self.rings[k] * self.segs
            t = np.repeat(np.linspace(0.0, 1.0, self.rings[k]), self.segs)
            t_all[o : o + n] = t
            t_all[o + n] = 0.0
            t_all[o + n + 1] = 1.0
        return t_all

    def joint_regressor(self):
        rows, cols, vals = [], [], []
        for k in range(len(TUBES)):
            a, b, _, _ = TUBES[k]
            seg = POINTS[b] - POINTS[a]
            t = float((POINTS[k] - POINTS[a]) @ seg / (seg @ seg))
            R = self.rings[k]
            x = t * (R - 1)
            i0 = min(int(math.floor(x)), R - 2)
            f = x - i0
            for i, w in ((i0, 1.0 - f), (i0 + 1, f)):
                if w <= 0:
                    continue
                start = self.offsets[k] + i * self.segs
                for j in range(self.segs):
                    rows.append(k)
                    cols.append(start + j)
                    vals.append(w / self.segs)
        return sp.csr_matrix((vals, (rows, cols)), shape=(len(TUBES), self.n_vertices))

    def skin_weights(self, blend=0.3, max_parent=0.4):
        K = len(TUBES)
        W = np.zeros((self.n_vertices, K))
        own = self.owner()
        t = self.axial()
        for v in range(self.n_vertices):
            k = own[v]
            p = PARENTS[k]
            wp = max_parent * max(0.0, 1.0 - t[v] / blend) if p >= 0 else 0.0
            W[v, k] = 1.0 - wp
            if wp > 0:
                W[v, p] = wp
        return W


def build_body_model(n_vertices=600, segs=8):
    mesh = _TubeMesh(n_vertices, segs)
    radii = np.array([[t[2], t[3]] for t in TUBES])
    template = mesh.vertices(POINTS, radii)
    dirs = []
    for dP, dR in shape_modes():
        dirs.append(mesh.vertices(POINTS + dP, radii + dR) - template)
    shape_dirs = np.stack(dirs, axis=2)
    return BodyModel(
        template_vertices=template,
        shape_dirs=shape_dirs,
        joint_regressor=mesh.joint_regressor(),
        parents=PARENTS,
        skin_weights=mesh.skin_weights(),
        joint_names=JOINT_NAMES,
        faces=mesh.faces(),
        angle_prior_terms=list(ANGLE_PRIOR),
        detection_map=dict(DETECTION_MAP),
        roles=dict(ROLES),
        joint_sets={k: list(v) for k, v in JOINT_SETS.items()},
    )


def capsule_axes(model):
    """Manual capsule attachment matching the tube layout."""
    K = model.K
    J = model.rest_joints(np.zeros(model.B))
    child = np.full(K, -1)
    offset = np.zeros((K, 3))
    direction = np.zeros((K, 3))
    for k, (a, b, _, _) in enumerate(TUBES):
        d = POINTS[b] - POINTS[a]
        direction[k] = d / np.linalg.norm(d)
        if k in CAPSULE_CHILD:
            child[k] = CAPSULE_CHILD[k]
            c = CAPSULE_CHILD[k]
            # center on the tube midpoint, relative to the joint midpoint
            offset[k] = 0.5 * (POINTS[a] + POINTS[b]) - 0.5 * (J[k] + J[c])
        else:
            offset[k] = 0.5 * (POINTS[a] + POINTS[b]) - J[k]
    return child, offset, direction


# --- pose corpus ----------------------------------------------------------------

def _pose(**parts):
    theta = np.zeros((len(JOINT_NAMES), 3))
    for name, v in parts.items():
        theta[JOINT_NAMES.index(name)] = v
    return theta[1:].ravel()


POSE_MODES = {
    "stand": _pose(l_shoulder=(0, 0, -1.25), r_shoulder=(0, 0, 1.25), l_elbow=(0, -0.2, 0),
                   r_elbow=(0, 0.2, 0), l_knee=(0.05, 0, 0), r_knee=(0.05, 0, 0)),
    "walk_left": _pose(l_hip=(-0.4, 0, 0), l_knee=(0.3, 0, 0), r_hip=(0.25, 0, 0), r_knee=(0.5, 0, 0),
                       l_shoulder=(0, 0.3, -1.2), r_shoulder=(0, 0.3, 1.2),
                       l_elbow=(0, -0.3, 0), r_elbow=(0, 0.3, 0)),
    "walk_right": _pose(r_hip=(-0.4, 0, 0), r_knee=(0.3, 0, 0), l_hip=(0.25, 0, 0), l_knee=(0.5, 0, 0),
                        l_shoulder=(0, -0.3, -1.2), r_shoulder=(0, -0.3, 1.2),
                        l_elbow=(0, -0.3, 0), r_elbow=(0, 0.3, 0)),
    "arms_up": _pose(l_shoulder=(0, 0, 1.1), r_shoulder=(0, 0, -1.1), l_elbow=(0, -0.3, 0),
                     r_elbow=(0, 0.3, 0), spine=(-0.1, 0, 0)),
    "reach": _pose(l_shoulder=(0, -1.3, -0.3), r_shoulder=(0, 1.3, 0.3), l_elbow=(0, -0.2, 0),
                   r_elbow=(0, 0.2, 0), spine=(0.25, 0, 0), chest=(0.1, 0, 0)),
    "box": _pose(l_shoulder=(0, -0.9, -0.9), r_shoulder=(0, 0.9, 0.9), l_elbow=(0, -1.8, 0),
                 r_elbow=(0, 1.8, 0), l_hip=(-0.2, 0, 0), r_hip=(-0.2, 0, 0),
                 l_knee=(0.3, 0, 0), r_knee=(0.3, 0, 0)),
    "crouch": _pose(l_hip=(-1.4, 0, 0), r_hip=(-1.4, 0, 0), l_knee=(1.6, 0, 0), r_knee=(1.6, 0, 0),
                    spine=(0.3, 0, 0), l_shoulder=(0, -1.0, -0.5), r_shoulder=(0, 1.0, 0.5),
                    l_elbow=(0, -0.4, 0), r_elbow=(0, 0.4, 0)),
    "wave": _pose(l_shoulder=(0, 0, 0.6), l_elbow=(0, -1.3, 0), r_shoulder=(0, 0, 1.25),
                  r_elbow=(0, 0.2, 0), neck=(0, 0.2, 0)),
}


# per-joint axes that carry most of the motion (hip/knee flexion, shoulder
# raise and swing, elbow flexion); everything else only jitters
_SWING = {"l_hip": (0,), "r_hip": (0,), "l_knee": (0,), "r_knee": (0,),
          "l_shoulder": (1, 2), "r_shoulder": (1, 2), "l_elbow": (1,), "r_elbow": (1,)}


def swing_scale(jitter, swing):
    scale = np.full((len(JOINT_NAMES), 3), float(jitter))
    for name, axes in _SWING.items():
        scale[JOINT_NAMES.index(name), list(axes)] = swing
    return scale[1:].ravel()


N_SHAPE_SAMPLES = 80


def sample_pose_corpus(n, seed=0, jitter=0.03, swing=0.15):
    """Body poses (global orientation excluded) drawn around a few motion modes."""
    rng = np.random.default_rng(seed)
    means = np.array(list(POSE_MODES.values()))
    comp = rng.integers(len(means), size=n)
    return means[comp] + swing_scale(jitter, swing) * rng.standard_normal((n, means.shape[1]))


def build_humanoid(n_vertices=600, segs=8, seed=0, n_shape_samples=N_SHAPE_SAMPLES,
                   n_pose_samples=4000, n_components=8):
    """Full test assets: body model, shape prior, capsule regressor, pose mixture."""
    model = build_body_model(n_vertices, segs)
    shape_prior = ShapePriorMatrix(np.ones(model.B))
    rng = np.random.default_rng(seed)
    betas = shape_prior.sample(rng, n_shape_samples)
    axes = capsule_axes(model)
    regressor, mean_caps = train_capsule_regressor(model, betas, axes=axes)
    pairs = incompatible_part_pairs(model, mean_caps, regressor)
    gmm = fit_gmm(sample_pose_corpus(n_pose_samples, seed), n_components, seed)
    return ModelAssets(model, shape_prior, CapsuleModel(mean_caps, regressor, pairs), gmm)
