"""Perspective projection and camera/orientation initialization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTorso, MissingTorso, NonPositiveDepth, SolverDiverged
from .solver import ResidualProblem, SolveOptions, gm_residuals, solve_dogleg

MIN_DEPTH = 1e-6
TORSO = ("l_shoulder", "r_shoulder", "l_hip", "r_hip")
# body y-up/z-forward to camera y-down/z-into-scene, facing the camera
FACING_CAMERA = np.array([np.pi, 0.0, 0.0])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "k1": self.k1, "k2": self.k2}


@dataclass
class Detections2D:
    """2D joints keyed by name, with per-joint confidence in [0, 1]."""

    names: list
    uv: np.ndarray
    confidence: np.ndarray
    image_size: tuple | None = None
    image_id: str = ""
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.names = [str(n) for n in self.names]
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).ravel()
        if len(self.names) != len(self.uv) or len(self.names) != len(self.confidence):
            raise ValueError("names, uv and confidence must have the same length")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidences must lie in [0, 1]")
        self._index = {n: i for i, n in enumerate(self.names)}

    def __contains__(self, name):
        i = self._index.get(name)
        return i is not None and self.confidence[i] > 0

    def point(self, name):
        return self.uv[self._index[name]]

    def translated(self, offset):
        return Detections2D(self.names, self.uv + np.asarray(offset), self.confidence,
                            self.image_size, self.image_id)


def project(points, cam: CameraIntrinsics, jacobian=False):
    """Pinhole projection with optional two-term radial distortion.

    Returns (M, 2) pixels, and with ``jacobian=True`` also d pixel / d point
    as (M, 2, 3).
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = P[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth(f"{int(np.sum(z <= MIN_DEPTH))} point(s) at or behind the camera")
    xn = P[:, 0] / z
    yn = P[:, 1] / z
    r2 = xn * xn + yn * yn
    dist = 1.0 + cam.k1 * r2 + cam.k2 * r2 * r2
    uv = np.stack([cam.fx * dist * xn + cam.cx, cam.fy * dist * yn + cam.cy], axis=1)
    if not jacobian:
        return uv
    dd_dr2 = cam.k1 + 2.0 * cam.k2 * r2
    # d(xd, yd)/d(xn, yn) with xd = dist * xn
    a11 = dist + 2.0 * xn * xn * dd_dr2
    a12 = 2.0 * xn * yn * dd_dr2
    a22 = dist + 2.0 * yn * yn * dd_dr2
    inv_z = 1.0 / z
    J = np.zeros((P.shape[0], 2, 3))
    # d(xn, yn)/dP = [[1/z, 0, -xn/z], [0, 1/z, -yn/z]]
    J[:, 0, 0] = cam.fx * a11 * inv_z
    J[:, 0, 1] = cam.fx * a12 * inv_z
    J[:, 0, 2] = -cam.fx * (a11 * xn + a12 * yn) * inv_z
    J[:, 1, 0] = cam.fy * a12 * inv_z
    J[:, 1, 1] = cam.fy * a22 * inv_z
    J[:, 1, 2] = -cam.fy * (a12 * xn + a22 * yn) * inv_z
    return uv, J


def _torso_points(detections, torso):
    missing = [n for n in torso if n not in detections]
    if missing:
        raise MissingTorso(f"torso joints not detected: {', '.join(missing)}")
    return [detections.point(n) for n in torso]


def torso_length(ls, rs, lh, rh):
    """Mean length of the two shoulder-to-opposite-hip diagonals."""
    return 0.5 * (np.linalg.norm(np.subtract(ls, rh)) + np.linalg.norm(np.subtract(rs, lh)))


def init_depth(cam, detections, torso_len_3d, torso=TORSO):
    """Depth of a fronto-parallel torso from similar triangles (meters)."""
    ls, rs, lh, rh = _torso_points(detections, torso)
    length_2d = torso_length(ls, rs, lh, rh)
    if length_2d < 1.0:
        raise DegenerateTorso(f"2D torso length {length_2d:.3g} px is below 1 px")
    return cam.fy * torso_len_3d / length_2d


def model_torso_length(model, beta=None, torso=TORSO):
    J = model.rest_joints(np.zeros(model.B) if beta is None else beta)
    idx = [model.joint_index(n) for n in torso]
    return torso_length(*J[idx])


def torso_names(model):
    """Model joint names for the four torso roles."""
    return tuple(model.roles.get(r, d) for r, d in zip(
        ("left_shoulder", "right_shoulder", "left_hip", "right_hip"), TORSO))


def initial_translation(model, cam, detections, depth, orient=FACING_CAMERA, torso=TORSO):
    """Translation putting the mean-shape torso center on the 2D torso center at ``depth``."""
    from .kinematics import rodrigues

    pts = _torso_points(detections, torso)
    center_2d = np.mean(pts, axis=0)
    J = model.rest_joints(np.zeros(model.B))
    idx = [model.joint_index(n) for n in torso]
    center_rest = J[idx].mean(axis=0)
    R = rodrigues(orient)
    posed_center = J[0] + R @ (center_rest - J[0])
    target = np.array([
        (center_2d[0] - cam.cx) * depth / cam.fx,
        (center_2d[1] - cam.cy) * depth / cam.fy,
        depth,
    ])
    return target - posed_center


def refine_camera(model, cam, detections, init_gamma, init_orient=FACING_CAMERA,
                  rho0=100.0, opts=None, torso=None):
    """Fit translation and global orientation to the torso joints, shape fixed at the mean.

    Returns ``(gamma, global_orient)``.
    """
    from .model import FitParams, posed_joints

    torso = torso or torso_names(model)
    pts = np.array(_torso_points(detections, torso))
    w = np.array([detections.confidence[detections._index[n]] for n in torso])
    idx = np.array([model.joint_index(n) for n in torso])
    B, P = model.B, model.n_pose
    sw = np.sqrt(w)

    def torso_residual(x):
        theta = np.zeros(P)
        theta[:3] = x[:3]
        params = FitParams(np.zeros(B), theta, x[3:6])
        joints, dj = posed_joints(model, params, jacobian=True)
        uv, dproj = project(joints[idx], cam, jacobian=True)
        r, dr = gm_residuals(uv - pts, rho0)
        full = np.einsum("mab,mbc,mcp->map", dr, dproj, dj[idx])
        cols = np.r_[B : B + 3, B + P : B + P + 3]
        return (sw[:, None] * r).ravel(), (sw[:, None, None] * full[:, :, cols]).reshape(-1, 6)

    problem = ResidualProblem([("orient", 3), ("gamma", 3)]).add_term("torso", torso_residual)
    x0 = np.r_[np.asarray(init_orient, dtype=np.float64), np.asarray(init_gamma, dtype=np.float64)]
    x, report = solve_dogleg(problem, x0, opts or SolveOptions(max_iters=100))
    orient, gamma = x[:3], x[3:]
    theta = np.zeros(P)
    theta[:3] = orient
    joints = posed_joints(model, FitParams(np.zeros(B), theta, gamma))
    if gamma[2] <= 0 or np.any(joints[:, 2] <= MIN_DEPTH):
        raise SolverDiverged("camera refinement moved the body behind the camera")
    uv = project(joints[idx], cam)
    rms = float(np.sqrt(np.mean(np.sum((uv - pts) ** 2, axis=1))))
    if detections.image_size is not None:
        width, height = detections.image_size
    else:
        width, height = 2 * cam.cx, 2 * cam.cy
    if rms > np.hypot(width, height):
        raise SolverDiverged(f"torso reprojection RMS {rms:.1f} px exceeds the image diagonal")
    return gamma, orient


def init_camera(model, cam, detections, rho0=100.0, opts=None):
    """Depth from similar triangles, then torso refinement. Returns ``(gamma, orient)``."""
    torso = torso_names(model)
    depth = init_depth(cam, detections, model_torso_length(model, torso=torso), torso=torso)
    gamma0 = initial_translation(model, cam, detections, depth, torso=torso)
    return refine_camera(model, cam, detections, gamma0, rho0=rho0, opts=opts, torso=torso)
