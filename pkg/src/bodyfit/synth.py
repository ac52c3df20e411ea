"""Synthetic scenes, shape and joint error metrics, and the synthetic experiments."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .camera import FACING_CAMERA, CameraIntrinsics, Detections2D, project
from .errors import DegenerateConfiguration
from .fitter import FitConfig, data_term, fit_single
from .model import BodyModel, FitParams, posed_joints
from .solver import ResidualProblem, SolveOptions, solve_dogleg

IMAGE_SIZE = (640, 480)
FOCAL = 1000.0


@dataclass
class SyntheticScene:
    truth: FitParams
    camera: CameraIntrinsics
    image_size: tuple
    detections: Detections2D
    clean_uv: np.ndarray
    noise_std: float
    seed: int
    index: int


def default_camera(image_size=IMAGE_SIZE, focal=FOCAL):
    w, h = image_size
    return CameraIntrinsics(focal, focal, w / 2.0, h / 2.0)


def scene_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def rotate_orientation(base, yaw):
    """Global orientation ``base`` turned by ``yaw`` about the body's vertical axis."""
    from scipy.spatial.transform import Rotation

    R = Rotation.from_rotvec(base) * Rotation.from_rotvec([0.0, yaw, 0.0])
    return R.as_rotvec()


def sample_truth(model, assets, rng, yaw_range=0.5, depth=(4.5, 5.5), offset=0.3):
    beta = assets.shape_prior.sample(rng)
    theta = np.zeros(model.n_pose)
    theta[:3] = rotate_orientation(FACING_CAMERA, rng.uniform(-yaw_range, yaw_range))
    for _ in range(100):
        body = assets.gmm.sample(rng, 1)[0]
        if np.all(np.linalg.norm(body.reshape(-1, 3), axis=1) < np.pi):
            break
    theta[3:] = body
    gamma = np.array([rng.uniform(-offset, offset), rng.uniform(-offset, offset),
                      rng.uniform(*depth)])
    return FitParams(beta, theta, gamma)


def render(model, params, cam, noise_std, rng, image_size=IMAGE_SIZE, image_id=""):
    """Project the truth joints, add isotropic pixel noise, confidences 1."""
    uv = project(posed_joints(model, params), cam)
    noisy = uv + noise_std * rng.standard_normal(uv.shape)
    det = Detections2D(list(model.joint_names), noisy, np.ones(model.K), tuple(image_size), image_id)
    return det, uv


def _inside(uv, image_size, factor=2.0):
    w, h = image_size
    cx, cy = w / 2.0, h / 2.0
    return bool(np.all(np.abs(uv[:, 0] - cx) <= factor * w / 2) and
                np.all(np.abs(uv[:, 1] - cy) <= factor * h / 2))


def make_scene(model, assets, seed, index, noise_std=0.0, cam=None, image_size=IMAGE_SIZE,
               truth_fn=None):
    """One deterministic scene; the truth is drawn before the noise."""
    if noise_std < 0:
        raise ValueError("noise_std must be nonnegative")
    cam = cam or default_camera(image_size)
    rng = scene_rng(seed, index)
    sampler = truth_fn or sample_truth
    for _ in range(100):
        truth = sampler(model, assets, rng)
        uv = project(posed_joints(model, truth), cam)
        if _inside(uv, image_size, 1.0):
            break
    det, clean = render(model, truth, cam, noise_std, rng, image_size, f"scene{index:05d}")
    return SyntheticScene(truth, cam, tuple(image_size), det, clean, float(noise_std), seed, index)


def generate_scenes(model, assets, n, noise_std=0.0, seed=0, image_size=IMAGE_SIZE):
    """``n`` scenes with shape from the shape prior and pose from the pose mixture."""
    return [make_scene(model, assets, seed, i, noise_std, image_size=image_size) for i in range(n)]


# --- metrics --------------------------------------------------------------------

def canonical_shape_error(model: BodyModel, beta_est, beta_true):
    """Mean vertex distance between two shapes in the rest pose (meters)."""
    d = model.shaped_vertices(beta_est) - model.shaped_vertices(beta_true)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def procrustes_align(pred, gt):
    """Similarity transform of ``pred`` onto ``gt`` with a proper rotation."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError("pred and gt must both be (K, 3)")
    if len(pred) < 3:
        raise DegenerateConfiguration("need at least 3 points")
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    X, Y = pred - mp, gt - mg
    for name, Z in (("pred", X), ("gt", Y)):
        sv = np.linalg.svd(Z, compute_uv=False)
        if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
            raise DegenerateConfiguration(f"{name} points are collinear")
    U, S, Vt = np.linalg.svd(Y.T @ X)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ D @ Vt
    scale = float(np.trace(np.diag(S) @ D) / np.sum(X * X))
    return scale * X @ R.T + mg


def procrustes_aligned_joint_error(pred, gt):
    """Mean joint distance after similarity alignment, in millimeters."""
    aligned = procrustes_align(pred, gt)
    return float(1000.0 * np.mean(np.linalg.norm(aligned - np.asarray(gt), axis=1)))


# --- experiments ------------------------------------------------------------------

def fit_shape_known_pose(model, scene, joint_names, rho0=100.0, free_dims=None, opts=None):
    """Fit beta alone to a joint subset with pose and translation fixed to the truth."""
    free_dims = model.B if free_dims is None else int(free_dims)
    beta0 = np.zeros(model.B)
    if free_dims == 0:
        return beta0
    keep = [i for i, n in enumerate(scene.detections.names) if n in set(joint_names)]
    det = Detections2D([scene.detections.names[i] for i in keep], scene.detections.uv[keep],
                       scene.detections.confidence[keep], scene.image_size)
    truth = scene.truth

    def residual(x):
        params = FitParams(np.r_[x, np.zeros(model.B - free_dims)], truth.theta, truth.gamma)
        r, J = data_term(model, scene.camera, params, det, rho0, jacobian=True)
        return r, J[:, :free_dims]

    prob = ResidualProblem([("beta", free_dims)]).add_term("data", residual)
    x, _ = solve_dogleg(prob, np.zeros(free_dims), opts or SolveOptions(max_iters=50))
    return np.r_[x, np.zeros(model.B - free_dims)]


def joint_subset_experiment(model, scenes, subsets=("all", "limbs12", "torso4"), free_dims=None):
    """Mean canonical shape error per joint subset with the pose known."""
    table = {}
    for name in subsets:
        joints = model.joint_sets[name]
        errs = [canonical_shape_error(model, fit_shape_known_pose(model, s, joints,
                                                                  free_dims=free_dims),
                                      s.truth.beta) for s in scenes]
        table[name] = float(np.mean(errs))
    return table


def mean_shape_baseline(model, scenes):
    return float(np.mean([canonical_shape_error(model, np.zeros(model.B), s.truth.beta)
                          for s in scenes]))


@dataclass
class SceneFit:
    index: int
    shape_error: float
    joint_error_mm: float
    baseline_error: float


def evaluate_fit(model, scene, result):
    return SceneFit(
        index=scene.index,
        shape_error=canonical_shape_error(model, result.params.beta, scene.truth.beta),
        joint_error_mm=procrustes_aligned_joint_error(posed_joints(model, result.params),
                                                      posed_joints(model, scene.truth)),
        baseline_error=canonical_shape_error(model, np.zeros(model.B), scene.truth.beta),
    )


def fit_scenes(model, scenes, cfg: FitConfig):
    return [evaluate_fit(model, s, fit_single(model, s.camera, s.detections, cfg)) for s in scenes]


def noise_sweep(model, assets, cfg, noise_levels=(0.0, 1.0, 3.0, 5.0), n_scenes=200, seed=0,
                match_noise=True):
    """Rows of ``(noise, mean fitted shape error, mean-shape baseline, mean joint error)``.

    Every noise level reuses the same truths, so only the noise differs. With
    ``match_noise`` the config's ``noise_px`` is set to each level.
    """
    rows = []
    for sigma in noise_levels:
        level_cfg = replace(cfg, noise_px=float(sigma)) if match_noise else cfg
        fits = fit_scenes(model, generate_scenes(model, assets, n_scenes, sigma, seed), level_cfg)
        rows.append({
            "noise_px": float(sigma),
            "shape_error_m": float(np.mean([f.shape_error for f in fits])),
            "baseline_m": float(np.mean([f.baseline_error for f in fits])),
            "joint_error_mm": float(np.mean([f.joint_error_mm for f in fits])),
            "n_scenes": len(fits),
        })
    return rows


# --- colliding scenes ----------------------------------------------------------------

def folded_arms_truth(model, assets, rng):
    """Truth with both forearms folded across the front of the torso."""
    params = sample_truth(model, assets, rng, yaw_range=0.3)
    theta = params.theta.copy().reshape(-1, 3)
    i = model.joint_index
    theta[i("l_shoulder")] = [0.0, -1.1 + rng.uniform(-0.15, 0.15), rng.uniform(-0.2, 0.2)]
    theta[i("r_shoulder")] = [0.0, 1.1 + rng.uniform(-0.15, 0.15), rng.uniform(-0.2, 0.2)]
    theta[i("l_elbow")] = [0.0, -1.9 + rng.uniform(-0.2, 0.2), 0.0]
    theta[i("r_elbow")] = [0.0, 1.9 + rng.uniform(-0.2, 0.2), 0.0]
    return params.replace(theta=theta.ravel())


def colliding_scenes(model, assets, n, seed=0, noise_std=0.0):
    return [make_scene(model, assets, seed, i, noise_std, truth_fn=folded_arms_truth)
            for i in range(n)]
