"""The full single-image objective and the staged fitting procedure."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .camera import (FACING_CAMERA, CameraIntrinsics, Detections2D, init_depth,
                     initial_translation, model_torso_length, project, refine_camera,
                     torso_length, torso_names)
from .capsules import CapsuleModel, SphereRig
from .errors import InfeasiblePoint, MissingTorso, SolverDiverged, UnknownJoint
from .model import BodyModel, FitParams, MeshSurface, posed_joints, skinned_surface
from .priors import GmmPrior, ShapePriorMatrix, angle_prior_residuals, shape_prior_residuals
from .solver import ResidualProblem, SolveOptions, SolveReport, gm_residuals, solve_dogleg

TERMS = ("data", "pose", "angle", "interpenetration", "shape")
# sphere pairs further apart than this (in exponent units) are left out while
# solving; together they change the energy by far less than one ulp
OVERLAP_CUTOFF = 40.0


@dataclass
class FitConfig:
    """Stage schedule and priors for :func:`fit_single`.

    Each ``lambda_*`` holds one weight per stage. The pose and shape weights
    must not increase from stage to stage. ``shoulder_flip_threshold_px`` of
    ``None`` means ``flip_ratio`` times the 2D torso length.

    ``noise_px`` is the expected detection noise std in pixels. The pose and
    shape weights of every stage are floored at ``2 noise_px**2`` and
    ``noise_px**2``, the weights at which the energy is a scaled negative log
    posterior for isotropic Gaussian detection noise.
    """

    gmm: GmmPrior | None = None
    shape_prior: ShapePriorMatrix | None = None
    capsules: CapsuleModel | None = None
    lambda_theta: tuple = (404.0, 40.4, 4.04, 0.404)
    lambda_beta: tuple = (100.0, 10.0, 1.0, 1.0)
    lambda_a: tuple = (1.0, 1.0, 1.0, 1.0)
    lambda_sp: tuple = (100.0, 100.0, 100.0, 100.0)
    n_stages: int = 4
    rho0: float = 100.0
    shoulder_flip_threshold_px: float | None = None
    flip_ratio: float = 0.2
    stage_iters: int = 30
    try_flip: bool = True
    mode_starts: bool = True
    n_starts: int = 5
    init_yaws: tuple = (0.0, 0.6, -0.6)
    fixed_translation_stages: tuple = ()
    noise_px: float = 0.0

    def __post_init__(self):
        for name in ("lambda_theta", "lambda_beta", "lambda_a", "lambda_sp"):
            w = tuple(float(v) for v in getattr(self, name))
            if len(w) != self.n_stages:
                raise ValueError(f"{name} has {len(w)} entries for {self.n_stages} stages")
            if any(v < 0 or not math.isfinite(v) for v in w):
                raise ValueError(f"{name} weights must be finite and nonnegative")
            setattr(self, name, w)
        for name in ("lambda_theta", "lambda_beta"):
            w = getattr(self, name)
            if any(b > a for a, b in zip(w, w[1:])):
                raise ValueError(f"{name} must be non-increasing across stages")
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if not (self.noise_px >= 0 and math.isfinite(self.noise_px)):
            raise ValueError("noise_px must be finite and nonnegative")
        self.noise_px = float(self.noise_px)

    def weights(self, stage):
        return {
            "data": 1.0,
            "pose": max(self.lambda_theta[stage], 2.0 * self.noise_px ** 2),
            "angle": self.lambda_a[stage],
            "interpenetration": self.lambda_sp[stage],
            "shape": max(self.lambda_beta[stage], self.noise_px ** 2),
        }

    def schedule_dict(self):
        return {
            "lambda_theta": list(self.lambda_theta),
            "lambda_beta": list(self.lambda_beta),
            "lambda_a": list(self.lambda_a),
            "lambda_sp": list(self.lambda_sp),
            "n_stages": self.n_stages,
            "rho0": self.rho0,
            "shoulder_flip_threshold_px": self.shoulder_flip_threshold_px,
            "flip_ratio": self.flip_ratio,
            "stage_iters": self.stage_iters,
            "try_flip": self.try_flip,
            "mode_starts": self.mode_starts,
            "n_starts": self.n_starts,
            "init_yaws": list(self.init_yaws),
            "fixed_translation_stages": list(self.fixed_translation_stages),
            "noise_px": self.noise_px,
        }

    @classmethod
    def from_assets(cls, assets, **overrides):
        return cls(gmm=assets.gmm, shape_prior=assets.shape_prior, capsules=assets.capsules,
                   **overrides)


@dataclass
class FitResult:
    params: FitParams
    mesh: MeshSurface
    energies: dict
    joint_residuals: dict
    branch: str
    branches_run: int
    reports: list = field(default_factory=list)
    branch_data_energy: dict = field(default_factory=dict)

    @property
    def total_energy(self):
        return float(sum(self.energies.values()))


# --- detections ---------------------------------------------------------------

def resolve_name(model: BodyModel, name):
    if name in model.detection_map:
        return model.detection_map[name]
    if name in model.joint_names:
        return name
    raise UnknownJoint(f"detected joint {name!r} does not map to a model joint")


def to_model_detections(model: BodyModel, detections: Detections2D) -> Detections2D:
    """Rename detections to model joint names, dropping zero-confidence duplicates."""
    names, uv, conf = [], [], []
    seen = {}
    for n, p, c in zip(detections.names, detections.uv, detections.confidence):
        m = resolve_name(model, n)
        if m in seen:
            if c <= conf[seen[m]]:
                continue
            i = seen[m]
            uv[i], conf[i] = p, c
            continue
        seen[m] = len(names)
        names.append(m)
        uv.append(p)
        conf.append(c)
    return Detections2D(names, np.array(uv).reshape(-1, 2), np.array(conf),
                        detections.image_size, detections.image_id)


def _joint_data(model, detections):
    idx = np.array([model.joint_index(n) for n in detections.names], dtype=np.int64)
    return idx, detections.uv, detections.confidence


# --- energy terms ---------------------------------------------------------------

def data_term(model: BodyModel, cam: CameraIntrinsics, params: FitParams, detections: Detections2D,
              rho0=100.0, jacobian=False):
    """Confidence-weighted, robustified reprojection residuals, two per detected joint.

    ``detections`` must use model joint names (see :func:`to_model_detections`).
    Squared residuals sum to ``sum_i w_i rho(proj_i - uv_i)``.
    """
    idx, uv, w = _joint_data(model, detections)
    sw = np.sqrt(w)
    if not jacobian:
        joints = posed_joints(model, params)
        r, _ = gm_residuals(project(joints[idx], cam) - uv, rho0)
        return (sw[:, None] * r).ravel()
    joints, dj = posed_joints(model, params, jacobian=True)
    proj, dproj = project(joints[idx], cam, jacobian=True)
    r, dr = gm_residuals(proj - uv, rho0)
    J = np.einsum("mab,mbc,mcp->map", dr, dproj, dj[idx])
    return (sw[:, None] * r).ravel(), (sw[:, None, None] * J).reshape(2 * len(idx), -1)


class Objective:
    """Residual functions of every term over ``x = [beta, theta, gamma]``."""

    def __init__(self, model, cam, detections, cfg: FitConfig, rig=None, sp_cutoff=OVERLAP_CUTOFF):
        self.model = model
        self.cam = cam
        self.detections = detections
        self.cfg = cfg
        self.rig = rig
        self.sp_cutoff = sp_cutoff
        self.B, self.P = model.B, model.n_pose
        self.size = self.B + self.P + 3

    def params(self, x):
        return FitParams.from_vector(x, self.model)

    def data(self, x):
        return data_term(self.model, self.cam, self.params(x), self.detections, self.cfg.rho0,
                         jacobian=True)

    def pose(self, x):
        B = self.B
        r, Jb, _ = self.cfg.gmm.residuals(x[B + 3 : B + self.P])
        J = np.zeros((r.size, self.size))
        J[:, B + 3 : B + self.P] = Jb
        return r, J

    def angle(self, x):
        B = self.B
        r, Jt = angle_prior_residuals(x[B : B + self.P], self.model.angle_prior_terms)
        J = np.zeros((r.size, self.size))
        J[:, B : B + self.P] = Jt
        return r, J

    def interpenetration(self, x):
        B = self.B
        r, Jt = self.rig.residuals(x[B : B + self.P], self.sp_cutoff)
        J = np.zeros((r.size, self.size))
        J[:, B : B + self.P] = Jt
        return r, J

    def shape(self, x):
        r, Jb = shape_prior_residuals(x[: self.B], self.cfg.shape_prior)
        J = np.zeros((r.size, self.size))
        J[:, : self.B] = Jb
        return r, J

    def problem(self, weights, fix_translation=False):
        prob = ResidualProblem([("beta", self.B), ("theta", self.P), ("gamma", 3)])
        prob.add_term("data", self.data, weights["data"])
        if self.cfg.gmm is not None:
            prob.add_term("pose", self.pose, weights["pose"])
        if self.model.angle_prior_terms:
            prob.add_term("angle", self.angle, weights["angle"])
        if self.rig is not None and len(self.rig.pairs):
            prob.add_term("interpenetration", self.interpenetration, weights["interpenetration"])
        if self.cfg.shape_prior is not None:
            prob.add_term("shape", self.shape, weights["shape"])
        if fix_translation:
            prob.fix("gamma")
        return prob


def _rig(model, cfg, beta, stage):
    if cfg.capsules is None or cfg.lambda_sp[stage] == 0.0:
        return None
    return SphereRig(model, cfg.capsules, beta)


def total_energy(model, cam, params: FitParams, detections, cfg: FitConfig, stage=-1):
    """Weighted objective at ``params`` and its per-term breakdown.

    Returns ``(energy, terms)`` where ``terms`` maps term names to weighted
    energies. The interpenetration spheres are laid out for ``params.beta``.
    """
    stage = range(cfg.n_stages)[stage]
    detections = to_model_detections(model, detections)
    obj = Objective(model, cam, detections, cfg, _rig(model, cfg, params.beta, stage), sp_cutoff=None)
    _, _, terms = obj.problem(cfg.weights(stage)).evaluate(params.to_vector(), jacobian=False)
    full = {t: terms.get(t, 0.0) for t in TERMS}
    return float(sum(full.values())), full


# --- staged fit -----------------------------------------------------------------

def flipped_orientation(orient):
    """Global orientation turned 180 degrees about the body's vertical axis."""
    R = Rotation.from_rotvec(orient) * Rotation.from_rotvec([0.0, np.pi, 0.0])
    return R.as_rotvec()


def flip_threshold(cfg, detections, torso):
    if cfg.shoulder_flip_threshold_px is not None:
        return float(cfg.shoulder_flip_threshold_px)
    return cfg.flip_ratio * torso_length(*[detections.point(n) for n in torso])


def pose_candidates(cfg):
    """Body poses tried as starting points: the mixture's weighted mean, then each mode."""
    if cfg.gmm is None:
        return []
    cands = [cfg.gmm.weights @ cfg.gmm.means]
    if cfg.mode_starts:
        cands.extend(cfg.gmm.means)
    return cands


def camera_hypotheses(model, cam, detections, cfg):
    """Distinct ``(gamma, orient)`` pairs from torso refinement started at several yaws.

    Four torso points cannot tell a body turned left from one turned right,
    so the refinement is started on both sides and every distinct local
    optimum is kept.
    """
    torso = torso_names(model)
    depth = init_depth(cam, detections, model_torso_length(model, torso=torso), torso=torso)
    gamma0 = initial_translation(model, cam, detections, depth, torso=torso)
    out, errors = [], []
    for yaw in cfg.init_yaws:
        o0 = (Rotation.from_rotvec(FACING_CAMERA) * Rotation.from_rotvec([0.0, yaw, 0.0])).as_rotvec()
        try:
            gamma, orient = refine_camera(model, cam, detections, gamma0, o0, rho0=cfg.rho0,
                                          torso=torso)
        except SolverDiverged as exc:
            errors.append(exc)
            continue
        R = Rotation.from_rotvec(orient)
        if all((R.inv() * Rotation.from_rotvec(o)).magnitude() > 0.05 for _, o in out):
            out.append((gamma, orient))
    if not out:
        raise errors[0]
    return out


def start_candidates(model, cam, detections, cfg, hypotheses):
    """Starting points at the mean shape for every camera hypothesis and candidate pose,
    ordered by their data energy."""
    scored = []
    for gamma, orient in hypotheses:
        for body in pose_candidates(cfg) or [np.zeros(model.n_pose - 3)]:
            params = FitParams(np.zeros(model.B), np.r_[orient, body], np.asarray(gamma, dtype=np.float64))
            try:
                r = data_term(model, cam, params, detections, cfg.rho0)
            except InfeasiblePoint:
                continue
            scored.append((float(r @ r), len(scored), params))
    if not scored:
        raise SolverDiverged("no starting pose projects in front of the camera")
    scored.sort(key=lambda t: (t[0], t[1]))
    return [p for _, _, p in scored]


def _stage_options(cfg):
    return SolveOptions(max_iters=cfg.stage_iters, gradient_tol=1e-6, step_tol=1e-8,
                        initial_radius=1.0)


def _solve_stage(model, cam, detections, cfg, x, stage):
    rig = _rig(model, cfg, x[: model.B], stage)
    obj = Objective(model, cam, detections, cfg, rig)
    prob = obj.problem(cfg.weights(stage), stage in cfg.fixed_translation_stages)
    return solve_dogleg(prob, x, _stage_options(cfg))


def run_stages(model, cam, detections, cfg: FitConfig, params: FitParams):
    """Anneal through the stage schedule from ``params``. Returns ``(params, reports)``."""
    x = params.to_vector()
    reports = []
    for stage in range(cfg.n_stages):
        x, report = _solve_stage(model, cam, detections, cfg, x, stage)
        reports.append(report)
    out = FitParams.from_vector(x, model)
    joints = posed_joints(model, out)
    if np.any(joints[:, 2] <= 0):
        raise SolverDiverged("fit placed joints behind the camera")
    return out, reports


def run_branch(model, cam, detections, cfg, hypotheses):
    """Run the schedule from the best few starts; keep the lowest final objective."""
    best = None
    errors = []
    for start in start_candidates(model, cam, detections, cfg, hypotheses)[: max(1, cfg.n_starts)]:
        try:
            params, reports = run_stages(model, cam, detections, cfg, start)
        except SolverDiverged as exc:
            errors.append(exc)
            continue
        energy, _ = total_energy(model, cam, params, detections, cfg)
        if best is None or energy < best[0]:
            best = (energy, params, reports)
    if best is None:
        raise errors[0]
    return best[1], best[2]


def joint_residuals(model, cam, params, detections):
    idx, uv, _ = _joint_data(model, detections)
    proj = project(posed_joints(model, params)[idx], cam)
    return {n: (proj[i] - uv[i]).tolist() for i, n in enumerate(detections.names)}


def fit_single(model: BodyModel, cam: CameraIntrinsics, detections: Detections2D,
               cfg: FitConfig) -> FitResult:
    """Fit shape, pose and translation to one image's 2D joints.

    The camera translation and global orientation are initialized from the
    torso, then every stage of the schedule runs a dogleg solve. When the
    shoulders are close together in the image, a second pass with the body
    turned around is run and the branch with the lower data energy wins.
    """
    det = to_model_detections(model, detections)
    torso = torso_names(model)
    missing = [n for n in torso if n not in det]
    if missing:
        raise MissingTorso(f"torso joints not detected: {', '.join(missing)}")
    hyps = camera_hypotheses(model, cam, det, cfg)
    branches = [("initial", hyps)]
    shoulders = np.linalg.norm(det.point(torso[0]) - det.point(torso[1]))
    if cfg.try_flip and shoulders < flip_threshold(cfg, det, torso):
        branches.append(("flipped", [(g, flipped_orientation(o)) for g, o in hyps]))

    best = None
    data_energy = {}
    for branch, h in branches:
        params, reports = run_branch(model, cam, det, cfg, h)
        r = data_term(model, cam, params, det, cfg.rho0)
        e_data = float(r @ r)
        data_energy[branch] = e_data
        if best is None or e_data < best[0]:
            best = (e_data, branch, params, reports)
    _, branch, params, reports = best
    _, energies = total_energy(model, cam, params, det, cfg)
    return FitResult(
        params=params,
        mesh=skinned_surface(model, params),
        energies=energies,
        joint_residuals=joint_residuals(model, cam, params, det),
        branch=branch,
        branches_run=len(branches),
        reports=reports,
        branch_data_energy=data_energy,
    )


def with_stage_weights(cfg: FitConfig, **weights):
    """Copy of ``cfg`` with some per-stage weight tuples replaced."""
    return replace(cfg, **weights)
