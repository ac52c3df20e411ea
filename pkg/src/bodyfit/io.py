"""File formats: model container, prior file, detections, meshes, parameter records, tables.

Model container layout (binary form)::

    bodyfit-model <version>\\n
    <header JSON on one line>\\n
    <raw little-endian blocks>

The header lists every numeric block with its dtype (``<f8`` or ``<i8``),
shape and byte offset from the first byte after the header line. A file
starting with ``{`` is the pure-JSON form, where blocks are nested lists.
"""
from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .assets import ModelAssets
from .camera import CameraIntrinsics, Detections2D
from .capsules import CapsuleModel, CapsuleRegressor, CapsuleSet
from .errors import InvariantViolation, ParseError, UnsupportedVersion
from .model import AnglePriorTerm, BodyModel, FitParams, MeshSurface
from .priors import GmmPrior, ShapePriorMatrix

MODEL_MAGIC = "bodyfit-model"
PRIOR_MAGIC = "bodyfit-prior"
FORMAT_VERSION = 1
MODEL_ENV = "BODYFIT_MODEL"


# --- block container -----------------------------------------------------------

def _pack_blocks(blocks):
    entries, chunks, offset = [], [], 0
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if arr.dtype.kind in "iub":
            arr = arr.astype("<i8")
        else:
            arr = arr.astype("<f8")
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def _write_container(path, magic, header, blocks, fmt="binary"):
    path = Path(path)
    if fmt == "json":
        doc = {"format": magic, "version": FORMAT_VERSION, "header": header,
               "blocks": {k: _json_array(v) for k, v in blocks.items()}}
        path.write_text(json.dumps(doc))
        return path
    if fmt != "binary":
        raise ValueError(f"unknown format {fmt!r}")
    entries, payload = _pack_blocks(blocks)
    head = dict(header, blocks=entries)
    with open(path, "wb") as fh:
        fh.write(f"{magic} {FORMAT_VERSION}\n".encode())
        fh.write(json.dumps(head, separators=(",", ":")).encode() + b"\n")
        fh.write(payload)
    return path


def _json_array(arr):
    arr = np.asarray(arr)
    kind = "int" if arr.dtype.kind in "iub" else "float"
    return {"dtype": kind, "shape": list(arr.shape), "data": arr.ravel().tolist()}


def _from_json_array(name, spec):
    try:
        dtype = np.int64 if spec["dtype"] == "int" else np.float64
        return np.asarray(spec["data"], dtype=dtype).reshape(spec["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"block {name!r}: {exc}") from exc


def _check_version(version, magic):
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{magic} version {version} is not supported "
                                 f"(expected {FORMAT_VERSION})")


def _read_container(path, magic):
    """Returns ``(header, blocks)``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if data[:1] == b"{":
        try:
            doc = json.loads(data)
        except ValueError as exc:
            raise ParseError(f"{path}: invalid JSON: {exc}") from exc
        if doc.get("format") != magic:
            raise ParseError(f"{path}: not a {magic} file")
        _check_version(doc.get("version"), magic)
        blocks = {k: _from_json_array(k, v) for k, v in doc.get("blocks", {}).items()}
        return doc.get("header", {}), blocks
    first = data.find(b"\n")
    second = data.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise ParseError(f"{path}: truncated header")
    parts = data[:first].decode("ascii", "replace").split()
    if len(parts) != 2 or parts[0] != magic:
        raise ParseError(f"{path}: not a {magic} file")
    try:
        version = int(parts[1])
    except ValueError as exc:
        raise ParseError(f"{path}: bad version field {parts[1]!r}") from exc
    _check_version(version, magic)
    try:
        header = json.loads(data[first + 1 : second])
    except ValueError as exc:
        raise ParseError(f"{path}: invalid header JSON: {exc}") from exc
    payload = memoryview(data)[second + 1 :]
    blocks = {}
    for e in header.pop("blocks", []):
        try:
            dtype = np.dtype(e["dtype"])
            if dtype.str not in ("<f8", "<i8"):
                raise ParseError(f"block {e['name']!r}: unsupported dtype {e['dtype']}")
            shape = tuple(int(s) for s in e["shape"])
            start, n = int(e["offset"]), int(e["nbytes"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed block entry {e!r}") from exc
        if n != dtype.itemsize * math.prod(shape) or start < 0 or start + n > len(payload):
            raise ParseError(f"{path}: block {e['name']!r} size or offset is inconsistent")
        blocks[e["name"]] = np.frombuffer(payload[start : start + n], dtype=dtype).reshape(shape).copy()
    return header, blocks


# --- model ------------------------------------------------------------------------

def _gmm_blocks(gmm, prefix="gmm_"):
    return {prefix + "weights": gmm.weights, prefix + "means": gmm.means,
            prefix + "chol": gmm.chol, prefix + "c": np.array([gmm.c])}


def _gmm_from_blocks(blocks, prefix="gmm_"):
    return GmmPrior(blocks[prefix + "weights"], blocks[prefix + "means"],
                    blocks[prefix + "chol"], float(blocks[prefix + "c"][0]))


def model_header(model: BodyModel):
    F = len(model.faces)
    return {
        "counts": {"N": model.N, "K": model.K, "B": model.B, "F": F},
        "joint_names": list(model.joint_names),
        "parents": model.parents.tolist(),
        "angle_prior": [[t.joint, t.axis, t.sign] for t in model.angle_prior_terms],
        "detection_map": dict(model.detection_map),
        "roles": dict(model.roles),
        "joint_sets": {k: list(v) for k, v in model.joint_sets.items()},
        "has_pose_dirs": model.pose_dirs is not None,
    }


def model_blocks(assets: ModelAssets):
    m = assets.model
    Jr = m.joint_regressor.tocoo()
    order = np.lexsort((Jr.col, Jr.row))
    blocks = {
        "template": m.template_vertices,
        "shape_dirs": m.shape_dirs,
        "joint_regressor_rows": Jr.row[order],
        "joint_regressor_cols": Jr.col[order],
        "joint_regressor_vals": Jr.data[order],
        "skin_weights": m.skin_weights,
        "faces": m.faces,
        "shape_prior_diag": assets.shape_prior.inv_sigma_diag,
    }
    if m.pose_dirs is not None:
        blocks["pose_dirs"] = m.pose_dirs
    if assets.capsules is not None:
        c = assets.capsules.capsules
        r = assets.capsules.regressor
        blocks.update({
            "capsule_parts": c.parts, "capsule_radii": c.radii, "capsule_lengths": c.lengths,
            "capsule_child": c.child, "capsule_offset": c.offset, "capsule_direction": c.direction,
            "capsule_reg_weights": r.weights, "capsule_reg_intercept": r.intercept,
            "capsule_reg_lambda": np.array([r.ridge_lambda]),
            "capsule_pairs": assets.capsules.pairs,
        })
    if assets.gmm is not None:
        blocks.update(_gmm_blocks(assets.gmm))
    return blocks


def save_model(path, assets: ModelAssets, fmt="binary"):
    """Write a model with its shape prior and, when present, capsules and pose mixture."""
    header = model_header(assets.model)
    if assets.capsules is not None:
        header["capsule_cv_error"] = assets.capsules.regressor.cv_error
    return _write_container(path, MODEL_MAGIC, header, model_blocks(assets), fmt)


def _need(blocks, name, path):
    if name not in blocks:
        raise ParseError(f"{path}: missing block {name!r}")
    return blocks[name]


def _check_counts(header, blocks, path):
    counts = header.get("counts")
    if not isinstance(counts, dict):
        raise ParseError(f"{path}: header has no counts")
    try:
        N, K, B, F = (int(counts[k]) for k in ("N", "K", "B", "F"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad counts {counts!r}") from exc
    expected = {
        "template": (N, 3), "shape_dirs": (N, 3, B), "skin_weights": (N, K), "faces": (F, 3),
        "shape_prior_diag": (B,),
    }
    if header.get("has_pose_dirs"):
        expected["pose_dirs"] = (N, 3, 9 * (K - 1))
    violations = []
    for name, shape in expected.items():
        got = _need(blocks, name, path).shape
        if tuple(got) != shape:
            violations.append((name, f"shape {tuple(got)} does not match header counts {shape}"))
    if len(header.get("joint_names", [])) != K:
        violations.append(("joint_names", f"expected {K} names"))
    if len(header.get("parents", [])) != K:
        violations.append(("parents", f"expected {K} entries"))
    if violations:
        raise InvariantViolation(violations)
    return N, K, B, F


def load_model(path) -> ModelAssets:
    """Read and validate a model file. Every violated invariant is reported together."""
    header, blocks = _read_container(path, MODEL_MAGIC)
    N, K, B, F = _check_counts(header, blocks, path)
    rows = _need(blocks, "joint_regressor_rows", path)
    cols = _need(blocks, "joint_regressor_cols", path)
    vals = _need(blocks, "joint_regressor_vals", path)
    if not (len(rows) == len(cols) == len(vals)):
        raise InvariantViolation([("joint_regressor", "triplet arrays differ in length")])
    if len(rows) and (rows.min() < 0 or rows.max() >= K or cols.min() < 0 or cols.max() >= N):
        raise InvariantViolation([("joint_regressor", "triplet index out of range")])
    try:
        terms = [AnglePriorTerm(int(j), int(a), float(s)) for j, a, s in header.get("angle_prior", [])]
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: bad angle prior table") from exc
    model = BodyModel(
        template_vertices=blocks["template"],
        shape_dirs=blocks["shape_dirs"],
        joint_regressor=sp.csr_matrix((vals, (rows, cols)), shape=(K, N)),
        parents=np.asarray(header["parents"], dtype=np.int64),
        skin_weights=blocks["skin_weights"],
        joint_names=header["joint_names"],
        faces=blocks["faces"],
        pose_dirs=blocks.get("pose_dirs"),
        angle_prior_terms=terms,
        detection_map=header.get("detection_map", {}),
        roles=header.get("roles", {}),
        joint_sets=header.get("joint_sets", {}),
    )
    try:
        shape_prior = ShapePriorMatrix(blocks["shape_prior_diag"])
    except ValueError as exc:
        raise InvariantViolation([("shape_prior_diag", str(exc))]) from exc
    capsules = None
    if "capsule_parts" in blocks:
        try:
            caps = CapsuleSet(blocks["capsule_parts"], blocks["capsule_radii"],
                              blocks["capsule_lengths"], blocks["capsule_child"],
                              blocks["capsule_offset"], blocks["capsule_direction"])
            reg = CapsuleRegressor(blocks["capsule_reg_weights"], blocks["capsule_reg_intercept"],
                                   float(blocks["capsule_reg_lambda"][0]),
                                   header.get("capsule_cv_error", {}))
            capsules = CapsuleModel(caps, reg, blocks["capsule_pairs"])
        except (KeyError, ValueError) as exc:
            raise InvariantViolation([("capsules", str(exc))]) from exc
        if reg.weights.shape != (2 * len(caps), B):
            raise InvariantViolation([("capsule_reg_weights", f"expected ({2 * len(caps)}, {B})")])
    gmm = None
    if "gmm_weights" in blocks:
        try:
            gmm = _gmm_from_blocks(blocks)
        except (KeyError, ValueError) as exc:
            raise InvariantViolation([("gmm", str(exc))]) from exc
        if gmm.dim != 3 * (K - 1):
            raise InvariantViolation([("gmm_means", f"dimension {gmm.dim}, expected {3 * (K - 1)}")])
    return ModelAssets(model, shape_prior, capsules, gmm)


def default_model_path():
    """The model named by ``BODYFIT_MODEL``, else the bundled humanoid."""
    env = os.environ.get(MODEL_ENV)
    if env:
        return Path(env)
    return Path(__file__).with_name("data") / "humanoid16.bfm"


def load_default_model():
    return load_model(default_model_path())


# --- pose prior file -------------------------------------------------------------------

def save_prior(path, gmm: GmmPrior, fmt="binary"):
    header = {"n_components": gmm.n_components, "dim": gmm.dim}
    return _write_container(path, PRIOR_MAGIC, header, _gmm_blocks(gmm, ""), fmt)


def load_prior(path) -> GmmPrior:
    header, blocks = _read_container(path, PRIOR_MAGIC)
    try:
        gmm = _gmm_from_blocks(blocks, "")
    except KeyError as exc:
        raise ParseError(f"{path}: missing block {exc}") from exc
    except ValueError as exc:
        raise InvariantViolation([("gmm", str(exc))]) from exc
    if gmm.n_components != header.get("n_components") or gmm.dim != header.get("dim"):
        raise InvariantViolation([("header", "counts do not match the blocks")])
    return gmm


# --- detections --------------------------------------------------------------------------

def camera_from_dict(d):
    try:
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                float(d.get("k1", 0.0)), float(d.get("k2", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad camera record {d!r}: {exc}") from exc


def detections_to_dict(det: Detections2D, camera=None):
    d = {
        "image_id": det.image_id,
        "image_size": list(det.image_size) if det.image_size is not None else None,
        "joints": [{"name": n, "u": float(p[0]), "v": float(p[1]), "confidence": float(c)}
                   for n, p, c in zip(det.names, det.uv, det.confidence)],
    }
    if camera is not None:
        d["camera"] = camera.to_dict()
    return d


def detections_from_dict(d):
    """Returns ``(Detections2D, CameraIntrinsics or None)``."""
    try:
        joints = d["joints"]
        names = [j["name"] for j in joints]
        uv = [[float(j["u"]), float(j["v"])] for j in joints]
        conf = [float(j.get("confidence", 1.0)) for j in joints]
        size = d.get("image_size")
        size = (int(size[0]), int(size[1])) if size is not None else None
        det = Detections2D(names, np.array(uv).reshape(-1, 2), conf, size, str(d.get("image_id", "")))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad detections record: {exc}") from exc
    cam = camera_from_dict(d["camera"]) if d.get("camera") else None
    return det, cam


def write_detections(path, items):
    """``items`` is a list of ``(Detections2D, camera or None)``."""
    doc = {"format": "bodyfit-detections", "version": FORMAT_VERSION,
           "images": [detections_to_dict(d, c) for d, c in items]}
    Path(path).write_text(json.dumps(doc, indent=1))
    return Path(path)


def read_detections(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read detections {path}: {exc}") from exc
    if isinstance(doc, dict) and "images" in doc:
        if doc.get("version", FORMAT_VERSION) != FORMAT_VERSION:
            raise UnsupportedVersion(f"detections version {doc.get('version')} is not supported")
        images = doc["images"]
    elif isinstance(doc, list):
        images = doc
    else:
        images = [doc]
    return [detections_from_dict(d) for d in images]


# --- meshes -------------------------------------------------------------------------------

def write_obj(path, mesh: MeshSurface):
    """Wavefront OBJ with ``v`` and ``f`` records; coordinates round-trip exactly."""
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(mesh.vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(mesh.faces).tolist()]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def read_obj(path) -> MeshSurface:
    verts, faces = [], []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for i in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[i], idx[i + 1]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return MeshSurface(np.array(verts, dtype=np.float64).reshape(-1, 3),
                       np.array(faces, dtype=np.int64).reshape(-1, 3))


# --- parameter records -------------------------------------------------------------------------

def fit_record(result, cam, detections, cfg, image_id=""):
    """Everything needed to recompute the reported energies."""
    p = result.params
    return {
        "format": "bodyfit-params",
        "version": FORMAT_VERSION,
        "image_id": image_id,
        "beta": p.beta.tolist(),
        "theta": p.theta.tolist(),
        "gamma": p.gamma.tolist(),
        "camera": cam.to_dict(),
        "energies": dict(result.energies),
        "total_energy": result.total_energy,
        "branch": result.branch,
        "branches_run": result.branches_run,
        "branch_data_energy": dict(result.branch_data_energy),
        "convergence": [r.reason for r in result.reports],
        "stages": [r.to_dict() for r in result.reports],
        "joint_residuals_px": result.joint_residuals,
        "config": cfg.schedule_dict(),
        "detections": detections_to_dict(detections),
    }


def write_params(path, record):
    Path(path).write_text(json.dumps(record, indent=1))
    return Path(path)


def read_params(path):
    try:
        rec = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if rec.get("format") != "bodyfit-params":
        raise ParseError(f"{path}: not a parameters record")
    if rec.get("version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"parameters record version {rec.get('version')}")
    return rec


def params_from_record(rec):
    return FitParams(np.asarray(rec["beta"], dtype=np.float64), np.asarray(rec["theta"], dtype=np.float64),
                     np.asarray(rec["gamma"], dtype=np.float64))


def config_from_dict(d, assets=None):
    """A :class:`FitConfig` from a schedule dictionary (as written to records and config files)."""
    from .fitter import FitConfig

    allowed = {"lambda_theta", "lambda_beta", "lambda_a", "lambda_sp", "n_stages", "rho0",
               "shoulder_flip_threshold_px", "flip_ratio", "stage_iters", "try_flip",
               "mode_starts", "n_starts", "init_yaws", "fixed_translation_stages", "noise_px"}
    unknown = set(d) - allowed
    if unknown:
        raise ParseError(f"unknown config keys: {', '.join(sorted(unknown))}")
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}
    if assets is not None:
        return FitConfig.from_assets(assets, **kw)
    return FitConfig(**kw)


def reevaluate_record(rec, assets):
    """Recompute ``(total_energy, terms)`` for a parameters record."""
    from .fitter import total_energy

    cam = camera_from_dict(rec["camera"])
    det, _ = detections_from_dict(rec["detections"])
    cfg = config_from_dict(rec["config"], assets)
    return total_energy(assets.model, cam, params_from_record(rec), det, cfg)


# --- tables and manifests ------------------------------------------------------------------------

def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, rows, columns=None):
    """Comma-separated table with a header line; floats are written exactly."""
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return Path(path)


def _parse_cell(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: _parse_cell(v) for k, v in row.items()} for row in reader]


def write_manifest(path, manifest):
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return Path(path)
