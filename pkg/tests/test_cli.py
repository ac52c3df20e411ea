import json
import subprocess
import sys

import numpy as np
import pytest

from bodyfit import io
from bodyfit.camera import Detections2D
from bodyfit.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from bodyfit.synth import make_scene


@pytest.fixture
def quick_config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"n_starts": 1}))
    return p


def scene_detections(assets, index, drop=()):
    s = make_scene(assets.model, assets, 31, index, noise_std=1.0)
    d = s.detections
    keep = [i for i, n in enumerate(d.names) if n not in drop]
    det = Detections2D([d.names[i] for i in keep], d.uv[keep], d.confidence[keep], d.image_size, d.image_id)
    return det, s.camera


def test_fit_writes_mesh_params_and_log(assets, tmp_path, quick_config):
    dets = tmp_path / "det.json"
    io.write_detections(dets, [scene_detections(assets, 0)])
    out = tmp_path / "out"
    code = main(["fit", "--detections", str(dets), "--output-dir", str(out), "--config", str(quick_config)])
    assert code == EXIT_OK
    mesh = io.read_obj(out / "scene00000.obj")
    assert mesh.vertices.shape == (assets.model.N, 3)
    rec = io.read_params(out / "scene00000.json")
    assert rec["camera_source"] == "detections"
    assert io.reevaluate_record(rec, assets)[0] == pytest.approx(rec["total_energy"], rel=1e-9)
    assert "stage 3" in (out / "scene00000.log").read_text()


def test_fit_missing_torso_fails_that_image_only(assets, tmp_path, quick_config, capsys):
    dets = tmp_path / "det.json"
    bad, cam = scene_detections(assets, 1, drop=("l_hip",))
    io.write_detections(dets, [scene_detections(assets, 2), (bad, cam)])
    out = tmp_path / "out"
    code = main(["fit", "--detections", str(dets), "--output-dir", str(out), "--config", str(quick_config)])
    assert code == EXIT_FAIL
    assert (out / "scene00002.obj").exists()
    assert not (out / "scene00001.obj").exists()
    assert "MissingTorso" in capsys.readouterr().err
    assert "MissingTorso" in (out / "scene00001.log").read_text()


def test_default_focal_is_image_width(assets, tmp_path, quick_config):
    det, _ = scene_detections(assets, 3)
    dets = tmp_path / "det.json"
    io.write_detections(dets, [(det, None)])
    main(["fit", "--detections", str(dets), "--output-dir", str(tmp_path / "o"), "--config", str(quick_config)])
    rec = io.read_params(tmp_path / "o" / "scene00003.json")
    assert rec["camera_source"] == "default_image_width"
    assert rec["camera"]["fx"] == det.image_size[0]
    main(["fit", "--detections", str(dets), "--output-dir", str(tmp_path / "f"), "--config", str(quick_config),
          "--focal", "1000"])
    rec = io.read_params(tmp_path / "f" / "scene00003.json")
    assert rec["camera_source"] == "flag" and rec["camera"]["fx"] == 1000.0


def test_usage_errors_exit_2(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["fit", "--output-dir", str(tmp_path)])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == EXIT_USAGE


def test_bad_inputs_exit_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda_typo": 1}))
    dets = tmp_path / "det.json"
    dets.write_text("[]")
    assert main(["fit", "--detections", str(dets), "--output-dir", str(tmp_path), "--config", str(cfg)]) == 2
    assert main(["fit", "--detections", str(tmp_path / "none.json"), "--output-dir", str(tmp_path)]) == 2
    assert main(["fit", "--detections", str(dets), "--output-dir", str(tmp_path),
                 "--model", str(tmp_path / "none.bfm")]) == 2


def test_model_env_var(assets, tmp_path, monkeypatch, quick_config):
    monkeypatch.setenv(io.MODEL_ENV, str(tmp_path / "absent.bfm"))
    dets = tmp_path / "det.json"
    io.write_detections(dets, [scene_detections(assets, 4)])
    args = ["fit", "--detections", str(dets), "--output-dir", str(tmp_path / "o"), "--config", str(quick_config)]
    assert main(args) == EXIT_USAGE
    io.save_model(tmp_path / "copy.bfm", assets)
    monkeypatch.setenv(io.MODEL_ENV, str(tmp_path / "copy.bfm"))
    assert main(args) == EXIT_OK


def test_synth_tables_are_deterministic(tmp_path, quick_config):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["synth", "--n-scenes", "3", "--noise", "0", "2", "--subset-experiment", "--seed", "4",
                     "--config", str(quick_config), "--output-dir", str(out)])
        assert code == EXIT_OK
        runs.append(out)
    for table in ("noise_sweep.csv", "joint_subsets.csv", "manifest.json"):
        assert (runs[0] / table).read_bytes() == (runs[1] / table).read_bytes()
    rows = io.read_table(runs[0] / "noise_sweep.csv")
    assert [r["noise_px"] for r in rows] == [0.0, 2.0]
    assert [r["subset"] for r in io.read_table(runs[0] / "joint_subsets.csv")] == ["all", "limbs12", "torso4"]


def test_fit_outputs_are_deterministic(assets, tmp_path, quick_config):
    dets = tmp_path / "det.json"
    io.write_detections(dets, [scene_detections(assets, 5)])
    for name in ("a", "b"):
        main(["fit", "--detections", str(dets), "--output-dir", str(tmp_path / name), "--config", str(quick_config)])
    assert (tmp_path / "a" / "scene00005.obj").read_bytes() == (tmp_path / "b" / "scene00005.obj").read_bytes()
    ra = io.read_params(tmp_path / "a" / "scene00005.json")
    rb = io.read_params(tmp_path / "b" / "scene00005.json")
    assert ra["beta"] == rb["beta"] and ra["theta"] == rb["theta"] and ra["energies"] == rb["energies"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bodyfit.cli", "fit"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "usage" in proc.stderr


def test_parallel_jobs_match_serial(assets, tmp_path, quick_config):
    dets = tmp_path / "det.json"
    io.write_detections(dets, [scene_detections(assets, i) for i in (6, 7)])
    for name, jobs in (("s", "1"), ("p", "2")):
        assert main(["fit", "--detections", str(dets), "--output-dir", str(tmp_path / name), "--config",
                     str(quick_config), "--jobs", jobs]) == EXIT_OK
    for i in (6, 7):
        a = np.array(io.read_params(tmp_path / "s" / f"scene{i:05d}.json")["beta"])
        b = np.array(io.read_params(tmp_path / "p" / f"scene{i:05d}.json")["beta"])
        assert np.array_equal(a, b)
