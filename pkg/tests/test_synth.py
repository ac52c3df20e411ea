import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from bodyfit.errors import DegenerateConfiguration
from bodyfit.synth import (canonical_shape_error, colliding_scenes, fit_shape_known_pose, generate_scenes,
                           joint_subset_experiment, make_scene, mean_shape_baseline, procrustes_align,
                           procrustes_aligned_joint_error)


def test_canonical_shape_error_values(model):
    beta = np.random.default_rng(0).normal(size=model.B)
    assert canonical_shape_error(model, beta, beta) == 0.0
    d = model.shaped_vertices(beta) - model.template_vertices
    assert canonical_shape_error(model, np.zeros(model.B), beta) == pytest.approx(
        np.mean(np.linalg.norm(d, axis=1)))


def test_procrustes_identity_and_known_similarity():
    rng = np.random.default_rng(1)
    gt = rng.normal(size=(16, 3))
    assert procrustes_aligned_joint_error(gt, gt) == pytest.approx(0.0, abs=1e-9)
    R = Rotation.from_rotvec([0.3, -1.2, 0.5]).as_matrix()
    pred = 2.5 * gt @ R.T + [1.0, -3.0, 0.2]
    np.testing.assert_allclose(procrustes_align(pred, gt), gt, atol=1e-12)


def test_procrustes_uses_proper_rotation():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(10, 3))
    mirrored = gt * [-1, 1, 1]
    assert procrustes_aligned_joint_error(mirrored, gt) > 1.0


def test_procrustes_offset_example():
    # a rigid shift of every joint vanishes after alignment; a single bad joint does not
    gt = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    assert procrustes_aligned_joint_error(gt + 0.1, gt) == pytest.approx(0.0, abs=1e-9)
    bad = gt.copy()
    bad[3, 2] += 0.1
    assert procrustes_aligned_joint_error(bad, gt) > 0.0


def test_procrustes_degenerate():
    line = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(line, np.random.default_rng(3).normal(size=(5, 3)))
    with pytest.raises(DegenerateConfiguration):
        procrustes_align(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        procrustes_align(np.zeros((4, 3)), np.zeros((5, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_procrustes_invariant_to_similarity_of_prediction(seed):
    rng = np.random.default_rng(seed)
    gt = rng.normal(size=(12, 3))
    pred = gt + 0.05 * rng.normal(size=gt.shape)
    R = Rotation.random(random_state=seed % 1000).as_matrix()
    moved = rng.uniform(0.5, 2.0) * pred @ R.T + rng.normal(size=3)
    assert procrustes_aligned_joint_error(moved, gt) == pytest.approx(
        procrustes_aligned_joint_error(pred, gt), rel=1e-9, abs=1e-9)
    # alignment minimizes squared distances, so it never increases the RMS error
    # (the mean distance it reports can rise slightly)
    aligned = procrustes_align(pred, gt)
    assert np.sum((aligned - gt) ** 2) <= np.sum((pred - gt) ** 2) + 1e-12


def test_scenes_deterministic_and_seed_dependent(assets):
    m = assets.model
    a = make_scene(m, assets, 5, 3, noise_std=2.0)
    b = make_scene(m, assets, 5, 3, noise_std=2.0)
    c = make_scene(m, assets, 6, 3, noise_std=2.0)
    assert np.array_equal(a.detections.uv, b.detections.uv)
    assert np.array_equal(a.truth.to_vector(), b.truth.to_vector())
    assert not np.array_equal(a.truth.beta, c.truth.beta)


def test_noise_levels_share_truth(assets):
    m = assets.model
    clean = make_scene(m, assets, 7, 0, noise_std=0.0)
    noisy = make_scene(m, assets, 7, 0, noise_std=3.0)
    assert np.array_equal(clean.truth.to_vector(), noisy.truth.to_vector())
    np.testing.assert_allclose(clean.detections.uv, clean.clean_uv, atol=0)


def test_noise_statistics(assets):
    m = assets.model
    scenes = generate_scenes(m, assets, 60, noise_std=3.0, seed=8)
    e = np.concatenate([s.detections.uv - s.clean_uv for s in scenes]).ravel()
    assert abs(e.mean()) < 3 * 3.0 / np.sqrt(e.size)
    assert e.std() == pytest.approx(3.0, rel=0.08)
    with pytest.raises(ValueError):
        make_scene(m, assets, 0, 0, noise_std=-1.0)


def test_scenes_in_front_of_camera_and_in_image(assets):
    m = assets.model
    for s in generate_scenes(m, assets, 20, seed=9):
        w, h = s.image_size
        assert np.all(s.clean_uv[:, 0] >= 0) and np.all(s.clean_uv[:, 0] <= w)
        assert np.all(s.clean_uv[:, 1] >= 0) and np.all(s.clean_uv[:, 1] <= h)
        assert s.truth.gamma[2] > 0


def test_zero_free_dims_equals_baseline(assets):
    m = assets.model
    scenes = generate_scenes(m, assets, 10, seed=10)
    table = joint_subset_experiment(m, scenes, free_dims=0)
    base = mean_shape_baseline(m, scenes)
    assert all(v == pytest.approx(base, rel=1e-12) for v in table.values())


def test_known_pose_recovers_shape_from_all_joints(assets):
    m = assets.model
    s = make_scene(m, assets, 11, 0)
    beta = fit_shape_known_pose(m, s, m.joint_sets["all"])
    assert canonical_shape_error(m, beta, s.truth.beta) < 0.5 * canonical_shape_error(m, np.zeros(m.B),
                                                                                      s.truth.beta)


def test_joint_subset_ordering_small(assets):
    m = assets.model
    scenes = generate_scenes(m, assets, 20, noise_std=0.0, seed=12)
    t = joint_subset_experiment(m, scenes)
    assert t["all"] <= t["limbs12"] <= t["torso4"] < mean_shape_baseline(m, scenes)


def test_colliding_scenes_fold_arms(assets):
    m = assets.model
    from bodyfit.capsules import SphereRig, interpenetration_energy

    scenes = colliding_scenes(m, assets, 3, seed=13)
    for s in scenes:
        rig = SphereRig(m, assets.capsules, s.truth.beta)
        assert np.isfinite(interpenetration_energy(rig.cloud(s.truth.theta)))
        i = m.joint_index("l_elbow")
        assert abs(s.truth.theta[3 * i + 1]) > 1.5
