import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from bodyfit.errors import DimensionMismatch, InvariantViolation
from bodyfit.model import BodyModel, FitParams, posed_joints, rest_joints, shaped_vertices, skinned_surface
from bodyfit.solver import numeric_jacobian

from conftest import bundled_assets, random_params


def tiny_model(**over):
    """Three parts in a line, six vertices, two shape directions."""
    V = np.array([[0, 0, 0], [0.1, 0, 0], [1, 0, 0], [1.1, 0, 0], [2, 0, 0], [2.1, 0, 0]], float)
    S = np.zeros((6, 3, 2))
    S[:, 0, 0] = np.arange(6) * 0.1
    S[:, 1, 1] = 0.05
    reg = sp.csr_matrix(np.kron(np.eye(3), [[0.5, 0.5]]))
    W = np.kron(np.eye(3), [[1.0], [1.0]])
    kw = dict(template_vertices=V, shape_dirs=S, joint_regressor=reg, parents=[-1, 0, 1],
              skin_weights=W, joint_names=["a", "b", "c"], faces=[[0, 1, 2], [2, 3, 4]])
    kw.update(over)
    return BodyModel(**kw)


def test_shaped_vertices_zero_and_one_hot(model):
    np.testing.assert_array_equal(shaped_vertices(model, np.zeros(model.B)), model.template_vertices)
    e = np.zeros(model.B)
    e[0] = 1
    np.testing.assert_allclose(shaped_vertices(model, e), model.template_vertices + model.shape_dirs[:, :, 0],
                               atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_shaped_vertices_superposition(seed):
    m = tiny_model()
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=2), rng.normal(size=2)
    lhs = shaped_vertices(m, a + b)
    rhs = shaped_vertices(m, a) + shaped_vertices(m, b) - m.template_vertices
    np.testing.assert_allclose(lhs, rhs, atol=1e-14)


def test_beta_dimension_is_checked(model):
    with pytest.raises(DimensionMismatch):
        shaped_vertices(model, np.zeros(model.B + 1))


def test_rest_joints_one_hot_and_centroid():
    reg = sp.csr_matrix(np.array([[0, 0, 0, 1.0, 0, 0], [1 / 6] * 6, [0, 0, 0, 0, 0.5, 0.5]]))
    m = tiny_model(joint_regressor=reg)
    J = rest_joints(m, np.zeros(2))
    np.testing.assert_array_equal(J[0], m.template_vertices[3])
    np.testing.assert_allclose(J[1], m.template_vertices.mean(axis=0), atol=1e-15)


def test_rest_joints_affine_in_beta_against_dense_expansion(model):
    rng = np.random.default_rng(0)
    R = model.joint_regressor.toarray()
    for _ in range(5):
        beta = rng.normal(size=model.B)
        V = model.template_vertices + np.einsum("nib,b->ni", model.shape_dirs, beta)
        np.testing.assert_allclose(rest_joints(model, beta), R @ V, atol=1e-12)


def test_posed_joints_identity_and_translation(model):
    beta = np.random.default_rng(1).normal(size=model.B)
    p = FitParams(beta, np.zeros(model.n_pose), np.zeros(3))
    np.testing.assert_allclose(posed_joints(model, p), rest_joints(model, beta), atol=1e-15)
    t = np.array([0.3, -1.0, 4.0])
    np.testing.assert_allclose(posed_joints(model, p.replace(gamma=t)), rest_joints(model, beta) + t, atol=1e-14)


def test_global_half_turn_about_z(model):
    beta = np.zeros(model.B)
    theta = np.zeros(model.n_pose)
    theta[:3] = [0, 0, np.pi]
    J = rest_joints(model, beta)
    R = np.diag([-1.0, -1.0, 1.0])
    expected = (J - J[0]) @ R.T + J[0]
    np.testing.assert_allclose(posed_joints(model, FitParams(beta, theta, np.zeros(3))), expected, atol=1e-12)


def test_skinned_rest_pose_equals_shaped(model):
    beta = np.random.default_rng(2).normal(size=model.B)
    t = np.array([0.1, 0.2, 3.0])
    mesh = skinned_surface(model, FitParams(beta, np.zeros(model.n_pose), t))
    np.testing.assert_allclose(mesh.vertices, shaped_vertices(model, beta) + t, atol=1e-14)
    assert mesh.faces.min() >= 0 and mesh.faces.max() < model.N


def test_single_part_binding():
    m = tiny_model()
    theta = np.array([0, 0, 0, 0, 0, 0.7, 0, 0, 0.0])
    params = FitParams(np.zeros(2), theta, np.zeros(3))
    chain = m.chain(params.beta, theta)
    V = skinned_surface(m, params).vertices
    # vertices 2 and 3 are bound fully to part 1
    np.testing.assert_allclose(V[2:4], chain.transform(1).apply(m.template_vertices[2:4]), atol=1e-15)


def test_global_rotation_is_rigid_motion_of_surface(model):
    beta = np.random.default_rng(3).normal(size=model.B)
    theta = np.zeros(model.n_pose)
    theta[:3] = [0.4, 1.1, -0.3]
    V = skinned_surface(model, FitParams(beta, theta, np.zeros(3))).vertices
    R = Rotation.from_rotvec(theta[:3]).as_matrix()
    j0 = rest_joints(model, beta)[0]
    expected = (shaped_vertices(model, beta) - j0) @ R.T + j0
    np.testing.assert_allclose(V, expected, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_equivariance(seed):
    m = bundled_assets().model
    rng = np.random.default_rng(seed)
    params = random_params(m, rng)
    G = Rotation.from_rotvec(rng.normal(size=3))
    t = rng.normal(size=3)
    # extra rigid motion composed onto the root
    root = Rotation.from_rotvec(params.theta[:3])
    j0 = rest_joints(m, params.beta)[0]
    theta2 = params.theta.copy()
    theta2[:3] = (G * root).as_rotvec()
    gamma2 = G.apply(j0 + params.gamma) + t - j0
    moved = params.replace(theta=theta2, gamma=gamma2)
    np.testing.assert_allclose(posed_joints(m, moved), G.apply(posed_joints(m, params)) + t, atol=1e-10)
    np.testing.assert_allclose(skinned_surface(m, moved).vertices,
                               G.apply(skinned_surface(m, params).vertices) + t, atol=1e-10)


def test_posed_joint_jacobian_matches_finite_differences(model, backend):
    rng = np.random.default_rng(4)
    for _ in range(10):
        p = random_params(model, rng)
        _, Ja = posed_joints(model, p, jacobian=True)
        Jn = numeric_jacobian(lambda x: posed_joints(model, FitParams.from_vector(x, model)).ravel(),
                              p.to_vector(), 1e-6)
        Ja = Ja.reshape(-1, Jn.shape[1])
        scale = np.abs(Jn).max()
        assert np.max(np.abs(Ja - Jn)) <= 1e-4 * scale


def test_pose_blendshapes_vanish_at_rest(model):
    rng = np.random.default_rng(5)
    P = rng.normal(size=(model.N, 3, 9 * (model.K - 1))) * 0.01
    m = BodyModel(model.template_vertices, model.shape_dirs, model.joint_regressor, model.parents,
                  model.skin_weights, model.joint_names, model.faces, pose_dirs=P)
    beta = rng.normal(size=model.B)
    V = skinned_surface(m, FitParams(beta, np.zeros(model.n_pose), np.zeros(3))).vertices
    np.testing.assert_allclose(V, shaped_vertices(m, beta), atol=1e-14)
    theta = 0.3 * rng.normal(size=model.n_pose)
    assert not np.allclose(skinned_surface(m, FitParams(beta, theta, np.zeros(3))).vertices,
                           skinned_surface(model, FitParams(beta, theta, np.zeros(3))).vertices)


def test_invariant_violations_are_all_reported():
    W = np.kron(np.eye(3), [[1.0], [1.0]])
    W[4] = [0, 0, 0.9]
    reg = sp.csr_matrix(np.array([[0.5, 0.5, 0, 0, 0, 0], [0, 0, 0, 0, 0, 0], [0, 0, 0, 0, 0.5, 0.5]]))
    with pytest.raises(InvariantViolation) as info:
        tiny_model(skin_weights=W, joint_regressor=reg, parents=[-1, 2, 1])
    paths = [p for p, _ in info.value.violations]
    assert "skin_weights[4]" in paths
    assert "joint_regressor[1]" in paths
    assert "parents[1]" in paths


def test_joint_regressor_row_sum():
    reg = sp.csr_matrix(np.kron(np.eye(3), [[0.5, 0.4]]))
    with pytest.raises(InvariantViolation) as info:
        tiny_model(joint_regressor=reg)
    assert [p for p, _ in info.value.violations] == [f"joint_regressor[{k}]" for k in range(3)]


def test_fit_params_check(model):
    p = FitParams.zeros(model)
    p.check(model)
    with pytest.raises(ValueError):
        p.replace(theta=np.full(model.n_pose, 4.0)).check(model)
    with pytest.raises(DimensionMismatch):
        p.replace(beta=np.zeros(3)).check(model)
    np.testing.assert_array_equal(FitParams.from_vector(p.to_vector(), model).to_vector(), p.to_vector())
