import numpy as np
import pytest

from ctbody.body_model import (BodyModelSpec, BodyParams, body_height, canonical_axis_angle, forward,
                               forward_jacobian, left_jacobian, load_model, load_params, rodrigues, save_model,
                               save_params, vertex_normals)
from ctbody.errors import DimensionMismatch, IoError

from conftest import central_difference


def quat_rotation(w):
    # independent oracle: unit quaternion -> matrix
    a = np.linalg.norm(w)
    if a == 0:
        return np.eye(3)
    q0, (q1, q2, q3) = np.cos(a / 2), np.sin(a / 2) * w / a
    return np.array([
        [1 - 2 * (q2 * q2 + q3 * q3), 2 * (q1 * q2 - q0 * q3), 2 * (q1 * q3 + q0 * q2)],
        [2 * (q1 * q2 + q0 * q3), 1 - 2 * (q1 * q1 + q3 * q3), 2 * (q2 * q3 - q0 * q1)],
        [2 * (q1 * q3 - q0 * q2), 2 * (q2 * q3 + q0 * q1), 1 - 2 * (q1 * q1 + q2 * q2)]])


def test_rodrigues_matches_quaternion(rng):
    for _ in range(50):
        w = rng.normal(size=3) * rng.uniform(0, 3)
        np.testing.assert_allclose(rodrigues(w), quat_rotation(w), atol=1e-12)


def test_rodrigues_small_angle_is_orthonormal():
    for w in (np.zeros(3), np.array([1e-9, -2e-9, 5e-10]), np.array([3e-8, 0, 0])):
        R = rodrigues(w)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(R, quat_rotation(w), atol=1e-15)


def test_left_jacobian_gives_rotation_derivative(rng):
    for _ in range(10):
        w = rng.normal(size=3)
        Jl = left_jacobian(w)
        R = rodrigues(w)
        fd = central_difference(lambda x: rodrigues(x), w)
        for i in range(3):
            v = Jl[:, i]
            K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
            np.testing.assert_allclose(fd[..., i], K @ R, atol=1e-8)


def test_canonical_axis_angle_keeps_rotation(rng):
    for _ in range(20):
        w = rng.normal(size=3) * 4.0
        c = canonical_axis_angle(w)
        assert np.linalg.norm(c) <= np.pi + 1e-12
        np.testing.assert_allclose(rodrigues(c), rodrigues(w), atol=1e-12)


def test_forward_at_rest_is_template(spec):
    p = BodyParams.zeros(spec)
    p.trans = np.array([0.1, -0.2, 0.3])
    m = forward(spec, p)
    np.testing.assert_allclose(m.vertices, spec.template_vertices + p.trans, atol=1e-14)
    np.testing.assert_allclose(m.joints, spec.joint_regressor @ spec.template_vertices + p.trans, atol=1e-14)


def test_root_rotation_rotates_whole_body(spec, rng):
    p = BodyParams(rng.normal(size=spec.n_betas), np.zeros((spec.n_joints, 3)), np.zeros(3))
    rest = forward(spec, p)
    w = np.array([0.3, -0.2, 0.5])
    p.theta[0] = w
    posed = forward(spec, p)
    j0 = rest.joints[0]
    np.testing.assert_allclose(posed.vertices, (rest.vertices - j0) @ rodrigues(w).T + j0, atol=1e-12)


def test_jacobians_match_finite_differences(tiny_spec, rng):
    spec = tiny_spec
    p = BodyParams(rng.normal(size=spec.n_betas), rng.normal(0, 0.4, (spec.n_joints, 3)), rng.normal(0, 0.1, 3))
    jac = forward_jacobian(spec, p)
    np.testing.assert_allclose(jac.mesh.vertices, forward(spec, p).vertices, atol=1e-14)

    def verts_beta(b):
        return forward(spec, BodyParams(b, p.theta, p.trans)).vertices

    def verts_theta(t):
        return forward(spec, BodyParams(p.beta, t, p.trans)).vertices

    def joints_theta(t):
        return forward(spec, BodyParams(p.beta, t, p.trans)).joints

    np.testing.assert_allclose(jac.d_vertices_d_beta, central_difference(verts_beta, p.beta), atol=1e-8)
    np.testing.assert_allclose(jac.d_vertices_d_theta, central_difference(verts_theta, p.theta), atol=1e-8)
    np.testing.assert_allclose(jac.d_joints_d_theta, central_difference(joints_theta, p.theta), atol=1e-8)


def test_params_dimension_checks(spec):
    with pytest.raises(DimensionMismatch):
        forward(spec, BodyParams(np.zeros(spec.n_betas + 1), np.zeros((spec.n_joints, 3)), np.zeros(3)))
    with pytest.raises(DimensionMismatch):
        forward(spec, BodyParams(np.zeros(spec.n_betas), np.zeros((spec.n_joints - 1, 3)), np.zeros(3)))


def test_validate_rejects_bad_weights(spec):
    W = spec.skin_weights.copy()
    W[0, 0] += 0.5
    bad = BodyModelSpec(spec.template_vertices, spec.faces, spec.shape_basis, spec.joint_regressor, spec.parent, W)
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(DimensionMismatch):
        BodyModelSpec(spec.template_vertices, spec.faces, spec.shape_basis[:-1], spec.joint_regressor,
                      spec.parent, spec.skin_weights).validate()


def test_model_file_round_trip(spec, tmp_path):
    path = tmp_path / "m.ctbm"
    save_model(spec, path)
    back = load_model(path)
    for name in ("template_vertices", "faces", "shape_basis", "joint_regressor", "parent", "skin_weights"):
        np.testing.assert_array_equal(getattr(back, name), getattr(spec, name))
    assert set(back.regions) == set(spec.regions)
    for k in spec.regions:
        np.testing.assert_array_equal(back.regions[k], spec.regions[k])


def test_model_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ctbm"
    path.write_bytes(b"NOTAMODEL" + b"\0" * 32)
    with pytest.raises(IoError):
        load_model(path)
    with pytest.raises(IoError):
        load_model(tmp_path / "missing.ctbm")


def test_params_round_trip(spec, rng, tmp_path):
    p = BodyParams(rng.normal(size=spec.n_betas), rng.normal(size=(spec.n_joints, 3)), rng.normal(size=3))
    save_params(p, tmp_path / "p.json")
    q = load_params(tmp_path / "p.json")
    np.testing.assert_array_equal(q.beta, p.beta)
    np.testing.assert_array_equal(q.theta, p.theta)
    np.testing.assert_array_equal(q.trans, p.trans)


def test_body_height_and_normals(spec):
    m = forward(spec, BodyParams.zeros(spec))
    x = spec.template_vertices[:, 0]
    assert body_height(m, 0) == pytest.approx(x.max() - x.min())
    assert body_height(m, [2.0, 0, 0]) == pytest.approx(x.max() - x.min())
    n = vertex_normals(m.vertices, spec.faces)
    np.testing.assert_allclose(np.linalg.norm(n, axis=1), 1.0, atol=1e-12)
    # outward: normals point away from the local part axis on average
    c = spec.template_vertices.mean(axis=0)
    assert np.mean(np.einsum("ij,ij->i", n, spec.template_vertices - c) > 0) > 0.7
