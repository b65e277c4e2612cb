from __future__ import annotations

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadbench.mathcore import (
    IDENTITY_QUAT,
    cross,
    quat_angle_between,
    quat_derivative,
    quat_exp,
    quat_from_axis_angle,
    quat_from_yaw,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_rotmat,
    quat_yaw,
    random_quat,
    rotmat_to_quat,
    skew,
)

finite = st.floats(-10.0, 10.0, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)
raw4 = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def test_rotate_identity():
    assert np.allclose(quat_rotate(IDENTITY_QUAT, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0], atol=0)


def test_rotate_quarter_turn_about_z():
    q = quat_from_axis_angle([0, 0, 1], np.pi / 2)
    assert np.allclose(quat_rotate(q, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-15)


def test_half_turn_about_x_matrix():
    R = quat_to_rotmat(quat_from_axis_angle([1, 0, 0], np.pi))
    assert np.allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-15)
    assert np.array_equal(quat_to_rotmat(IDENTITY_QUAT), np.eye(3))


@given(raw4, vec3)
def test_rotation_preserves_norm(q, v):
    q = quat_normalize(q)
    n = np.linalg.norm(v)
    assert abs(np.linalg.norm(quat_rotate(q, v)) - n) <= 1e-12 * max(n, 1.0)


@given(raw4)
def test_rotmat_matches_rotate_and_is_orthonormal(q):
    q = quat_normalize(q)
    R = quat_to_rotmat(q)
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-9
    assert abs(np.linalg.det(R) - 1.0) <= 1e-9
    for e in np.eye(3):
        assert np.allclose(R @ e, quat_rotate(q, e), atol=1e-12)


@given(raw4, raw4, vec3)
def test_composition_is_associative(q1, q2, v):
    q1, q2 = quat_normalize(q1), quat_normalize(q2)
    lhs = quat_rotate(quat_multiply(q1, q2), v)
    rhs = quat_rotate(q1, quat_rotate(q2, v))
    assert np.allclose(lhs, rhs, atol=1e-10 * max(1.0, np.linalg.norm(v)))


@given(raw4)
def test_rotmat_round_trip(q):
    q = quat_normalize(q)
    back = rotmat_to_quat(quat_to_rotmat(q))
    assert quat_angle_between(q, back) <= 1e-7
    assert abs(np.linalg.norm(back) - 1.0) <= 1e-9


def test_rotmat_round_trip_batched_tight():
    rng = np.random.default_rng(0)
    q = random_quat(rng, 1000)
    back = rotmat_to_quat(quat_to_rotmat(q))
    assert quat_angle_between(q, back).max() <= 1e-8
    # double cover: q and -q give the same rotation matrix
    assert np.allclose(quat_to_rotmat(-q), quat_to_rotmat(q), atol=0)


def test_quat_derivative_examples():
    assert np.array_equal(quat_derivative(IDENTITY_QUAT, np.zeros(3)), np.zeros(4))
    assert np.allclose(quat_derivative(IDENTITY_QUAT, [0.0, 0.0, 2.0]), [0.0, 0.0, 0.0, 1.0])


@given(raw4, vec3)
def test_quat_derivative_is_tangent(q, w):
    q = quat_normalize(q)
    assert abs(np.dot(q, quat_derivative(q, w))) <= 1e-12 * max(1.0, np.linalg.norm(w))


def test_quat_exp_and_yaw():
    assert np.array_equal(quat_exp(np.zeros(3)), IDENTITY_QUAT)
    for yaw in (-3.0, -1.0, 0.0, 0.5, 3.1):
        assert abs(quat_yaw(quat_from_yaw(yaw)) - yaw) < 1e-12
    v = np.array([0.3, -0.2, 0.1])
    q = quat_exp(v)
    assert abs(quat_angle_between(q, IDENTITY_QUAT) - np.linalg.norm(v)) < 1e-12


@settings(max_examples=50)
@given(vec3, vec3)
def test_cross_and_skew_agree_with_numpy(a, b):
    assert np.allclose(cross(a, b), np.cross(a, b), atol=1e-12)
    assert np.allclose(skew(a) @ b, np.cross(a, b), atol=1e-12)


def test_batched_shapes():
    rng = np.random.default_rng(1)
    q = random_quat(rng, 7)
    v = rng.standard_normal((7, 3))
    assert quat_rotate(q, v).shape == (7, 3)
    assert quat_to_rotmat(q).shape == (7, 3, 3)
    assert np.allclose(quat_rotate(q, v), np.einsum("nij,nj->ni", quat_to_rotmat(q), v))
