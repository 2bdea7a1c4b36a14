import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloam.core import (
    RigidTransform,
    SurfaceKind,
    SurfaceModel,
    apply_transform,
    compose,
    inverse,
    matrix_to_quat,
    project_along_normal,
    projectors,
    quat_multiply,
    quat_rotate,
    quat_to_matrix,
    skew,
)


def random_transform(rng, max_t=5.0, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return RigidTransform.from_rotvec(axis * rng.uniform(0, max_angle), rng.uniform(-max_t, max_t, 3))


def homogeneous(T):
    # independent oracle: build the 4x4 from the quaternion sandwich applied to basis vectors
    M = np.eye(4)
    M[:3, :3] = np.column_stack([quat_rotate(T.q, e) for e in np.eye(3)])
    M[:3, 3] = T.t
    return M


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
quat = st.tuples(*[st.floats(-1, 1) for _ in range(4)]).filter(lambda q: np.linalg.norm(q) > 1e-3).map(np.array)


def test_apply_identity_and_translation():
    assert np.allclose(apply_transform(RigidTransform.identity(), [3, 4, 5]), [3, 4, 5])
    T = RigidTransform([1, 0, 0], [1, 0, 0, 0])
    assert np.allclose(T.apply([0, 0, 0]), [1, 0, 0])


def test_rotation_about_z():
    T = RigidTransform.from_rotvec([0, 0, np.pi / 2])
    assert np.allclose(T.apply([1, 0, 0]), [0, 1, 0], atol=1e-9)


def test_quaternion_sandwich_matches_matrix():
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        p = rng.normal(size=3)
        assert np.allclose(quat_rotate(q, p), quat_to_matrix(q) @ p, atol=1e-12)


def test_quat_multiply_is_rotation_composition():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=4), rng.normal(size=4)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    assert np.allclose(quat_to_matrix(quat_multiply(a, b)), quat_to_matrix(a) @ quat_to_matrix(b), atol=1e-12)


@given(quat)
def test_matrix_to_quat_round_trip(q):
    q = q / np.linalg.norm(q)
    q2 = matrix_to_quat(quat_to_matrix(q))
    assert np.isclose(abs(q @ q2), 1.0, atol=1e-9)


def test_compose_matches_homogeneous_oracle():
    rng = np.random.default_rng(2)
    A, B = random_transform(rng), random_transform(rng)
    pts = rng.uniform(-10, 10, (100, 3))
    expected = (homogeneous(A) @ homogeneous(B) @ np.c_[pts, np.ones(100)].T).T[:, :3]
    assert np.allclose(compose(A, B).apply(pts), expected, atol=1e-9)
    assert np.allclose(compose(A, B).apply(pts), A.apply(B.apply(pts)), atol=1e-9)


def test_inverse_matches_homogeneous_oracle():
    rng = np.random.default_rng(3)
    T = random_transform(rng)
    pts = rng.uniform(-10, 10, (100, 3))
    expected = (np.linalg.inv(homogeneous(T)) @ np.c_[pts, np.ones(100)].T).T[:, :3]
    assert np.allclose(inverse(T).apply(pts), expected, atol=1e-9)
    assert np.allclose(inverse(T).apply(T.apply(pts)), pts, atol=1e-9)


def test_inverse_simple_cases():
    I = inverse(RigidTransform.identity())
    assert np.allclose(I.t, 0) and np.allclose(I.q, [1, 0, 0, 0])
    T = inverse(RigidTransform([1, 2, 3], [1, 0, 0, 0]))
    assert np.allclose(T.t, [-1, -2, -3]) and np.allclose(T.q, [1, 0, 0, 0])


def test_compose_with_identity_and_inverse():
    rng = np.random.default_rng(4)
    T = random_transform(rng)
    Ti = compose(RigidTransform.identity(), T)
    assert np.allclose(Ti.t, T.t) and np.isclose(abs(Ti.q @ T.q), 1.0)
    dt, dr = RigidTransform.identity().delta(compose(T, inverse(T)))
    assert dt < 1e-9 and dr < 1e-9


@settings(max_examples=50)
@given(st.integers(0, 2**31 - 1))
def test_isometry_and_unit_norm_after_chains(seed):
    rng = np.random.default_rng(seed)
    T = RigidTransform.identity()
    for _ in range(20):
        T = compose(T, random_transform(rng)) if rng.uniform() < 0.7 else inverse(T)
    assert abs(np.linalg.norm(T.q) - 1.0) < 1e-9
    a, b = rng.normal(size=(2, 3)) * 10
    assert np.isclose(np.linalg.norm(T.apply(a) - T.apply(b)), np.linalg.norm(a - b), atol=1e-9)


def test_rotvec_round_trip_and_angle():
    rv = np.array([0.1, -0.2, 0.3])
    T = RigidTransform.from_rotvec(rv, [1, 2, 3])
    assert np.allclose(T.rotvec(), rv, atol=1e-12)
    assert np.isclose(T.rotation_angle(), np.linalg.norm(rv))


def test_transform_rejects_non_finite():
    with pytest.raises(ValueError):
        RigidTransform([np.nan, 0, 0], [1, 0, 0, 0])


def test_transform_is_immutable():
    T = RigidTransform.identity()
    with pytest.raises(ValueError):
        T.t[0] = 1.0


def test_skew_is_cross_product():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-2.0, 0.5, 4.0])
    assert np.allclose(skew(a) @ b, np.cross(a, b))


def test_project_along_normal_axis_cases():
    plane = SurfaceModel(SurfaceKind.PLANE, [0, 0, 0], [0, 0, 1])
    line = SurfaceModel(SurfaceKind.LINE, [0, 0, 0], [1, 0, 0])
    assert np.allclose(project_along_normal(plane, [1, 2, 3]), [0, 0, 3])
    assert np.allclose(project_along_normal(line, [1, 2, 3]), [0, 2, 3])


def test_project_along_oblique_normal():
    n = np.ones(3) / np.sqrt(3)
    plane = SurfaceModel(SurfaceKind.PLANE, [0, 0, 0], n)
    assert np.allclose(project_along_normal(plane, [1, 0, 0]), np.outer(n, n) @ [1, 0, 0], atol=1e-12)
    assert np.allclose(project_along_normal(plane, [1, 0, 0]), [1 / 3] * 3, atol=1e-12)


def test_project_along_normal_batches():
    plane = SurfaceModel(SurfaceKind.PLANE, [0, 0, 0], [0, 0, 2])
    u = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, -6.0]])
    assert np.allclose(project_along_normal(plane, u), [[0, 0, 3], [0, 0, -6]])


@given(vec3, vec3)
def test_projector_idempotent_and_complementary(d, u):
    if np.linalg.norm(d) < 1e-3:
        d = np.array([0.0, 0.0, 1.0])
    d = d / np.linalg.norm(d)
    P_plane, P_line = projectors([True, False], [d, d])
    scale = max(1.0, np.linalg.norm(u))
    for P in (P_plane, P_line):
        assert np.allclose(P @ (P @ u), P @ u, atol=1e-12 * scale)
    assert np.allclose(P_plane @ u + P_line @ u, u, atol=1e-12 * scale)


def test_surface_model_distance_and_unit_direction():
    m = SurfaceModel(SurfaceKind.LINE, [0, 0, 0], [0, 0, 5])
    assert np.isclose(np.linalg.norm(m.direction), 1.0)
    assert np.isclose(m.distance([3, 4, 10]), 5.0)
