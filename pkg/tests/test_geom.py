import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from rigidgame.geom import (
    RigidAction,
    apply_action,
    axis_angle_to_matrix,
    centroid,
    complex_rmsd,
    compose,
    is_rotation,
    kabsch_align,
    matrix_to_axis_angle,
    matrix_to_quat,
    quat_to_matrix,
    relative_action,
    tm_d0,
    tm_from_distances,
    tm_score,
)
from rigidgame.structio import AssemblyState, ChainStructure

from conftest import random_rotation

vec3 = st.lists(st.floats(-3.0, 3.0, allow_nan=False), min_size=3, max_size=3).map(np.array)


def test_axis_angle_identity():
    assert np.array_equal(axis_angle_to_matrix([0, 0, 0]), np.eye(3))


def test_axis_angle_half_turn_about_z():
    R = axis_angle_to_matrix([0, 0, np.pi])
    np.testing.assert_allclose(R, np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_quarter_turn_about_x_maps_y_to_z():
    R = axis_angle_to_matrix([np.pi / 2, 0, 0])
    np.testing.assert_allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)


def test_matrix_to_axis_angle_identity():
    assert np.array_equal(matrix_to_axis_angle(np.eye(3)), np.zeros(3))


def test_matrix_to_axis_angle_unit_roundtrip():
    v = np.array([0.6, -0.8, 0.0])
    np.testing.assert_allclose(matrix_to_axis_angle(axis_angle_to_matrix(v)), v, atol=1e-12)


@pytest.mark.parametrize("axis", [[0, 0, 1], [0, 0, -1], [1, 1, 0], [0, -1, 1]])
def test_half_turn_axis_sign_is_canonical(axis):
    axis = np.array(axis, float) / np.linalg.norm(axis)
    v = matrix_to_axis_angle(axis_angle_to_matrix(np.pi * axis))
    assert np.isclose(np.linalg.norm(v), np.pi)
    first = v[np.nonzero(np.abs(v) > 1e-9)[0][0]]
    assert first > 0
    np.testing.assert_allclose(np.abs(v), np.pi * np.abs(axis), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(vec3)
def test_rodrigues_is_rotation(v):
    assert is_rotation(axis_angle_to_matrix(v))


@settings(max_examples=300, deadline=None)
@given(vec3)
def test_axis_angle_roundtrip(v):
    n = np.linalg.norm(v)
    if not 1e-6 < n < np.pi - 1e-6:
        return
    np.testing.assert_allclose(matrix_to_axis_angle(axis_angle_to_matrix(v)), v, atol=1e-8)


def test_near_pi_roundtrip():
    axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
    for eps in [1e-3, 1e-5, 1e-7]:
        v = (np.pi - eps) * axis
        R = axis_angle_to_matrix(v)
        np.testing.assert_allclose(axis_angle_to_matrix(matrix_to_axis_angle(R)), R, atol=1e-8)


def test_quaternion_roundtrip(rng):
    for _ in range(50):
        R = random_rotation(rng)
        np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-14)


def test_apply_identity_and_translation(rng):
    X = rng.normal(size=(7, 3))
    assert np.array_equal(apply_action(RigidAction(), X), X)
    np.testing.assert_allclose(apply_action(RigidAction(tr=[1, 2, 3]), X), X + [1, 2, 3], atol=0)


def test_rotation_keeps_centroid(rng):
    X = rng.normal(size=(9, 3)) * 4 + 10
    Y = apply_action(RigidAction.from_matrix(random_rotation(rng)), X, centroid(X))
    np.testing.assert_allclose(centroid(Y), centroid(X), atol=1e-9)


def test_apply_preserves_distances(rng):
    X = rng.normal(size=(12, 3)) * 5
    a = RigidAction.from_matrix(random_rotation(rng), rng.normal(size=3))
    Y = apply_action(a, X)
    d = lambda Z: np.linalg.norm(Z[:, None] - Z[None], axis=-1)
    np.testing.assert_allclose(d(Y), d(X), atol=1e-9)
    np.testing.assert_allclose(centroid(Y), centroid(X) + a.tr, atol=1e-12)


def test_compose_matches_sequential(rng):
    X = rng.normal(size=(10, 3)) * 3
    for _ in range(20):
        a = RigidAction.from_matrix(random_rotation(rng), rng.normal(size=3))
        b = RigidAction.from_matrix(random_rotation(rng), rng.normal(size=3))
        np.testing.assert_allclose(apply_action(compose(b, a), X), apply_action(b, apply_action(a, X)), atol=1e-9)


def test_compose_identity_and_inverse(rng):
    X = rng.normal(size=(10, 3))
    a = RigidAction.from_matrix(random_rotation(rng), rng.normal(size=3))
    np.testing.assert_allclose(apply_action(compose(RigidAction(), a), X), apply_action(a, X), atol=1e-12)
    # the inverse of a centroid-pivoted action is (R^T, -r)
    inv = RigidAction.from_matrix(a.rot.T, -a.tr)
    np.testing.assert_allclose(apply_action(compose(inv, a), X), X, atol=1e-9)
    np.testing.assert_allclose(apply_action(compose(a.inverse(), a), X), X, atol=1e-9)


def test_translations_compose_additively():
    c = compose(RigidAction(tr=[1, 0, 2]), RigidAction(tr=[0, 3, -1]))
    np.testing.assert_allclose(c.tr, [1, 3, 1])
    assert np.array_equal(c.quat, [1, 0, 0, 0])


def test_kabsch_identity(rng):
    P = rng.normal(size=(8, 3))
    res = kabsch_align(P, P)
    assert res.rmsd < 1e-9
    np.testing.assert_allclose(res.rot, np.eye(3), atol=1e-9)


def test_kabsch_recovers_rigid_motion(rng):
    P = rng.normal(size=(15, 3)) * 5
    R = random_rotation(rng)
    Q = P @ R.T + rng.normal(size=3) * 10
    res = kabsch_align(P, Q)
    assert res.rmsd < 1e-7
    np.testing.assert_allclose(res.rot, R, atol=1e-9)
    assert np.linalg.det(res.rot) > 0


def _brute_force_rmsd(P, Q, rng, starts=40):
    """Minimise RMSD over rotation vectors from many starts (no SVD involved)."""
    Pc, Qc = P - P.mean(0), Q - Q.mean(0)

    def msd(v):
        return np.mean(np.sum((Pc @ axis_angle_to_matrix(v).T - Qc) ** 2, axis=1))

    best = np.inf
    for _ in range(starts):
        v0 = rng.uniform(-np.pi, np.pi, 3)
        r = minimize(msd, v0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 5000})
        best = min(best, r.fun)
    return np.sqrt(best)


def test_kabsch_matches_brute_force(rng):
    for _ in range(3):
        P = rng.normal(size=(8, 3)) * 3
        Q = P @ random_rotation(rng).T + rng.normal(size=(8, 3)) * 0.5
        assert abs(kabsch_align(P, Q).rmsd - _brute_force_rmsd(P, Q, rng)) < 1e-3


def test_kabsch_handles_reflection_case():
    P = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 0, 0]])
    Q = P * [1, 1, -1]  # mirror image: proper rotation required
    res = kabsch_align(P, Q)
    assert np.linalg.det(res.rot) > 0


def test_kabsch_degenerate_collinear():
    P = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    Q = P + [5, 0, 0]
    res = kabsch_align(P, Q)
    assert res.degenerate
    np.testing.assert_array_equal(res.rot, np.eye(3))
    np.testing.assert_allclose(res.tr, [5, 0, 0])


def test_relative_action_recovers_applied(rng):
    X = rng.normal(size=(10, 3)) * 4
    a = RigidAction.from_matrix(random_rotation(rng), rng.normal(size=3))
    b = relative_action(X, apply_action(a, X))
    np.testing.assert_allclose(b.rot, a.rot, atol=1e-10)
    np.testing.assert_allclose(b.tr, a.tr, atol=1e-12)


def _asm(*chains):
    return AssemblyState([ChainStructure(chr(65 + k), c) for k, c in enumerate(chains)], 0)


def test_complex_rmsd_zero_and_rigid(rng, two_chain):
    assert complex_rmsd(two_chain, two_chain) < 1e-12
    moved = two_chain.rigid_motion(random_rotation(rng), rng.normal(size=3) * 20)
    assert complex_rmsd(moved, two_chain) < 1e-7


def test_complex_rmsd_hand_example():
    # chain B shifted 2 A along z; the best tilt about x leaves residual sqrt(2.5^2 + 1) - 2.5 per point
    A = [[-1.0, 0, 0], [1.0, 0, 0]]
    B = [[-1.0, 5, 0], [1.0, 5, 0]]
    truth = _asm(A, B)
    pred = _asm(A, np.array(B) + [0, 0, 2])
    assert complex_rmsd(pred, truth) == pytest.approx(np.sqrt(7.25) - 2.5, abs=1e-12)


def test_complex_rmsd_chain_mismatch(two_chain):
    other = _asm(np.zeros((3, 3)) + np.arange(3)[:, None], np.ones((2, 3)))
    with pytest.raises(ValueError):
        complex_rmsd(two_chain, other)


def test_tm_formula_values():
    assert tm_d0(20) == pytest.approx(1.24 * 5 ** (1 / 3) - 1.8)
    assert tm_d0(20) == pytest.approx(0.3204, abs=1e-4)
    assert tm_from_distances(np.full(30, tm_d0(30))) == pytest.approx(0.5)


def test_tm_identity_and_invariance(rng, two_chain):
    assert tm_score(two_chain, two_chain) == pytest.approx(1.0, abs=1e-12)
    noisy = two_chain.with_chain_coords({1: two_chain.coords(1) + rng.normal(size=(8, 3))})
    tm = tm_score(noisy, two_chain)
    R, t = random_rotation(rng), rng.normal(size=3)
    assert tm_score(noisy.rigid_motion(R, t), two_chain.rigid_motion(R, t)) == pytest.approx(tm, abs=1e-9)
    assert 0 < tm < 1


def test_tm_needs_16_residues():
    s = _asm(np.arange(21.0).reshape(7, 3), np.arange(24.0).reshape(8, 3))
    with pytest.raises(ValueError):
        tm_score(s, s)
