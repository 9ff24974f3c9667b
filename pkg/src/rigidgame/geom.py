"""Rotation algebra, the centroid-pivoted rigid action, and structural alignment metrics.

Rigid actions follow the direct-product convention: a rotation acts about the
point cloud's own centroid, so it never moves the centroid, and the translation
is added afterwards::

    x' = R (x - centroid) + centroid + r

Rotations are stored as unit quaternions ``(w, x, y, z)`` with ``w >= 0`` so that
serialised actions round-trip bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

ORTHO_TOL = 1e-9
SMALL_ANGLE = 1e-8
TM_MAX_ITER = 20


def hat(v):
    """Skew-symmetric matrix such that ``hat(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(omega) -> np.ndarray:
    """Rodrigues' formula for the rotation vector ``omega`` (angle = norm)."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = hat(omega)
    if theta < SMALL_ANGLE:
        # second-order Taylor expansion
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def _canonical_axis(axis):
    # first nonzero component positive
    for c in axis:
        if abs(c) > 1e-12:
            return axis if c > 0 else -axis
    return axis


def matrix_to_axis_angle(R) -> np.ndarray:
    """Inverse of :func:`axis_angle_to_matrix`, returning a vector of norm in ``[0, pi]``.

    At exactly ``pi`` the axis sign is ambiguous; the axis whose first nonzero
    component is positive is returned.
    """
    R = np.asarray(R, dtype=float)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    sin_t = 0.5 * np.linalg.norm(vee)
    theta = np.arctan2(sin_t, cos_t)
    if theta < SMALL_ANGLE:
        return 0.5 * vee
    if np.pi - theta > 1e-4:
        return theta / (2.0 * sin_t) * vee
    # near pi: a a^T from the symmetric part, R_sym = cos(t) I + (1 - cos(t)) a a^T
    B = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if sin_t > 1e-12:
        # orient consistently with the antisymmetric part (below that it is rounding noise)
        axis = axis if axis @ vee >= 0 else -axis
        return theta * axis
    return theta * _canonical_axis(axis)


# -- quaternions ---------------------------------------------------------------


def _quat_canonical(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    if q[0] < 0 or (q[0] == 0 and _canonical_axis(q[1:])[0] != q[1]):
        q = -q
    return q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R) -> np.ndarray:
    # Shepperd's method: pivot on the largest of w, x, y, z
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    d = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(d))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return _quat_canonical(q)


def axis_angle_to_quat(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    if theta < SMALL_ANGLE:
        q = np.concatenate([[1.0], 0.5 * omega])
    else:
        q = np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) / theta * omega])
    return _quat_canonical(q)


def quat_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def random_rotation_quat(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation: a normalised standard-normal 4-vector."""
    return _quat_canonical(rng.standard_normal(4))


def is_rotation(R, tol=ORTHO_TOL) -> bool:
    R = np.asarray(R)
    return bool(
        np.all(np.abs(R.T @ R - np.eye(3)) <= tol) and abs(np.linalg.det(R) - 1.0) <= tol
    )


# -- actions -------------------------------------------------------------------


@dataclass(frozen=True)
class RigidAction:
    """One agent's move: rotation about its own centroid, then a translation."""

    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    tr: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "quat", np.asarray(self.quat, dtype=float))
        object.__setattr__(self, "tr", np.asarray(self.tr, dtype=float))

    @classmethod
    def identity(cls) -> "RigidAction":
        return cls()

    @classmethod
    def from_matrix(cls, rot, tr=(0.0, 0.0, 0.0)) -> "RigidAction":
        return cls(matrix_to_quat(rot), tr)

    @classmethod
    def from_axis_angle(cls, omega, tr=(0.0, 0.0, 0.0)) -> "RigidAction":
        return cls(axis_angle_to_quat(omega), tr)

    @property
    def rot(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def rotvec(self) -> np.ndarray:
        return matrix_to_axis_angle(self.rot)

    def is_identity(self) -> bool:
        return bool(self.quat[0] == 1.0 and not self.quat[1:].any() and not self.tr.any())

    def inverse(self) -> "RigidAction":
        q = self.quat * np.array([1.0, -1.0, -1.0, -1.0])
        return RigidAction(_quat_canonical(q), -self.tr)


JointAction = dict  # chain index -> RigidAction, fixed chain omitted


@dataclass(frozen=True)
class TangentVector:
    """Element of T SO(3) (+) T T(3): angular rate (rad) and linear velocity (A)."""

    omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    vel: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))
        object.__setattr__(self, "vel", np.asarray(self.vel, dtype=float))

    @classmethod
    def from_array(cls, a) -> "TangentVector":
        a = np.asarray(a, dtype=float)
        return cls(a[:3], a[3:])

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.omega, self.vel])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def __add__(self, other):
        return TangentVector(self.omega + other.omega, self.vel + other.vel)

    def __mul__(self, c):
        return TangentVector(c * self.omega, c * self.vel)

    __rmul__ = __mul__


JointTangent = dict  # chain index -> TangentVector


def centroid(X) -> np.ndarray:
    return np.asarray(X, dtype=float).mean(axis=0)


def apply_action(a: RigidAction, X, pivot=None) -> np.ndarray:
    """Transform a point cloud: ``R (X - pivot) + pivot + r`` with pivot the centroid."""
    X = np.asarray(X, dtype=float)
    c = centroid(X) if pivot is None else np.asarray(pivot, dtype=float)
    if a.quat[0] == 1.0 and not a.quat[1:].any():
        return X + a.tr
    return (X - c) @ a.rot.T + c + a.tr


def compose(a_new: RigidAction, a_old: RigidAction) -> RigidAction:
    """Single action equal to applying ``a_old`` and then ``a_new``.

    Because rotations pivot on the (moving) centroid, the composition is the
    direct product: rotations multiply and translations add.
    """
    q = _quat_canonical(quat_multiply(a_new.quat, a_old.quat))
    return RigidAction(q, a_old.tr + a_new.tr)


def retract(X, tangent: TangentVector, step: float = 1.0) -> np.ndarray:
    """Exponential-map step ``exp(step * omega)`` about the centroid plus ``step * vel``."""
    return apply_action(RigidAction.from_axis_angle(step * tangent.omega, step * tangent.vel), X)


# -- alignment -----------------------------------------------------------------


class KabschResult(NamedTuple):
    rot: np.ndarray
    tr: np.ndarray
    rmsd: float
    degenerate: bool


def kabsch_align(P, Q, weights=None) -> KabschResult:
    """Rigid transform ``x -> rot @ x + tr`` minimising the RMSD from ``P`` to ``Q``.

    Collinear or coincident inputs (covariance rank < 2) get the identity rotation
    and a centroid-matching translation, flagged ``degenerate``.
    """
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Q.shape}")
    w = np.ones(len(P)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    pc = w @ P
    qc = w @ Q
    H = (P - pc).T @ ((Q - qc) * w[:, None])
    U, S, Vt = np.linalg.svd(H)
    degenerate = S[0] < 1e-12 or S[1] < 1e-9 * S[0]
    if degenerate:
        R = np.eye(3)
    else:
        d = np.sign(np.linalg.det(Vt.T @ U.T))
        D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
        R = Vt.T @ D @ U.T
    t = qc - R @ pc
    resid = P @ R.T + t - Q
    rmsd = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    return KabschResult(R, t, rmsd, bool(degenerate))


def relative_action(X_ref, X_cur) -> RigidAction:
    """The centroid-pivoted action carrying ``X_ref`` onto ``X_cur`` (both rigid copies)."""
    X_ref = np.asarray(X_ref, dtype=float)
    X_cur = np.asarray(X_cur, dtype=float)
    c_ref, c_cur = centroid(X_ref), centroid(X_cur)
    if len(X_ref) < 3:
        return RigidAction(tr=c_cur - c_ref)
    res = kabsch_align(X_ref - c_ref, X_cur - c_cur)
    return RigidAction.from_matrix(res.rot, c_cur - c_ref)


def _pair_coords(pred, truth):
    if len(pred.chains) != len(truth.chains):
        raise ValueError(f"chain count mismatch: {len(pred.chains)} vs {len(truth.chains)}")
    for i, (a, b) in enumerate(zip(pred.chains, truth.chains)):
        if len(a.coords) != len(b.coords):
            raise ValueError(
                f"chain {i} ({a.id!r}/{b.id!r}) size mismatch: {len(a.coords)} vs {len(b.coords)}"
            )
    return pred.all_coords(), truth.all_coords()


def complex_rmsd(pred, truth) -> float:
    """C-RMSD: Kabsch-superpose the concatenated complexes, then RMSD over all residues."""
    P, Q = _pair_coords(pred, truth)
    return kabsch_align(P, Q).rmsd


def tm_d0(L: int) -> float:
    return 1.24 * (L - 15) ** (1.0 / 3.0) - 1.8


def tm_from_distances(d, L=None) -> float:
    d = np.asarray(d, dtype=float)
    L = len(d) if L is None else L
    d0 = tm_d0(L)
    return float(np.sum(1.0 / (1.0 + (d / d0) ** 2)) / L)


def tm_score(pred, truth) -> float:
    """TM-score after an iterative Kabsch superposition.

    Starts from the all-residue superposition, then re-fits on residues closer than
    ``d0`` for up to 20 rounds and keeps the best score seen. This approximates
    (and never exceeds) the TM-align optimum.
    """
    P, Q = _pair_coords(pred, truth)
    L = len(P)
    if L < 16:
        raise ValueError(f"TM-score needs at least 16 residues, got {L}")
    d0 = tm_d0(L)
    mask = np.ones(L, dtype=bool)
    best = 0.0
    prev = None
    for _ in range(TM_MAX_ITER + 1):
        res = kabsch_align(P[mask], Q[mask])
        d = np.linalg.norm(P @ res.rot.T + res.tr - Q, axis=1)
        best = max(best, tm_from_distances(d, L))
        new_mask = d < d0
        if new_mask.sum() < 3:
            new_mask = np.zeros(L, dtype=bool)
            new_mask[np.argsort(d)[:3]] = True
        if prev is not None and np.array_equal(new_mask, prev):
            break
        prev = mask = new_mask
    return best
