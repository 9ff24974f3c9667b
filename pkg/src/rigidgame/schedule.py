"""VE-SDE noise schedules and the forward transition kernel on the mobile chains."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import igso3
from .geom import RigidAction, TangentVector


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min_tr: float = 0.01
    sigma_max_tr: float = 25.0
    sigma_min_rot: float = 0.01
    sigma_max_rot: float = 1.65

    def __post_init__(self):
        if not 0 < self.sigma_min_tr < self.sigma_max_tr:
            raise ValueError("need 0 < sigma_min_tr < sigma_max_tr")
        if not 0 < self.sigma_min_rot < self.sigma_max_rot:
            raise ValueError("need 0 < sigma_min_rot < sigma_max_rot")

    def bounds(self, component):
        if component == "tr":
            return self.sigma_min_tr, self.sigma_max_tr
        if component == "rot":
            return self.sigma_min_rot, self.sigma_max_rot
        raise ValueError(f"component must be 'rot' or 'tr', got {component!r}")


def sigma_at(sched: NoiseSchedule, component: str, t: float) -> float:
    """Exponential schedule ``sigma_min^(1-t) * sigma_max^t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    lo, hi = sched.bounds(component)
    return float(lo ** (1.0 - t) * hi**t)


def g2(sched: NoiseSchedule, component: str, t: float) -> float:
    """Diffusion coefficient squared, ``d[var]/dt``, in tangent units.

    Translations: ``var = sigma^2``. Rotations: the kernel at ``sigma`` is Brownian
    motion run for ``2 sigma^2`` (see :mod:`igso3`), hence the extra factor 2.
    """
    lo, hi = sched.bounds(component)
    base = 2.0 * sigma_at(sched, component, t) ** 2 * np.log(hi / lo)
    return float(2.0 * base if component == "rot" else base)


def perturb(state, t, table, sched: NoiseSchedule, rng):
    """Forward-noise every mobile chain independently; returns ``(state, JointAction)``.

    Rotations are IGSO(3) draws applied about each chain's own centroid; translations
    are isotropic Gaussian with std ``sigma_tr(t)``.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    s_rot = sigma_at(sched, "rot", t)
    s_tr = sigma_at(sched, "tr", t)
    joint = {}
    for i in state.mobile:
        R = igso3.draw_rotation(table, s_rot, rng)
        joint[i] = RigidAction.from_matrix(R, s_tr * rng.standard_normal(3))
    return state.apply(joint), joint


def kernel_score(applied: dict, t, table, sched: NoiseSchedule) -> dict:
    """Score of ``log p(x_t | x_0)`` given the applied forward action per chain.

    Angular part ``dlogf(w) * axis`` of the applied rotation, linear part ``-r / sigma^2``.
    """
    s_rot = sigma_at(sched, "rot", t)
    s_tr = sigma_at(sched, "tr", t)
    out = {}
    for i, a in applied.items():
        out[i] = TangentVector(igso3.rotvec_score(table, s_rot, a.rotvec), -a.tr / s_tr**2)
    return out


def log_kernel_density(applied: dict, t, sched: NoiseSchedule, table=None) -> float:
    """``log p(x_t | x_0)`` w.r.t. Haar x Lebesgue, from the exact series (or ``table`` if given)."""
    s_rot = sigma_at(sched, "rot", t)
    s_tr = sigma_at(sched, "tr", t)
    total = 0.0
    for a in applied.values():
        w = np.linalg.norm(a.rotvec)
        if table is None:
            lf = float(igso3.log_f(np.array([max(w, 1e-12)]), s_rot)[0][0])
        else:
            lf = float(igso3.interp_logf(table, s_rot, w))
        total += lf - 0.5 * (a.tr @ a.tr) / s_tr**2 - 1.5 * np.log(2 * np.pi * s_tr**2)
    return total
