"""Diffusion-side equilibrium sampling on the mobile chains' joint action space.

Includes a denoising score-matching loss for any score field, the exact perturbed
score of a finite mixture of point masses, and a reverse geodesic random walk
(Euler-Maruyama on the reverse VE-SDE with exponential-map rotation steps).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.special import logsumexp

from . import igso3
from .game import cluster_states
from .geom import RigidAction, TangentVector, relative_action
from .schedule import NoiseSchedule, g2, kernel_score, perturb, sigma_at
from .structio import joint_action_to_dict

log = logging.getLogger(__name__)


class SamplerDivergence(RuntimeError):
    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class ScoreFieldFn(Protocol):
    def score(self, state, t: float) -> dict: ...


@dataclass(frozen=True)
class SamplerConfig:
    n_steps: int = 50
    n_samples: int = 40
    seed: int = 0
    noise_on_final_step: bool = False
    stochastic: bool = True

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


class ZeroScore:
    def score(self, state, t):
        return {i: TangentVector() for i in state.mobile}


def _check_modes(modes, state=None):
    ref = modes[0]
    for m in modes[1:] + ([state] if state is not None else []):
        if m.sizes != ref.sizes or m.fixed_index != ref.fixed_index:
            raise ValueError(f"chain sizes {m.sizes} / fixed {m.fixed_index} do not match {ref.sizes} / {ref.fixed_index}")


class MixtureOracle:
    """Exact score of ``p_t`` when the data law is a weighted mixture of point masses.

    ``p_t`` is then a mixture of forward kernels, so the score is the
    responsibility-weighted average of per-mode kernel scores.
    """

    def __init__(self, modes, weights=None, table=None, sched=NoiseSchedule()):
        self.modes = list(modes)
        if not self.modes:
            raise ValueError("need at least one mode")
        _check_modes(self.modes)
        w = np.full(len(self.modes), 1.0 / len(self.modes)) if weights is None else np.asarray(weights, float)
        if len(w) != len(self.modes) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be non-negative and sum to 1")
        self.weights = w
        self.table = igso3.default_table() if table is None else table
        self.sched = sched

    def relative_actions(self, state):
        return [
            {i: relative_action(m.coords(i), state.coords(i)) for i in state.mobile} for m in self.modes
        ]

    def log_responsibilities(self, rel, t):
        s_rot = sigma_at(self.sched, "rot", t)
        s_tr = sigma_at(self.sched, "tr", t)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        logp = []
        for k, joint in enumerate(rel):
            lp = logw[k]
            for a in joint.values():
                w = np.linalg.norm(a.rotvec)
                lp += float(igso3.interp_logf(self.table, s_rot, w)) - 0.5 * (a.tr @ a.tr) / s_tr**2
            logp.append(lp)
        logp = np.array(logp)
        return logp - logsumexp(logp)

    def score(self, state, t) -> dict:
        _check_modes(self.modes, state)
        if not 0.0 < t <= 1.0:
            raise ValueError(f"t must lie in (0, 1], got {t}")
        rel = self.relative_actions(state)
        gamma = np.exp(self.log_responsibilities(rel, t))
        out = {i: TangentVector() for i in state.mobile}
        for g, joint in zip(gamma, rel):
            if g == 0.0:
                continue
            ks = kernel_score(joint, t, self.table, self.sched)
            for i in out:
                out[i] = out[i] + g * ks[i]
        return out


def mixture_score(o: MixtureOracle, state, t) -> dict:
    return o.score(state, t)


def dsm_loss(s, data, t_samples, table, sched: NoiseSchedule, rng, n_draws=None) -> float:
    """Monte-Carlo denoising score-matching loss.

    Each draw picks ``x0`` and ``t`` round-robin, forward-perturbs, and accumulates
    the squared tangent error against the kernel score, summed over chains and
    weighted per component by ``1 / E|kernel score|^2`` at that noise level.
    With ``s = 0`` every (chain, component) term therefore has expectation one.
    """
    data = list(data)
    t_samples = list(t_samples)
    if not data or not t_samples:
        raise ValueError("need data and t_samples")
    n = n_draws or len(data) * len(t_samples)
    total = 0.0
    for k in range(n):
        x0 = data[k % len(data)]
        t = t_samples[(k // len(data)) % len(t_samples)]
        xt, applied = perturb(x0, t, table, sched, rng)
        target = kernel_score(applied, t, table, sched)
        pred = s.score(xt, t)
        w_rot = 1.0 / igso3.expected_score_sq(table, sigma_at(sched, "rot", t))
        w_tr = sigma_at(sched, "tr", t) ** 2 / 3.0
        for i, tv in target.items():
            total += w_rot * np.sum((pred[i].omega - tv.omega) ** 2)
            total += w_tr * np.sum((pred[i].vel - tv.vel) ** 2)
    return total / n


def sample_prior(base, sched: NoiseSchedule, rng):
    """Haar-uniform rotations and ``N(0, sigma_max_tr^2)`` shifts of the mobile chains."""
    from .geom import random_rotation_quat

    joint = {i: RigidAction(random_rotation_quat(rng), sched.sigma_max_tr * rng.standard_normal(3)) for i in base.mobile}
    return base.apply(joint)


def reverse_diffuse(s, init, cfg: SamplerConfig, table, sched: NoiseSchedule, rng, from_prior=False) -> list:
    """Reverse geodesic random walk from ``t = 1`` down to ``t = 1/n_steps``.

    Per step and chain: ``delta = g^2(t) * score * dt + g(t) * sqrt(dt) * xi`` in the
    tangent space; rotations are retracted with the exponential map about the
    chain centroid. Returns the list of states including the start.
    """
    state = sample_prior(init, sched, rng) if from_prior else init
    traj = [state]
    dt = 1.0 / cfg.n_steps
    for k in range(cfg.n_steps):
        t = 1.0 - k * dt
        sc = s.score(state, t)
        noisy = cfg.stochastic and (cfg.noise_on_final_step or k < cfg.n_steps - 1)
        gr, gt = g2(sched, "rot", t), g2(sched, "tr", t)
        steps = {}
        for i in state.mobile:
            tv = sc[i]
            if not (np.all(np.isfinite(tv.omega)) and np.all(np.isfinite(tv.vel))):
                raise SamplerDivergence(f"non-finite score at step {k} (t={t:.4f})", state, k)
            d_rot = gr * tv.omega * dt
            d_tr = gt * tv.vel * dt
            if noisy:
                d_rot = d_rot + np.sqrt(gr * dt) * rng.standard_normal(3)
                d_tr = d_tr + np.sqrt(gt * dt) * rng.standard_normal(3)
            steps[i] = RigidAction.from_axis_angle(d_rot, d_tr)
        state = state.apply(steps)
        traj.append(state)
    return traj


def trajectory_to_jsonl(traj, potential=None, penalty=None) -> str:
    """Same line format as game trajectories; actions are relative to the first state."""
    start = traj[0]
    lines = []
    for k, st in enumerate(traj):
        rel = {i: relative_action(start.coords(i), st.coords(i)) for i in st.mobile}
        e = None if potential is None else float(potential.evaluate(st))
        p = None if penalty is None else float(penalty(st))
        lines.append(json.dumps({"round": k, "chains": joint_action_to_dict(rel), "potential": e, "penalty": p}))
    return "\n".join(lines) + "\n"


@dataclass
class SampleResult:
    trajectories: list  # per sample: list of states, or None on failure
    errors: list
    clusters: list

    @property
    def finals(self):
        return [tr[-1] for tr in self.trajectories if tr is not None]


def _one_sample(args):
    s, base, cfg, table, sched, seed_seq = args
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    try:
        return reverse_diffuse(s, base, cfg, table, sched, rng, from_prior=True), None
    except (SamplerDivergence, FloatingPointError, ValueError) as exc:
        log.warning("sample failed: %s", exc)
        return None, str(exc)


def sample_equilibria(s, base, cfg: SamplerConfig = SamplerConfig(), table=None, sched=NoiseSchedule(), cluster_radius=2.0, jobs=1) -> SampleResult:
    """``n_samples`` independent reverse diffusions from the prior, clustered by C-RMSD."""
    table = igso3.default_table() if table is None else table
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_samples)
    args = [(s, base, cfg, table, sched, sq) for sq in seeds]
    if jobs and jobs > 1 and cfg.n_samples > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_sample, args))
    else:
        results = [_one_sample(a) for a in args]
    trajs = [r[0] for r in results]
    errors = [r[1] for r in results]
    finals = [tr[-1] for tr in trajs if tr is not None]
    clusters = cluster_states(finals, cluster_radius) if finals else []
    return SampleResult(trajs, errors, clusters)
