"""Equilibrium computation by Riemannian gradient play on (SO(3) x T(3))^(N-1).

Every mobile chain descends the shared objective ``f + lam * penalty``, where the
penalty sums the residue-distance ReLU over chain pairs. Updates are retracted with
the exponential map about each chain's current centroid.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geom import RigidAction, compose, complex_rmsd
from .potential import GamePenaltyParams, distance_penalty, penalty_grad, riemannian_grad
from .structio import generate_decoys, joint_action_to_dict

log = logging.getLogger(__name__)


class GameDivergence(RuntimeError):
    """Non-finite gradient or objective during play."""

    def __init__(self, message, state=None, round_index=None):
        super().__init__(message)
        self.state = state
        self.round_index = round_index


@dataclass(frozen=True)
class GameConfig:
    steps: int = 60
    eta0: float = 1.0
    eta_exponent: float = 0.5
    penalty: GamePenaltyParams = field(default_factory=GamePenaltyParams)
    update_mode: str = "simultaneous"  # or "round_robin"
    grad_backend: str = "analytic"  # or "finite_diff"
    convergence_tol: float = 1e-4
    backtracking: bool = True
    max_halvings: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if self.update_mode not in ("simultaneous", "round_robin"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if self.grad_backend not in ("analytic", "finite_diff"):
            raise ValueError(f"unknown grad_backend {self.grad_backend!r}")

    def eta(self, t: int) -> float:
        """Step size for round ``t >= 1``: ``eta0 * t^(-eta_exponent)``."""
        return self.eta0 * t ** (-self.eta_exponent)


@dataclass
class GameTrajectory:
    states: list
    actions: list  # cumulative JointAction from the initial state, per snapshot
    energies: list  # (potential, penalty) per snapshot
    converged: bool = False
    rounds_used: int = 0
    error: str = None

    @property
    def final(self):
        return self.states[-1]

    @property
    def failed(self) -> bool:
        return self.error is not None

    def objective(self, lam) -> list:
        return [p + lam * q for p, q in self.energies]

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {"round": k, "chains": joint_action_to_dict(a), "potential": e[0], "penalty": e[1]}
            )
            for k, (a, e) in enumerate(zip(self.actions, self.energies))
        ]
        return "\n".join(lines) + "\n"


def agent_gradient(f, state, i, cfg: GameConfig) -> np.ndarray:
    g = riemannian_grad(f, state, i, cfg.grad_backend)
    if cfg.penalty.lam:
        g = g + cfg.penalty.lam * penalty_grad(state, cfg.penalty, i)
    return g.as_array()


def _move(state, grads: dict, eta: float):
    steps = {i: RigidAction.from_axis_angle(-eta * g[:3], -eta * g[3:]) for i, g in grads.items()}
    return state.apply(steps), steps


def _check_finite(values, state, round_index):
    if not np.all(np.isfinite(values)):
        raise GameDivergence(f"non-finite gradient or objective in round {round_index}", state, round_index)


def play_game(init, f, cfg: GameConfig = GameConfig()) -> GameTrajectory:
    """Descend ``f + lam * penalty`` for ``cfg.steps`` rounds (early stop at convergence).

    In simultaneous mode all tangents are computed at the current state and applied
    together; in round-robin mode chains move one at a time in index order. With
    backtracking, the step is halved until the objective does not increase (a step
    that still increases after ``max_halvings`` is rejected).
    """
    lam = cfg.penalty.lam

    def energies(s):
        return float(f.evaluate(s)), float(distance_penalty(s, cfg.penalty))

    state = init
    cum = {i: RigidAction.identity() for i in init.mobile}
    e = energies(state)
    _check_finite(e, state, 0)
    traj = GameTrajectory([state], [dict(cum)], [e])

    def try_step(state, grads, eta, obj):
        for _ in range(cfg.max_halvings + 1 if cfg.backtracking else 1):
            cand, steps = _move(state, grads, eta)
            ce = energies(cand)
            _check_finite(ce, cand, t)
            if not cfg.backtracking or ce[0] + lam * ce[1] <= obj:
                return cand, steps, ce
            eta *= 0.5
        return state, {}, None

    for t in range(1, cfg.steps + 1):
        eta = cfg.eta(t)
        obj = e[0] + lam * e[1]
        if cfg.update_mode == "simultaneous":
            grads = {i: agent_gradient(f, state, i, cfg) for i in state.mobile}
            _check_finite(list(grads.values()), state, t)
            if max(np.linalg.norm(g) for g in grads.values()) < cfg.convergence_tol:
                traj.converged = True
            else:
                state, steps, ce = try_step(state, grads, eta, obj)
                if ce is not None:
                    e = ce
                    for i, a in steps.items():
                        cum[i] = compose(a, cum[i])
        else:
            norms = []
            for i in state.mobile:
                g = agent_gradient(f, state, i, cfg)
                _check_finite(g, state, t)
                norms.append(np.linalg.norm(g))
                if norms[-1] < cfg.convergence_tol:
                    continue
                state, steps, ce = try_step(state, {i: g}, eta, e[0] + lam * e[1])
                if ce is not None:
                    e = ce
                    cum[i] = compose(steps[i], cum[i])
            traj.converged = max(norms) < cfg.convergence_tol
        traj.states.append(state)
        traj.actions.append(dict(cum))
        traj.energies.append(e)
        traj.rounds_used = t
        if traj.converged:
            break
    return traj


def max_tangent_norm(f, state, cfg: GameConfig) -> float:
    return max(np.linalg.norm(agent_gradient(f, state, i, cfg)) for i in state.mobile)


def _play_one(args):
    init, f, cfg = args
    try:
        return play_game(init, f, cfg)
    except (GameDivergence, FloatingPointError, ValueError) as exc:
        log.warning("game failed: %s", exc)
        return GameTrajectory([init], [{}], [(math.nan, math.nan)], error=str(exc))


def enumerate_equilibria(base, f, cfg: GameConfig = GameConfig(), n_games=20, init_noise=(5.0, "uniform"), jobs=1) -> list:
    """Play ``n_games`` games from random initial placements; sorted by final potential.

    Failed games are kept (with ``error`` set) and sorted last.
    """
    if n_games < 1:
        raise ValueError("n_games must be >= 1")
    tr_scale, rot_mode = init_noise
    starts = generate_decoys(base, n_games, tr_scale, rot_mode, seed=cfg.seed)
    inits = list(starts.states())
    args = [(s, f, cfg) for s in inits]
    if jobs and jobs > 1 and n_games > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trajs = list(pool.map(_play_one, args))
    else:
        trajs = [_play_one(a) for a in args]
    return sorted(trajs, key=lambda tr: (tr.failed, tr.energies[-1][0] if not tr.failed else 0.0))


@dataclass
class Cluster:
    representative: object
    count: int
    members: list
    energy: float = None


def cluster_states(states, rmsd_radius, energies=None) -> list:
    """Greedy clustering by C-RMSD; members visit in ascending energy (or input order)."""
    order = list(range(len(states))) if energies is None else list(np.argsort(energies, kind="stable"))
    clusters = []
    for k in order:
        for c in clusters:
            if math.isinf(rmsd_radius) or complex_rmsd(states[k], c.representative) <= rmsd_radius:
                c.members.append(int(k))
                c.count += 1
                break
        else:
            e = None if energies is None else float(energies[k])
            clusters.append(Cluster(states[k], 1, [int(k)], e))
    return clusters


def cluster_equilibria(trajs, rmsd_radius=2.0) -> list:
    """Group final states; each cluster's representative is its lowest-energy member."""
    ok = [tr for tr in trajs if not tr.failed]
    if not ok:
        raise ValueError("no successful trajectories to cluster")
    return cluster_states([tr.final for tr in ok], rmsd_radius, [tr.energies[-1][0] for tr in ok])
