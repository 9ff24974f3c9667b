"""Synthetic assemblies for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .game import GameConfig, enumerate_equilibria
from .geom import random_rotation_quat, quat_to_matrix
from .potential import GamePenaltyParams
from .structio import AssemblyState, ChainStructure

CA_SPACING = 3.8


def globule(n, rng, spacing=CA_SPACING, density=0.55) -> np.ndarray:
    """``n`` points in a ball, pairwise at least ``spacing`` apart, centred at the origin."""
    radius = spacing * (n / density) ** (1.0 / 3.0) / 2.0
    pts = []
    while len(pts) < n:
        p = rng.uniform(-radius, radius, 3)
        if p @ p > radius**2:
            continue
        if all(np.linalg.norm(p - q) >= spacing for q in pts):
            pts.append(p)
        else:
            radius *= 1.0005  # guard against jamming
    X = np.array(pts)
    return X - X.mean(axis=0)


def random_assembly(sizes, rng, separation=None, fixed_index=0) -> AssemblyState:
    """Globular chains scattered around the fixed one (random orientations)."""
    chains = []
    for k, n in enumerate(sizes):
        X = globule(n, rng) @ quat_to_matrix(random_rotation_quat(rng)).T
        if k != fixed_index:
            sep = separation if separation is not None else 2.0 * CA_SPACING * n ** (1 / 3) + 4.0
            d = rng.standard_normal(3)
            X = X + sep * d / np.linalg.norm(d)
        chains.append(ChainStructure(chr(ord("A") + k), X, rng.integers(0, 20, n)))
    return AssemblyState(chains, fixed_index).normalized()


def docked_assembly(sizes, potential, seed=0, n_starts=8, steps=150):
    """Lowest-energy equilibrium of ``potential`` among multi-start games from a random placement."""
    rng = np.random.default_rng(seed)
    base = random_assembly(sizes, rng)
    cfg = GameConfig(steps=steps, eta0=0.05, eta_exponent=0.0, penalty=GamePenaltyParams(0.0, 5.0), seed=seed)
    trajs = enumerate_equilibria(base, potential, cfg, n_games=n_starts, init_noise=(3.0, "uniform"))
    return trajs[0].final
