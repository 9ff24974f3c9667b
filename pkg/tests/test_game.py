import math

import numpy as np
import pytest

from rigidgame.game import (
    GameConfig,
    GameDivergence,
    cluster_equilibria,
    cluster_states,
    enumerate_equilibria,
    play_game,
)
from rigidgame.geom import TangentVector, apply_action
from rigidgame.potential import ContactPotential, FunctionPotential, GamePenaltyParams

from conftest import point_assembly

NO_PENALTY = GamePenaltyParams(0.0, 5.0)


def centroid_quadratic(targets):
    def fn(s):
        return sum(np.sum((s.coords(i).mean(axis=0) - c) ** 2) for i, c in targets.items())

    def grad(s, i):
        return TangentVector(np.zeros(3), 2 * (s.coords(i).mean(axis=0) - targets[i]))

    return FunctionPotential(fn, grad)


def double_well(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)

    def fn(s):
        c = s.coords(1).mean(axis=0)
        return np.sum((c - a) ** 2) * np.sum((c - b) ** 2) / 100.0

    return FunctionPotential(fn)


def test_config_validation_and_eta():
    cfg = GameConfig()
    assert (cfg.steps, cfg.eta0, cfg.eta_exponent, cfg.penalty.lam) == (60, 1.0, 0.5, 0.5)
    assert cfg.eta(1) == 1.0 and cfg.eta(4) == 0.5
    for bad in (dict(steps=0), dict(eta0=0.0), dict(update_mode="x"), dict(grad_backend="x")):
        with pytest.raises(ValueError):
            GameConfig(**bad)


def test_zero_gradient_converges_immediately(two_chain):
    tr = play_game(two_chain, FunctionPotential(lambda s: 0.0, lambda s, i: TangentVector()), GameConfig(penalty=NO_PENALTY))
    assert tr.converged and tr.rounds_used == 1
    assert all(np.array_equal(s.coords(1), two_chain.coords(1)) for s in tr.states)


def test_quadratic_toy_reaches_centroid_targets(three_chain):
    targets = {i: np.array([3.0 * i, -2.0, 1.0 + i]) for i in three_chain.mobile}
    cfg = GameConfig(steps=200, eta0=0.4, penalty=NO_PENALTY)
    tr = play_game(three_chain, centroid_quadratic(targets), cfg)
    assert tr.rounds_used <= 200
    for i, c in targets.items():
        assert np.linalg.norm(tr.final.coords(i).mean(axis=0) - c) < 1e-3


def test_single_residues_settle_at_well_radius():
    s = point_assembly([0, 0, 0], [9.0, 1.0, 0])
    cfg = GameConfig(steps=200, eta0=10.0, penalty=NO_PENALTY)
    tr = play_game(s, ContactPotential(), cfg)
    assert np.linalg.norm(tr.final.coords(1)[0]) == pytest.approx(6.0, abs=1e-2)


@pytest.mark.parametrize("mode", ["simultaneous", "round_robin"])
def test_backtracking_objective_never_increases(three_chain, mode):
    cfg = GameConfig(update_mode=mode, steps=30)
    tr = play_game(three_chain, ContactPotential(), cfg)
    obj = tr.objective(cfg.penalty.lam)
    assert np.all(np.diff(obj) <= 0)
    assert len(tr.states) == len(tr.energies) == len(tr.actions) == tr.rounds_used + 1


def test_fixed_chain_never_moves(three_chain):
    tr = play_game(three_chain, ContactPotential(), GameConfig(steps=10))
    f = three_chain.fixed_index
    for s in tr.states:
        assert np.array_equal(s.coords(f), three_chain.coords(f))


def test_cumulative_actions_reproduce_states(three_chain):
    tr = play_game(three_chain, ContactPotential(), GameConfig(steps=10))
    for s, joint in zip(tr.states, tr.actions):
        for i in three_chain.mobile:
            np.testing.assert_allclose(apply_action(joint[i], three_chain.coords(i)), s.coords(i), atol=1e-9)
    assert len(tr.to_jsonl().splitlines()) == len(tr.states)


def test_finite_diff_backend_tracks_analytic(two_chain):
    a = play_game(two_chain, ContactPotential(), GameConfig(steps=5))
    b = play_game(two_chain, ContactPotential(), GameConfig(steps=5, grad_backend="finite_diff"))
    assert a.energies[-1][0] == pytest.approx(b.energies[-1][0], rel=1e-4)


def test_nan_gradient_aborts_with_diagnostics(two_chain):
    f = FunctionPotential(lambda s: 0.0, lambda s, i: TangentVector([np.nan, 0, 0], [0, 0, 0]))
    with pytest.raises(GameDivergence) as exc:
        play_game(two_chain, f, GameConfig(penalty=NO_PENALTY))
    assert exc.value.round_index == 1 and exc.value.state is two_chain


def test_failed_games_reported_not_fatal(two_chain):
    f = FunctionPotential(lambda s: float("nan"))
    trajs = enumerate_equilibria(two_chain, f, GameConfig(penalty=NO_PENALTY), n_games=3, init_noise=(1.0, "uniform"))
    assert len(trajs) == 3 and all(t.failed for t in trajs)
    with pytest.raises(ValueError):
        cluster_equilibria(trajs)


def test_single_game_without_noise_equals_play_game(two_chain):
    cfg = GameConfig(steps=15)
    (tr,) = enumerate_equilibria(two_chain, ContactPotential(), cfg, n_games=1, init_noise=(0.0, "none"))
    ref = play_game(two_chain, ContactPotential(), cfg)
    assert np.array_equal(tr.final.coords(1), ref.final.coords(1))
    assert tr.energies == ref.energies


def test_double_well_finds_both_minima():
    a, b = np.array([-6.0, 0, 0]), np.array([6.0, 0, 0])
    base = point_assembly([0, 0, 30.0], [0.0, 0.0, 0.0])
    cfg = GameConfig(steps=150, eta0=0.3, eta_exponent=0.0, penalty=NO_PENALTY)
    trajs = enumerate_equilibria(base, double_well(a, b), cfg, n_games=20, init_noise=(4.0, "uniform"))
    finals = [t.final.coords(1)[0] for t in trajs]
    assert any(np.linalg.norm(x - a) < 0.5 for x in finals)
    assert any(np.linalg.norm(x - b) < 0.5 for x in finals)
    e = [t.energies[-1][0] for t in trajs]
    assert e == sorted(e)
    clusters = cluster_equilibria(trajs, rmsd_radius=2.0)
    assert len(clusters) == 2 and sum(c.count for c in clusters) == 20
    assert len(cluster_equilibria(trajs, rmsd_radius=math.inf)) == 1


def test_identical_finals_one_cluster(two_chain):
    cl = cluster_states([two_chain] * 5, 2.0)
    assert len(cl) == 1 and cl[0].count == 5 and cl[0].members == list(range(5))


def test_parallel_games_match_serial(two_chain):
    cfg = GameConfig(steps=8)
    s = enumerate_equilibria(two_chain, ContactPotential(), cfg, n_games=4)
    p = enumerate_equilibria(two_chain, ContactPotential(), cfg, n_games=4, jobs=2)
    for a, b in zip(s, p):
        assert np.array_equal(a.final.coords(1), b.final.coords(1))
