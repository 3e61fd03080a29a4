import csv

import numpy as np
import pytest

from budgetpose.energymodel import EnergyNet
from budgetpose.refine import refine
from budgetpose.sampling import simulate
from budgetpose.scene import SceneConfig, generate_scene, sample_hypothesis_pool
from budgetpose.train import (EpisodeParams, GradientTables, PrecomputedStates, ShapeMismatch, TrainConfig,
                              efficient_gradient, energies_for, estimate_baseline, finalize_gradient,
                              naive_reinforce_gradient, precompute_chains, precompute_states,
                              sample_and_accumulate, sgd_momentum_step, skip_reason, training_loop, write_log)
from budgetpose.scene import ConfigError
from enumeration import exact_energy_gradient, expected_reward, tiny_instance

P = EpisodeParams(budget=12, tau_max=2, m_max=4)


def test_tau_zero_gives_one_state_per_hypothesis(noisy_scene, noisy_pool):
    pre = precompute_states(noisy_scene, noisy_pool, EnergyNet.initialize(0), 0, 4)
    assert pre.E.shape == (len(noisy_pool), 1)


def test_full_scale_pool_state_count(noisy_scene):
    pool = sample_hypothesis_pool(noisy_scene, 210, 1)
    net = EnergyNet.initialize(0)
    pre = precompute_states(noisy_scene, pool, net, 3, 10)
    assert pre.E.size == 840 and net.forward_count == 840


def test_chain_matches_sequential_refinement(noisy_scene, noisy_pool):
    ch = precompute_chains(noisy_scene, noisy_pool, 3, 4)
    for a in (0, 5):
        pose = noisy_pool[a]
        assert ch.poses[a][0] is pose
        for tau in range(3):
            res = refine(noisy_scene, pose, 4)
            pose = res.refined_pose
            assert ch.poses[a][tau + 1].to_list() == pose.to_list()
            assert ch.cost[a, tau] == res.steps_used


def _tables(E, Ep, cost, correct, budget, m_max, tau_max, M, baseline, key=1):
    return simulate(E, Ep, cost, correct, budget, m_max, tau_max, key, 0, M, baseline, False, True, True)


def test_centered_rewards_give_zero_tables():
    n = 4
    E = np.random.default_rng(0).normal(size=(n, 3))
    correct = np.ones((n, 3), dtype=bool)
    _, _, D, Dp, _ = _tables(E, E, np.ones((n, 2), dtype=np.int64), correct, 6, 1, 2, 50, 1.0)
    assert not D.any() and not Dp.any()


def test_single_step_two_actions_table():
    E = np.zeros((2, 2))
    correct = np.ones((2, 2), dtype=bool)
    _, spent, D, _, acts = _tables(E, E, np.ones((2, 1), dtype=np.int64), correct, 1, 1, 1, 1, 0.0)
    chosen = acts[0, 0]
    assert spent[0] == 1
    assert D[chosen, 0] == pytest.approx(0.5) and D[1 - chosen, 0] == pytest.approx(-0.5)


def test_table_contributions_sum_to_zero():
    rng = np.random.default_rng(1)
    n = 6
    E, Ep = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    correct = rng.random((n, 3)) < 0.4
    cost = rng.integers(1, 4, size=(n, 2))
    for k in range(20):
        _, _, D, Dp, _ = _tables(E, Ep, cost, correct, 12, 3, 2, 1, 0.25, key=k)
        assert abs(D.sum()) < 1e-12 and abs(Dp.sum()) < 1e-12


def test_zero_tables_zero_gradient(noisy_scene, noisy_pool):
    net = EnergyNet.initialize(0)
    pre = precompute_states(noisy_scene, noisy_pool, net, 2, 4)
    t = GradientTables(np.zeros_like(pre.E), np.zeros_like(pre.E), np.zeros(0), 10, None)
    assert not finalize_gradient(pre, t, net).any()


def test_naive_equals_efficient(noisy_scene, noisy_pool):
    net = EnergyNet.initialize(8, scale=1.0)
    pre = precompute_states(noisy_scene, noisy_pool, net, 2, 4)
    g_eff = efficient_gradient(pre, P, net, 30, 0.1, 3)
    g_naive = naive_reinforce_gradient(noisy_scene, noisy_pool, net, P, 30, 0.1, 3)
    assert np.abs(g_eff - g_naive).max() < 1e-10


def test_naive_single_episode_at_baseline_is_zero(noisy_scene, noisy_pool):
    net = EnergyNet.initialize(8, scale=1.0)
    pre = precompute_states(noisy_scene, noisy_pool, net, 2, 4)
    r = sample_and_accumulate(pre, P, 1, 0.0, 4).rewards[0]
    assert not naive_reinforce_gradient(noisy_scene, noisy_pool, net, P, 1, r, 4).any()


def test_network_call_budget_independent_of_M(noisy_scene, noisy_pool):
    for M in (5, 5000):
        net = EnergyNet.initialize(0)
        pre = precompute_states(noisy_scene, noisy_pool, net, 2, 4)
        efficient_gradient(pre, P, net, M, 0.0, 1)
        states = len(noisy_pool) * 3
        assert net.forward_count == states and net.backward_count <= states


def test_baseline_extremes(noisy_scene, noisy_pool):
    ch = precompute_chains(noisy_scene, noisy_pool, 2, 4)
    pre = energies_for(ch, EnergyNet.initialize(0))
    for value in (True, False):
        ch.correct[:] = value
        assert estimate_baseline(pre, P, 200, 0) == (1.0 if value else -1.0)


def test_baseline_converges_to_enumerated_value():
    _, _, ch, net, params = tiny_instance()
    exact = expected_reward(net, ch, params)
    est = estimate_baseline(energies_for(ch, net), params, 400_000, 1)
    assert abs(est - exact) < 4 * np.sqrt((1 - exact**2) / 400_000)


def test_baseline_does_not_shift_expectation():
    _, _, ch, net, params = tiny_instance()
    pre = energies_for(ch, net)
    exact, _ = exact_energy_gradient(net, ch, params)
    for b in (0.0, 0.6):
        g = np.array([efficient_gradient(pre, params, net, 2000, b, s) for s in range(60)])
        se = g.std(axis=0, ddof=1) / np.sqrt(len(g))
        live = se > 1e-12
        assert (np.abs(g.mean(axis=0) - exact)[live] <= 4 * se[live]).all()


def test_momentum_step_cases():
    th, g = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    new, v = sgd_momentum_step(th, g, np.zeros(2), 1.0, 0.0)
    assert np.array_equal(new, th + g)
    g2 = np.array([0.25, 0.125])
    th1, v1 = sgd_momentum_step(th, g, np.zeros(2), 0.1, 0.9)
    th2, v2 = sgd_momentum_step(th1, g2, v1, 0.1, 0.9)
    assert np.allclose(th2, th + 0.1 * g + 0.1 * (0.9 * g + g2), atol=1e-15)
    with pytest.raises(ShapeMismatch):
        sgd_momentum_step(th, np.zeros(3), np.zeros(2), 0.1, 0.9)


def test_momentum_with_zero_gradient_converges():
    th, v = np.zeros(2), np.array([1.0, -2.0])
    limit = th + 0.1 * 0.9 * v / (1 - 0.9)
    for _ in range(400):
        th, v = sgd_momentum_step(th, np.zeros(2), v, 0.1, 0.9)
    assert np.allclose(th, limit, atol=1e-12)


def test_skip_rule():
    scene = generate_scene(SceneConfig(), 3)
    ch = precompute_chains(scene, sample_hypothesis_pool(scene, 10, 1), 1, 4)
    ch.correct[:] = False
    assert skip_reason(ch) is not None
    ch.correct[0, -1] = True
    assert skip_reason(ch) is None
    ch.correct[:2, -1] = True
    assert skip_reason(ch) is not None  # 20% recoverable is too easy


def _desk_scenes(n, start=0):
    return [generate_scene(SceneConfig(), 2000 + start + i, scene_id=start + i) for i in range(n)]


def test_training_loop_determinism_and_log(tmp_path):
    cfg = TrainConfig(lr0=0.5, sequences=200, snapshot_interval=2, epochs=1, val_sequences=100)
    params = EpisodeParams(budget=12, tau_max=3, m_max=4)
    scenes, val = _desk_scenes(12), _desk_scenes(3, 100)
    a = training_loop(scenes, cfg, params, pool_size=16, val_scenes=val)
    b = training_loop(scenes, cfg, params, pool_size=16, val_scenes=val)
    assert np.array_equal(a.net.flatten(), b.net.flatten())
    updates = [r for r in a.log if not r["skipped"]]
    assert [r["update"] for r in updates] == list(range(1, len(updates) + 1))
    for r in updates:
        assert r["lr"] == pytest.approx(0.5 / (1 + (r["update"] - 1) * 0.01))
    assert a.selected_update in [s[0] for s in a.snapshots]
    write_log(a.log, tmp_path / "log.csv")
    rows = list(csv.DictReader(open(tmp_path / "log.csv")))
    assert len(rows) == 12 and "grad_norm" in rows[0]


def test_skipped_scene_does_not_advance_schedule():
    scene = generate_scene(SceneConfig(), 7, scene_id=7)
    far = sample_hypothesis_pool(generate_scene(SceneConfig(), 8), 6, 0)  # hypotheses from another scene
    cfg = TrainConfig(sequences=50, epochs=1)
    res = training_loop([(scene, far)], cfg, EpisodeParams(12, 2, 4), pool_size=6)
    assert res.log[0]["skipped"] and res.log[0]["update"] == 0
    assert [s[0] for s in res.snapshots] == [0]
    assert np.array_equal(res.net.flatten(), EnergyNet.initialize(0).flatten())


def test_training_rejects_bad_config():
    with pytest.raises(ConfigError):
        training_loop([], TrainConfig(), P, pool_size=4)
    with pytest.raises(ConfigError):
        training_loop(_desk_scenes(1), TrainConfig(lr0=-1), P, pool_size=4)


def test_params_must_match_chains(noisy_scene, noisy_pool):
    pre = precompute_states(noisy_scene, noisy_pool, EnergyNet.initialize(0), 2, 4)
    with pytest.raises(ValueError):
        sample_and_accumulate(pre, EpisodeParams(12, 3, 4), 10, 0.0, 0)
