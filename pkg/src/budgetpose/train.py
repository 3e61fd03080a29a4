"""Policy-gradient training.

Two gradient estimators of d E[r] / d theta are provided:

* ``naive_reinforce_gradient`` runs full episodes (refinement, network passes
  at every step) and sums (r - b) * d log pi / d theta along each one;
* the table path (``precompute_states`` -> ``sample_and_accumulate`` ->
  ``finalize_gradient``) refines every hypothesis up front, samples episodes
  on the cached energies only, folds the log-policy derivatives into per-state
  tables D and D', then does one backward pass per state.

For the same sampled episodes the two agree to rounding error.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .agent import EpisodePool, run_episode
from .energymodel import EnergyNet, feature_array, mean_pool_distances
from .geometry import Pose, vertex_distance_error
from .refine import default_inlier_threshold, refine
from .sampling import BASELINE, EPISODE, EVAL, POOL, simulate, stream_key
from .scene import ConfigError, HypothesisPool, SyntheticScene, sample_hypothesis_pool

log = logging.getLogger(__name__)


class ShapeMismatch(ValueError):
    pass


@dataclass
class EpisodeParams:
    budget: int = 77
    tau_max: int = 3
    m_max: int = 10
    threshold_fraction: float = 0.1
    inlier_threshold: Optional[float] = None


@dataclass
class RefinementChains:
    """Network-independent part of the precomputation: every (a, tau) state."""

    poses: list  # poses[a][tau]
    features: np.ndarray  # (N, tau_max+1, 5)
    cost: np.ndarray  # (N, max(tau_max, 1)) steps of the tau-th refinement
    correct: np.ndarray  # (N, tau_max+1)
    errors: np.ndarray  # (N, tau_max+1) vertex distance to truth
    tau_max: int
    m_max: int
    scene_id: int = 0

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def recoverable_fraction(self) -> float:
        """Share of hypotheses that are correct after tau_max refinements."""
        return float(self.correct[:, -1].mean())


@dataclass
class PrecomputedStates:
    chains: RefinementChains
    E: np.ndarray  # (N, tau_max+1)
    E_prime: np.ndarray

    @property
    def n(self) -> int:
        return self.chains.n


@dataclass
class GradientTables:
    D: np.ndarray
    D_prime: np.ndarray
    G: np.ndarray
    sequences_used: int
    rewards: np.ndarray = field(default_factory=lambda: np.zeros(0))


def precompute_chains(scene: SyntheticScene, pool: HypothesisPool, tau_max: int, m_max: int,
                      inlier_threshold: Optional[float] = None, threshold_fraction: float = 0.1,
                      pool_distances: Optional[np.ndarray] = None) -> RefinementChains:
    if len(pool) == 0:
        raise ValueError("empty hypothesis pool")
    if inlier_threshold is None:
        inlier_threshold = default_inlier_threshold(scene)
    if pool_distances is None:
        pool_distances = mean_pool_distances(pool, scene.model)
    n = len(pool)
    feats = np.zeros((n, tau_max + 1, 5))
    cost = np.ones((n, max(tau_max, 1)), dtype=np.int64)
    errors = np.zeros((n, tau_max + 1))
    poses = []
    for a, h in enumerate(pool.hypotheses):
        chain = [h]
        feats[a, 0] = feature_array(scene, h, 0, tau_max, 0.0, pool_distances[a], inlier_threshold)
        errors[a, 0] = vertex_distance_error(h, scene.truth, scene.model)
        for tau in range(1, tau_max + 1):
            res = refine(scene, chain[-1], m_max, inlier_threshold)
            chain.append(res.refined_pose)
            cost[a, tau - 1] = res.steps_used
            feats[a, tau] = feature_array(scene, res.refined_pose, tau, tau_max, res.moved_distance,
                                          pool_distances[a], inlier_threshold)
            errors[a, tau] = vertex_distance_error(res.refined_pose, scene.truth, scene.model)
        poses.append(chain)
    correct = errors < threshold_fraction * scene.model.diameter
    return RefinementChains(poses, feats, cost, correct, errors, tau_max, m_max, scene.scene_id)


def energies_for(chains: RefinementChains, net: EnergyNet) -> PrecomputedStates:
    n, t1, f = chains.features.shape
    e = net.forward(chains.features.reshape(n * t1, f)).reshape(n, t1, 2)
    return PrecomputedStates(chains, e[:, :, 0].copy(), e[:, :, 1].copy())


def precompute_states(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, tau_max: int, m_max: int,
                      inlier_threshold: Optional[float] = None, threshold_fraction: float = 0.1) -> PrecomputedStates:
    chains = precompute_chains(scene, pool, tau_max, m_max, inlier_threshold, threshold_fraction)
    return energies_for(chains, net)


def _run_tables(pre: PrecomputedStates, params: EpisodeParams, M: int, baseline: float, key: int,
                accumulate: bool, first_episode: int = 0, record: bool = False, final_greedy: bool = False):
    c = pre.chains
    if params.tau_max != c.tau_max or params.m_max != c.m_max:
        raise ValueError("episode parameters do not match the precomputed chains")
    return simulate(pre.E, pre.E_prime, c.cost, c.correct, int(params.budget), int(params.m_max),
                    int(params.tau_max), int(key), int(first_episode), int(M), float(baseline),
                    bool(final_greedy), bool(accumulate), bool(record))


def sample_and_accumulate(pre: PrecomputedStates, params: EpisodeParams, M: int, baseline: float,
                          master_seed: int, key: Optional[int] = None) -> GradientTables:
    if M < 1:
        raise ValueError("M must be >= 1")
    if key is None:
        key = stream_key(master_seed, pre.chains.scene_id, EPISODE)
    rewards, _, D, Dp, _ = _run_tables(pre, params, M, baseline, key, accumulate=True)
    return GradientTables(D, Dp, np.zeros(0), M, rewards)


def finalize_gradient(pre: PrecomputedStates, tables: GradientTables, net: EnergyNet) -> np.ndarray:
    n, t1, f = pre.chains.features.shape
    upstream = np.stack([tables.D.ravel(), tables.D_prime.ravel()], axis=1) / tables.sequences_used
    G = net.backward(pre.chains.features.reshape(n * t1, f), upstream)
    tables.G = G
    return G


def efficient_gradient(pre: PrecomputedStates, params: EpisodeParams, net: EnergyNet, M: int, baseline: float,
                       master_seed: int) -> np.ndarray:
    tables = sample_and_accumulate(pre, params, M, baseline, master_seed)
    return finalize_gradient(pre, tables, net)


def naive_reinforce_gradient(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, params: EpisodeParams,
                             M: int, baseline: float, master_seed: int) -> np.ndarray:
    """REINFORCE by running M live episodes with per-step network passes."""
    if M < 1:
        raise ValueError("M must be >= 1")
    key = stream_key(master_seed, scene.scene_id, EPISODE)
    distances = mean_pool_distances(pool, scene.model)
    G = np.zeros(net.n_params)
    for k in range(M):
        ep = EpisodePool.initial(scene, pool, net, params.budget, params.tau_max, params.m_max,
                                 params.inlier_threshold, params.threshold_fraction, distances)
        trace = run_episode(scene, ep, net, master_seed, episode_index=k, record=True, key=key)
        g = np.zeros(net.n_params)
        for st in trace.steps:
            d = -st.pi
            d[st.chosen] += 1.0
            up = np.zeros((len(d), 2))
            up[:, st.head] = d
            g += net.backward(st.features, up)
        G += (trace.reward - baseline) * g
    return G / M


def estimate_baseline(pre: PrecomputedStates, params: EpisodeParams, M: int, seed: int) -> float:
    """Mean reward of M fresh episodes under the current policy."""
    if M < 1:
        raise ValueError("M must be >= 1")
    key = stream_key(seed, pre.chains.scene_id, BASELINE)
    rewards, *_ = _run_tables(pre, params, M, 0.0, key, accumulate=False)
    return float(rewards.mean())


def success_rate_tables(pre: PrecomputedStates, params: EpisodeParams, M: int, seed: int) -> float:
    key = stream_key(seed, pre.chains.scene_id, EVAL)
    rewards, *_ = _run_tables(pre, params, M, 0.0, key, accumulate=False)
    return float((rewards > 0).mean())


def sgd_momentum_step(params: np.ndarray, gradient: np.ndarray, velocity: np.ndarray, lr: float,
                      momentum: float) -> tuple[np.ndarray, np.ndarray]:
    """Ascent step: v <- momentum * v + g; theta <- theta + lr * v."""
    params, gradient, velocity = (np.asarray(x, dtype=float) for x in (params, gradient, velocity))
    if not params.shape == gradient.shape == velocity.shape:
        raise ShapeMismatch(f"{params.shape}, {gradient.shape}, {velocity.shape}")
    velocity = momentum * velocity + gradient
    return params + lr * velocity, velocity


def skip_reason(chains: RefinementChains, max_fraction: float = 0.1) -> Optional[str]:
    """Why a training scene is skipped, or None if it is used."""
    frac = chains.recoverable_fraction()
    if frac == 0.0:
        return "none-recoverable"
    if frac > max_fraction:
        return "too-easy"
    return None


@dataclass
class TrainConfig:
    lr0: float = 25e-4
    lr_decay: float = 0.01
    momentum: float = 0.9
    sequences: int = 50000
    baseline_sequences: Optional[int] = None  # defaults to ``sequences``
    snapshot_interval: int = 50
    epochs: int = 1
    skip_max_fraction: float = 0.1
    val_sequences: int = 2000
    init_seed: int = 0
    hidden: int = 16
    master_seed: int = 0

    def validate(self):
        if self.sequences < 1 or self.snapshot_interval < 1 or self.epochs < 1:
            raise ConfigError("sequences, snapshot_interval and epochs must be >= 1")
        if self.lr0 <= 0 or self.lr_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("invalid learning-rate or momentum settings")


@dataclass
class TrainingResult:
    net: EnergyNet
    log: list
    snapshots: list  # (update index, net, validation success or None)
    selected_update: int
    velocity: np.ndarray


LOG_FIELDS = ("epoch", "scene_index", "scene_id", "skipped", "baseline", "grad_norm", "lr", "update", "wall_time")


def validation_success(val: list, net: EnergyNet, params: EpisodeParams, M: int, seed: int) -> float:
    return float(np.mean([success_rate_tables(energies_for(c, net), params, M, seed) for c in val]))


def training_loop(scenes: Iterable, config: TrainConfig, params: EpisodeParams, *, pool_size: int,
                  val_scenes: Optional[list] = None, net: Optional[EnergyNet] = None,
                  velocity: Optional[np.ndarray] = None, start_update: int = 0,
                  on_snapshot=None) -> TrainingResult:
    """One momentum ascent step per eligible scene.

    ``scenes`` yields (scene, pool) pairs or scenes (a pool is then sampled).
    Refinement chains are cached per scene so later epochs only redo the
    network passes.
    """
    config.validate()
    net = net.copy() if net is not None else EnergyNet.initialize(config.init_seed, hidden=config.hidden)
    velocity = np.zeros(net.n_params) if velocity is None else np.asarray(velocity, dtype=float).copy()
    base_M = config.baseline_sequences or config.sequences

    items = list(scenes)
    if not items:
        raise ConfigError("no training scenes")
    chains = []
    for item in items:
        scene, pool = item if isinstance(item, tuple) else (item, None)
        if pool is None:
            pool = sample_hypothesis_pool(scene, pool_size, stream_key(config.master_seed, scene.scene_id, POOL))
        chains.append(precompute_chains(scene, pool, params.tau_max, params.m_max, params.inlier_threshold,
                                        params.threshold_fraction))
    val_chains = []
    for item in val_scenes or []:
        scene, pool = item if isinstance(item, tuple) else (item, None)
        if pool is None:
            pool = sample_hypothesis_pool(scene, pool_size, stream_key(config.master_seed, scene.scene_id, POOL))
        val_chains.append(precompute_chains(scene, pool, params.tau_max, params.m_max, params.inlier_threshold,
                                            params.threshold_fraction))

    rows = []
    snapshots = []
    update = start_update
    t0 = time.monotonic()

    def snapshot():
        score = validation_success(val_chains, net, params, config.val_sequences, config.master_seed) \
            if val_chains else None
        snapshots.append((update, net.copy(), score))
        if on_snapshot is not None:
            on_snapshot(update, net, velocity, score)
        log.info("snapshot at update %d: validation success %s", update, score)

    snapshot()
    for epoch in range(config.epochs):
        for i, ch in enumerate(chains):
            reason = skip_reason(ch, config.skip_max_fraction)
            row = dict(epoch=epoch, scene_index=i, scene_id=ch.scene_id, skipped=reason or "", baseline="",
                       grad_norm="", lr="", update=update)
            if reason is None:
                seed = config.master_seed + 1_000_003 * epoch
                pre = energies_for(ch, net)
                b = estimate_baseline(pre, params, base_M, seed)
                grad = efficient_gradient(pre, params, net, config.sequences, b, seed)
                lr = config.lr0 / (1.0 + update * config.lr_decay)
                theta, velocity = sgd_momentum_step(net.flatten(), grad, velocity, lr, config.momentum)
                net = net.unflatten(theta)
                update += 1
                row.update(baseline=b, grad_norm=float(np.linalg.norm(grad)), lr=lr, update=update)
                if update % config.snapshot_interval == 0:
                    snapshot()
            row["wall_time"] = round(time.monotonic() - t0, 4)
            rows.append(row)
    if not snapshots or snapshots[-1][0] != update:
        snapshot()

    scored = [s for s in snapshots if s[2] is not None]
    if scored:
        best = max(scored, key=lambda s: (s[2], s[0]))
    else:
        best = snapshots[-1]
    return TrainingResult(best[1], rows, snapshots, best[0], velocity)


def write_log(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in LOG_FIELDS})
