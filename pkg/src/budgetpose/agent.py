"""The budgeted refinement agent: pool state, softmax policy and episodes."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .energymodel import feature_array, mean_pool_distances
from .geometry import Pose, is_pose_correct
from .refine import default_inlier_threshold, refine
from .sampling import EPISODE, stream_key, uniform
from .scene import HypothesisPool, SyntheticScene


class EmptyActionSet(ValueError):
    pass


def policy_distribution(energies) -> np.ndarray:
    e = np.asarray(energies, dtype=float)
    if e.size == 0:
        raise EmptyActionSet("softmax over an empty action set")
    w = np.exp(e - e.max())
    return w / w.sum()


def log_policy_gradient_wrt_energies(pi, chosen: int) -> np.ndarray:
    """d log pi(chosen) / dE_a for every a in the action set."""
    g = -np.asarray(pi, dtype=float)
    g[chosen] += 1.0
    return g


def _sample_index(energies: np.ndarray, u: float) -> int:
    # same cumulative rule as the compiled simulator
    w = np.exp(energies - energies.max())
    c = np.cumsum(w)
    i = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(i, len(w) - 1)


@dataclass
class HypothesisState:
    pose: Pose
    tau: int
    features: np.ndarray
    cached_E: float
    cached_E_prime: float


@dataclass
class EpisodePool:
    """Mutable agent state for one episode."""

    scene: SyntheticScene
    origins: list
    pool_distances: np.ndarray
    states: list
    budget: int
    budget_remaining: int
    tau_max: int
    m_max: int
    inlier_threshold: float
    threshold_fraction: float = 0.1
    step_index: int = 0

    @classmethod
    def initial(cls, scene: SyntheticScene, pool: HypothesisPool, net, budget: int, tau_max: int, m_max: int,
                inlier_threshold: Optional[float] = None, threshold_fraction: float = 0.1,
                pool_distances: Optional[np.ndarray] = None) -> "EpisodePool":
        if inlier_threshold is None:
            inlier_threshold = default_inlier_threshold(scene)
        if pool_distances is None:
            pool_distances = mean_pool_distances(pool, scene.model)
        feats = np.stack([
            feature_array(scene, h, 0, tau_max, 0.0, pool_distances[a], inlier_threshold)
            for a, h in enumerate(pool.hypotheses)
        ])
        energies = net.forward(feats)
        states = [HypothesisState(h, 0, feats[a], float(energies[a, 0]), float(energies[a, 1]))
                  for a, h in enumerate(pool.hypotheses)]
        return cls(scene, list(pool.hypotheses), np.asarray(pool_distances), states, int(budget), int(budget),
                   int(tau_max), int(m_max), float(inlier_threshold), float(threshold_fraction))

    @property
    def action_set(self) -> list[int]:
        return [a for a, s in enumerate(self.states) if s.tau < self.tau_max]

    @property
    def in_refinement_phase(self) -> bool:
        return self.budget_remaining >= self.m_max and any(s.tau < self.tau_max for s in self.states)

    def refine_hypothesis(self, a: int, net) -> int:
        """Refine hypothesis ``a`` once, re-score it, charge the budget. Returns steps used."""
        s = self.states[a]
        if s.tau >= self.tau_max:
            raise ValueError(f"hypothesis {a} already refined {s.tau} times")
        res = refine(self.scene, s.pose, self.m_max, self.inlier_threshold)
        tau = s.tau + 1
        feats = feature_array(self.scene, res.refined_pose, tau, self.tau_max, res.moved_distance,
                              self.pool_distances[a], self.inlier_threshold)
        e = net.forward(feats)[0]
        self.states[a] = HypothesisState(res.refined_pose, tau, feats, float(e[0]), float(e[1]))
        self.budget_remaining -= res.steps_used
        self.step_index += 1
        return res.steps_used

    def features_matrix(self, indices=None) -> np.ndarray:
        idx = range(len(self.states)) if indices is None else indices
        return np.stack([self.states[a].features for a in idx])

    def energies(self, head: int, indices=None) -> np.ndarray:
        idx = range(len(self.states)) if indices is None else indices
        attr = "cached_E" if head == 0 else "cached_E_prime"
        return np.array([getattr(self.states[a], attr) for a in idx])

    def is_correct(self, a: int) -> bool:
        return is_pose_correct(self.states[a].pose, self.scene.truth, self.scene.model, self.threshold_fraction)


@dataclass
class StepRecord:
    """One policy decision: the candidate set, its distribution and the pick."""

    candidates: list
    features: np.ndarray
    pi: np.ndarray
    chosen: int  # position within candidates
    head: int  # 0 refinement, 1 final


@dataclass
class EpisodeTrace:
    actions: list = field(default_factory=list)  # (t, a, tau_before, m_t)
    final_action: int = -1
    reward: float = 0.0
    total_steps_spent: int = 0
    steps: Optional[list] = None

    def to_json(self) -> str:
        return json.dumps({
            "actions": [list(map(int, x)) for x in self.actions],
            "final_action": int(self.final_action),
            "reward": float(self.reward),
            "total_steps_spent": int(self.total_steps_spent),
        })


def run_episode(scene: SyntheticScene, pool: EpisodePool, net, rng_seed: int, episode_index: int = 0,
                record: bool = False, final_mode: str = "sample", key: Optional[int] = None) -> EpisodeTrace:
    """Run the refinement phase then the final decision on a fresh ``pool``.

    Decision t of this episode uses ``uniform(key, episode_index, t)`` where the
    key derives from (rng_seed, scene_id); the table simulator draws identically.
    """
    if key is None:
        key = stream_key(rng_seed, scene.scene_id, EPISODE)
    trace = EpisodeTrace(steps=[] if record else None)
    t = 0
    while pool.in_refinement_phase:
        cand = pool.action_set
        energies = pool.energies(0, cand)
        j = _sample_index(energies, uniform(key, episode_index, t))
        a = cand[j]
        if record:
            trace.steps.append(StepRecord(cand, pool.features_matrix(cand), policy_distribution(energies), j, 0))
        tau_before = pool.states[a].tau
        m = pool.refine_hypothesis(a, net)
        trace.actions.append((t, a, tau_before, m))
        trace.total_steps_spent += m
        t += 1

    energies = pool.energies(1)
    if final_mode == "greedy":
        a = greedy_final_choice(pool, net)
    else:
        a = _sample_index(energies, uniform(key, episode_index, t))
    if record:
        trace.steps.append(StepRecord(list(range(len(pool.states))), pool.features_matrix(),
                                      policy_distribution(energies), a, 1))
    trace.final_action = a
    trace.reward = 1.0 if pool.is_correct(a) else -1.0
    return trace


def greedy_final_choice(pool: EpisodePool, net=None) -> int:
    """Index of the highest final-decision energy; ties go to the lowest index."""
    return int(np.argmax(pool.energies(1)))
