"""Benchmarks: budgeted methods against the fixed top-k schedule, and the
gradient-variance-versus-time experiment."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .agent import EpisodePool, run_episode
from .energymodel import EnergyNet, feature_array, mean_pool_distances
from .geometry import Pose, is_pose_correct
from .refine import default_inlier_threshold, refine
from .sampling import EVAL, POOL, VARIANCE, simulate, stream_key, uniform, warmup
from .scene import HypothesisPool, SyntheticScene, sample_hypothesis_pool
from .train import (EpisodeParams, estimate_baseline, finalize_gradient, naive_reinforce_gradient, precompute_chains,
                    precompute_states, sample_and_accumulate)

REPORT_VERSION = 1
ALL_METHODS = ("fixed", "agent", "randref", "bestref")
BUDGETED = {"agent", "randref", "bestref", "uniform", "oracle"}


def run_fixed_schedule_baseline(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, k_top: int = 25,
                                m_max: int = 10, *, tau_max: int = 3, inlier_threshold: Optional[float] = None,
                                pool_distances: Optional[np.ndarray] = None) -> tuple[Pose, int]:
    """Score everything with E', refine the k_top best once, return the best re-scored one."""
    n = len(pool)
    if k_top > n:
        raise ValueError(f"k_top={k_top} exceeds pool size {n}")
    if inlier_threshold is None:
        inlier_threshold = default_inlier_threshold(scene)
    if pool_distances is None:
        pool_distances = mean_pool_distances(pool, scene.model)
    feats = np.stack([feature_array(scene, h, 0, tau_max, 0.0, pool_distances[a], inlier_threshold)
                      for a, h in enumerate(pool.hypotheses)])
    scores = net.forward(feats)[:, 1]
    top = np.argsort(-scores, kind="stable")[:k_top]
    steps = 0
    refined, refined_feats = [], []
    for a in top:
        res = refine(scene, pool[a], m_max, inlier_threshold)
        steps += res.steps_used
        refined.append(res.refined_pose)
        refined_feats.append(feature_array(scene, res.refined_pose, 1, tau_max, res.moved_distance,
                                           pool_distances[a], inlier_threshold))
    best = int(np.argmax(net.forward(np.stack(refined_feats))[:, 1]))
    return refined[best], steps


def run_randref(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, budget: int, tau_max: int, m_max: int,
                seed: int, *, episode: int = 0, inlier_threshold: Optional[float] = None,
                pool_distances: Optional[np.ndarray] = None) -> tuple[Pose, int]:
    """Uniformly random refinements, then the best final energy."""
    ep = EpisodePool.initial(scene, pool, net, budget, tau_max, m_max, inlier_threshold,
                             pool_distances=pool_distances)
    key = stream_key(seed, scene.scene_id, EVAL)
    t = 0
    steps = 0
    while ep.in_refinement_phase:
        cand = ep.action_set
        a = cand[min(int(uniform(key, episode, t) * len(cand)), len(cand) - 1)]
        steps += ep.refine_hypothesis(a, net)
        t += 1
    a = int(np.argmax(ep.energies(1)))
    return ep.states[a].pose, steps


def run_bestref(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, budget: int, tau_max: int, m_max: int,
                *, inlier_threshold: Optional[float] = None,
                pool_distances: Optional[np.ndarray] = None) -> tuple[Pose, int]:
    """Refine the highest-E hypothesis for as long as the budget allows and return it."""
    ep = EpisodePool.initial(scene, pool, net, budget, tau_max, m_max, inlier_threshold,
                             pool_distances=pool_distances)
    a = int(np.argmax(ep.energies(0)))
    steps = 0
    while ep.budget_remaining >= m_max and ep.states[a].tau < tau_max:
        steps += ep.refine_hypothesis(a, net)
    return ep.states[a].pose, steps


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def exceeds_3sigma(p_better: float, p_other: float, n: int) -> tuple[bool, float, float]:
    """Is p_better - p_other larger than 3 standard errors of the difference?"""
    margin = p_better - p_other
    sigma = math.sqrt(binomial_sigma(p_better, n) ** 2 + binomial_sigma(p_other, n) ** 2)
    return margin > 3.0 * sigma, margin, 3.0 * sigma


@dataclass
class EvalConfig:
    methods: tuple = ALL_METHODS
    seeds: int = 5
    k_top: int = 25
    budget: Optional[int] = None  # None: match the fixed-schedule average
    workers: int = 1
    oracle_scale: float = 50.0
    variance_pool_size: int = 21
    variance_M_efficient: tuple = (5, 50, 500, 5000, 50000)
    variance_M_naive: tuple = (1, 2, 3, 4)
    variance_repetitions: int = 20
    variance_components: int = 1000
    variance_baseline_sequences: int = 50000


@dataclass
class EvalReport:
    methods: dict = field(default_factory=dict)  # name -> summary dict
    per_scene: list = field(default_factory=list)
    budget: Optional[int] = None
    fixed_avg_steps: Optional[float] = None
    n_scenes: int = 0
    format_version: int = REPORT_VERSION

    def success(self, method: str) -> float:
        return self.methods[method]["success_rate"]

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, json_path, csv_path=None, per_scene_csv=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "success_rate", "avg_refinement_steps", "episodes", "seeds", "budget"])
                for name, m in self.methods.items():
                    w.writerow([name, m["success_rate"], m["avg_refinement_steps"], m["episodes"], m["seeds"],
                                "" if self.budget is None else self.budget])
        if per_scene_csv:
            with open(per_scene_csv, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=["scene_id", "method", "success", "steps", "episodes"])
                w.writeheader()
                w.writerows(self.per_scene)


def _oracle_tables(chains, scale: float, diameter: float):
    e = -scale * chains.errors / diameter
    return e, e


def _scene_methods(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, methods: Sequence[str],
                   params: EpisodeParams, budget: Optional[int], k_top: int, seeds: int, master_seed: int,
                   oracle_scale: float) -> list[dict]:
    dist = mean_pool_distances(pool, scene.model)
    thr = params.inlier_threshold if params.inlier_threshold is not None else default_inlier_threshold(scene)
    rows = []

    def correct(pose):
        return is_pose_correct(pose, scene.truth, scene.model, params.threshold_fraction)

    for m in methods:
        succ, steps = [], []
        if m == "fixed":
            pose, s = run_fixed_schedule_baseline(scene, pool, net, min(k_top, len(pool)), params.m_max,
                                                  tau_max=params.tau_max, inlier_threshold=thr, pool_distances=dist)
            succ, steps = [correct(pose)], [s]
        elif m == "bestref":
            pose, s = run_bestref(scene, pool, net, budget, params.tau_max, params.m_max, inlier_threshold=thr,
                                  pool_distances=dist)
            succ, steps = [correct(pose)], [s]
        elif m == "randref":
            for k in range(seeds):
                pose, s = run_randref(scene, pool, net, budget, params.tau_max, params.m_max, master_seed,
                                      episode=k, inlier_threshold=thr, pool_distances=dist)
                succ.append(correct(pose))
                steps.append(s)
        elif m in ("agent", "uniform"):
            policy = net if m == "agent" else EnergyNet.zeros(hidden=net.layer_sizes[1])
            key = stream_key(master_seed, scene.scene_id, EVAL)
            for k in range(seeds):
                ep = EpisodePool.initial(scene, pool, policy, budget, params.tau_max, params.m_max, thr,
                                         params.threshold_fraction, dist)
                tr = run_episode(scene, ep, policy, master_seed, episode_index=k, key=key)
                succ.append(tr.reward > 0)
                steps.append(tr.total_steps_spent)
        elif m == "oracle":
            ch = precompute_chains(scene, pool, params.tau_max, params.m_max, thr, params.threshold_fraction, dist)
            e, ep_ = _oracle_tables(ch, oracle_scale, scene.model.diameter)
            key = stream_key(master_seed, scene.scene_id, EVAL)
            rewards, spent, *_ = simulate(e, ep_, ch.cost, ch.correct, int(budget), params.m_max, params.tau_max,
                                          key, 0, seeds, 0.0, False, False, False)
            succ, steps = list(rewards > 0), list(spent)
        else:
            raise ValueError(f"unknown method {m!r}")
        rows.append(dict(scene_id=scene.scene_id, method=m, success=float(np.mean(succ)),
                         steps=float(np.mean(steps)), episodes=len(succ)))
    return rows


def _scene_job(args):
    return _scene_methods(*args)


def pool_for(scene: SyntheticScene, pool_size: int, master_seed: int) -> HypothesisPool:
    return sample_hypothesis_pool(scene, pool_size, stream_key(master_seed, scene.scene_id, POOL))


def evaluate_methods(scenes: Sequence, net: EnergyNet, methods: Sequence[str], params: EpisodeParams,
                     budget: Optional[int], *, pool_size: int, k_top: int = 25, seeds: int = 5,
                     master_seed: int = 0, workers: int = 1, oracle_scale: float = 50.0) -> list[dict]:
    jobs = []
    for item in scenes:
        scene, pool = item if isinstance(item, tuple) else (item, pool_for(item, pool_size, master_seed))
        jobs.append((scene, pool, net, list(methods), params, budget, k_top, seeds, master_seed, oracle_scale))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            parts = list(ex.map(_scene_job, jobs))
    else:
        parts = [_scene_job(j) for j in jobs]
    return [r for p in parts for r in p]


def summarize(rows: list[dict], methods: Sequence[str], seeds: int) -> dict:
    out = {}
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        out[m] = dict(
            success_rate=100.0 * float(np.mean([r["success"] for r in mine])),
            avg_refinement_steps=float(np.mean([r["steps"] for r in mine])),
            episodes=int(sum(r["episodes"] for r in mine)),
            seeds=seeds if m in ("agent", "uniform", "randref", "oracle") else 1,
        )
    return out


def matched_budget_eval(scenes: Sequence, net: EnergyNet, methods: Sequence[str], config: EvalConfig,
                        params: EpisodeParams, *, pool_size: int, master_seed: int = 0) -> EvalReport:
    """Run the fixed schedule first; budgeted methods then get its average step count (floored)."""
    methods = list(methods)
    if not methods:
        return EvalReport()
    if not scenes:
        raise ValueError("no evaluation scenes")
    warmup()
    scenes = [s if isinstance(s, tuple) else (s, pool_for(s, pool_size, master_seed)) for s in scenes]
    common = dict(pool_size=pool_size, k_top=config.k_top, seeds=config.seeds, master_seed=master_seed,
                  workers=config.workers, oracle_scale=config.oracle_scale)
    fixed_rows = evaluate_methods(scenes, net, ["fixed"], params, None, **common)
    fixed_avg = float(np.mean([r["steps"] for r in fixed_rows]))
    budget = config.budget if config.budget is not None else int(math.floor(fixed_avg))
    others = [m for m in methods if m != "fixed"]
    rows = evaluate_methods(scenes, net, others, params, budget, **common) if others else []
    if "fixed" in methods:
        rows = fixed_rows + rows
    report = EvalReport(summarize(rows, methods, config.seeds), rows, budget, fixed_avg, len(scenes))
    check_budget_parity(report)
    return report


def check_budget_parity(report: EvalReport) -> None:
    """Hard check: no budgeted method may spend more than the recorded fixed-schedule average."""
    if report.fixed_avg_steps is None:
        return
    for name, m in report.methods.items():
        if name in BUDGETED:
            assert m["avg_refinement_steps"] <= report.fixed_avg_steps + 1e-12, (
                f"{name} used {m['avg_refinement_steps']:.3f} steps on average, "
                f"more than the fixed schedule's {report.fixed_avg_steps:.3f}")
    for r in report.per_scene:
        if r["method"] in BUDGETED:
            assert r["steps"] <= report.budget, f"{r['method']} overspent on scene {r['scene_id']}"


@dataclass
class VarianceReport:
    rows: list = field(default_factory=list)  # method, M, mean_time, std, repetitions, phase times
    format_version: int = REPORT_VERSION

    def row(self, method: str, M: int) -> dict:
        for r in self.rows:
            if r["method"] == method and r["M"] == M:
                return r
        raise KeyError((method, M))

    def write(self, json_path, csv_path=None, plot_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(asdict(self), fh, indent=2)
        keys = ["method", "M", "mean_time", "std", "repetitions", "precompute_time", "sampling_time", "backward_time"]
        if csv_path:
            with open(csv_path, "w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
                w.writeheader()
                w.writerows(self.rows)
        if plot_path:
            with open(plot_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "M", "time", "std"])
                for r in self.rows:
                    w.writerow([r["method"], r["M"], r["mean_time"], r["std"]])


def variance_benchmark(scene: SyntheticScene, pool: HypothesisPool, net: EnergyNet, M_list_efficient,
                       M_list_naive, repetitions: int, seed: int, params: EpisodeParams, *,
                       n_components: int = 1000, baseline_sequences: int = 50000) -> VarianceReport:
    """Repeat both estimators on one scene without updating the network.

    The reward baseline is estimated once, outside the timed region, and shared
    by both estimators. Timings wrap the whole computation, precomputation
    included for the table path.
    """
    if repetitions < 2:
        raise ValueError("repetitions must be >= 2")
    warmup()
    pre0 = precompute_states(scene, pool, net, params.tau_max, params.m_max, params.inlier_threshold,
                             params.threshold_fraction)
    baseline = estimate_baseline(pre0, params, baseline_sequences, seed)
    rng = np.random.default_rng(stream_key(seed, scene.scene_id, VARIANCE))
    comps = rng.choice(net.n_params, size=min(n_components, net.n_params), replace=False)
    report = VarianceReport()
    rep_seed = 0

    for M in M_list_efficient:
        grads, times, phases = [], [], np.zeros(3)
        for r in range(repetitions):
            rep_seed += 1
            t0 = time.perf_counter()
            pre = precompute_states(scene, pool, net, params.tau_max, params.m_max, params.inlier_threshold,
                                    params.threshold_fraction)
            t1 = time.perf_counter()
            tables = sample_and_accumulate(pre, params, M, baseline, seed * 100003 + rep_seed)
            t2 = time.perf_counter()
            g = finalize_gradient(pre, tables, net)
            t3 = time.perf_counter()
            grads.append(g[comps])
            times.append(t3 - t0)
            phases += (t1 - t0, t2 - t1, t3 - t2)
        report.rows.append(_variance_row("efficient", M, grads, times, phases / repetitions))

    for M in M_list_naive:
        grads, times = [], []
        for r in range(repetitions):
            rep_seed += 1
            t0 = time.perf_counter()
            g = naive_reinforce_gradient(scene, pool, net, params, M, baseline, seed * 100003 + rep_seed)
            times.append(time.perf_counter() - t0)
            grads.append(g[comps])
        report.rows.append(_variance_row("naive", M, grads, times, None))
    return report


def _variance_row(method, M, grads, times, phases) -> dict:
    g = np.array(grads)
    row = dict(method=method, M=int(M), mean_time=float(np.mean(times)),
               std=float(g.std(axis=0, ddof=1).mean()), repetitions=len(grads))
    if phases is not None:
        row.update(precompute_time=float(phases[0]), sampling_time=float(phases[1]), backward_time=float(phases[2]))
    return row
