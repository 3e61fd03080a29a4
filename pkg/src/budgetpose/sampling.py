"""Counter-based random streams and the compiled episode simulator.

Every random decision is ``uniform(key, episode, t)``: a pure function of a
stream key, the episode index and the decision index. Live episodes and the
table-driven simulator therefore draw the same numbers for the same episode,
and any episode can be replayed on its own.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# stream tags for SeedSequence-derived keys
EPISODE, BASELINE, EVAL, SCENE, POOL, INIT, VARIANCE = range(1, 8)

_G1 = np.uint64(0x9E3779B97F4A7C15)
_G2 = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def stream_key(master_seed: int, scene_id: int, tag: int) -> int:
    """64-bit key for one named substream of ``master_seed``."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, int(scene_id) & 0xFFFFFFFF, int(tag)])
    # 63 bits so the key passes into compiled code as a plain int64
    return int(ss.generate_state(1, dtype=np.uint64)[0]) >> 1


@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True)
def uniform(key, episode, t):
    """Uniform double in [0, 1) for decision ``t`` of ``episode`` in stream ``key``."""
    z = _mix(np.uint64(key) + np.uint64(episode) * _G1)
    z = _mix(z ^ (np.uint64(t) * _G2 + _G1))
    return float(z >> _S11) * _INV53


@njit(cache=True)
def simulate(E, Ep, cost, correct, budget, m_max, tau_max, key, first_episode, n_episodes,
             baseline, final_greedy, accumulate, record):
    """Run episodes on precomputed tables.

    E, Ep: (N, tau_max+1) refinement / final energies per (hypothesis, times refined).
    cost: (N, max(tau_max, 1)) steps charged by the tau-th refinement.
    correct: (N, tau_max+1) reward indicator.

    Returns rewards, steps spent, D, D_prime, recorded actions. D and D_prime
    hold sum_k (r_k - baseline) * dlog pi / dE per (hypothesis, tau); they are
    left at zero unless ``accumulate``.

    Per refinement step, a hypothesis in the action set receives -pi_a. Since its
    energy is constant until it is chosen, those terms are folded: we keep the
    running sum C of 1/S_t and settle w_a * (C_now - C_start) whenever the
    hypothesis changes state or the phase ends.
    """
    n, t1 = E.shape
    shift_e = E.max()
    shift_p = Ep.max()
    # floor at exp(-600) so no weight underflows to zero (zero marks "inactive")
    wE = np.exp(np.maximum(E - shift_e, -600.0))
    wP = np.exp(np.maximum(Ep - shift_p, -600.0))
    max_steps = min(n * tau_max, budget) + 1
    rewards = np.empty(n_episodes)
    spent = np.zeros(n_episodes, dtype=np.int64)
    D = np.zeros((n, t1))
    Dp = np.zeros((n, t1))
    if record:
        actions = np.full((n_episodes, max_steps), -1, dtype=np.int64)
    else:
        actions = np.full((1, 1), -1, dtype=np.int64)
    tau = np.zeros(n, dtype=np.int64)
    cstart = np.zeros(n)
    buf = np.zeros((n, t1))
    # complete binary sum tree over current refinement weights; leaf of an
    # inactive hypothesis holds 0. Parents are recomputed from children on
    # update, so the root (the softmax normaliser) never accumulates drift.
    leaves = 1
    while leaves < n:
        leaves *= 2
    tree = np.zeros(2 * leaves)

    for k in range(n_episodes):
        ep = first_episode + k
        tree[:] = 0.0
        for a in range(n):
            tau[a] = 0
            cstart[a] = 0.0
            if tau_max > 0:
                tree[leaves + a] = wE[a, 0]
        for i in range(leaves - 1, 0, -1):
            tree[i] = tree[2 * i] + tree[2 * i + 1]
        remaining = budget
        n_active = n if tau_max > 0 else 0
        c = 0.0
        t = 0
        while remaining >= m_max and n_active > 0:
            s = tree[1]
            target = uniform(key, ep, t) * s
            i = 1
            while i < leaves:
                left = tree[2 * i]
                if target < left:
                    i = 2 * i
                else:
                    target -= left
                    i = 2 * i + 1
            choice = i - leaves
            if choice >= n or tree[i] == 0.0:
                # rounding pushed the draw past the last active leaf
                choice = n - 1
                while tree[leaves + choice] == 0.0:
                    choice -= 1
            c += 1.0 / s
            ta = tau[choice]
            old = tree[leaves + choice]
            if accumulate:
                buf[choice, ta] += 1.0 - old * (c - cstart[choice])
            remaining -= cost[choice, ta]
            spent[k] += cost[choice, ta]
            tau[choice] = ta + 1
            i = leaves + choice
            if ta + 1 < tau_max:
                cstart[choice] = c
                tree[i] = wE[choice, ta + 1]
            else:
                tree[i] = 0.0
                n_active -= 1
            i //= 2
            while i >= 1:
                tree[i] = tree[2 * i] + tree[2 * i + 1]
                i //= 2
            if record:
                actions[k, t] = choice
            t += 1

        # final decision over all hypotheses
        if final_greedy:
            choice = 0
            best = Ep[0, tau[0]]
            for a in range(1, n):
                if Ep[a, tau[a]] > best:
                    best = Ep[a, tau[a]]
                    choice = a
            s = 1.0
        else:
            s = 0.0
            for a in range(n):
                s += wP[a, tau[a]]
            target = uniform(key, ep, t) * s
            acc = 0.0
            choice = n - 1
            for a in range(n):
                acc += wP[a, tau[a]]
                if acc > target:
                    choice = a
                    break
        if record:
            actions[k, t] = choice
        r = 1.0 if correct[choice, tau[choice]] else -1.0
        rewards[k] = r

        if accumulate:
            w = r - baseline
            for a in range(n):
                if tau[a] < tau_max:
                    buf[a, tau[a]] -= wE[a, tau[a]] * (c - cstart[a])
                top = tau[a] if tau[a] < tau_max else tau_max - 1
                for j in range(top + 1):
                    D[a, j] += w * buf[a, j]
                    buf[a, j] = 0.0
                if not final_greedy:
                    Dp[a, tau[a]] -= w * wP[a, tau[a]] / s
            if not final_greedy:
                Dp[choice, tau[choice]] += w
    return rewards, spent, D, Dp, actions


def warmup() -> None:
    """Trigger compilation so later timings exclude JIT cost."""
    E = np.zeros((2, 2))
    simulate(E, E, np.ones((2, 1), dtype=np.int64), np.ones((2, 2), dtype=np.bool_), 2, 1, 1,
             1, 0, 1, 0.0, False, True, True)
    uniform(1, 0, 0)
