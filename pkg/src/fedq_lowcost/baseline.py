"""Hoeffding-bonus Q-learning used as a comparison learner.

Two variants share the update rule ``Q <- (1-eta) Q + eta (r + V' + b)``
with ``b_t = c_b sqrt(H^3 iota / t)`` and ``V = min(H, max_a Q)``:

* :class:`HoeffdingLearner` updates after every step of every episode;
* :class:`FederatedHoeffding` reuses the event-triggered round machinery and
  aggregates only the optimistic estimate (no lower bound, no reference).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import schedule
from .fedq import CommunicationLedger, ProtocolError, RoundBroadcast, agent_explore_lockstep
from .mdp import TabularMdp, sample_episode, sample_initial_state
from .schedule import RateWindow


@dataclass
class HoeffdingState:
    Q: np.ndarray
    N: np.ndarray
    V: np.ndarray
    policy: np.ndarray

    @classmethod
    def initial(cls, H: int, S: int, A: int) -> "HoeffdingState":
        return cls(
            Q=np.full((H, S, A), float(H)),
            N=np.zeros((H, S, A), dtype=np.int64),
            V=np.full((H, S), float(H)),
            policy=np.zeros((H, S), dtype=np.int64),
        )


class HoeffdingLearner:
    """Per-episode UCB-Hoeffding learner for a single agent."""

    def __init__(self, mdp: TabularMdp, c_b: float, iota: float, rng, initial_state: int | None = None):
        self.mdp = mdp
        self.c_b = c_b
        self.iota = iota
        self.rng = rng
        self.initial_state = initial_state
        H, S, A = mdp.H, mdp.S, mdp.A
        self._Q = [[[float(H)] * A for _ in range(S)] for _ in range(H)]
        self._N = [[[0] * A for _ in range(S)] for _ in range(H)]
        self._V = [[float(H)] * S for _ in range(H)] + [[0.0] * S]
        self._policy = [[0] * S for _ in range(H)]

    @property
    def policy(self) -> np.ndarray:
        return np.array(self._policy, dtype=np.int64)

    @property
    def state(self) -> HoeffdingState:
        return HoeffdingState(
            np.array(self._Q), np.array(self._N, dtype=np.int64),
            np.array(self._V[:-1]), self.policy,
        )

    def run_episode(self) -> int:
        """Play one episode with the current greedy policy, updating online.  Returns s1."""
        mdp = self.mdp
        H = mdp.H
        bonus_scale = self.c_b * math.sqrt(H**3 * self.iota)
        s1 = sample_initial_state(mdp.S, self.rng)
        if self.initial_state is not None:
            s1 = self.initial_state
        traj = sample_episode(mdp, self._policy, s1, self.rng)
        for h, (s, a, r, s2) in enumerate(traj.steps):
            t = self._N[h][s][a] + 1
            self._N[h][s][a] = t
            lr = (H + 1) / (H + t)
            target = r + self._V[h + 1][s2] + bonus_scale / math.sqrt(t)
            row = self._Q[h][s]
            row[a] = (1.0 - lr) * row[a] + lr * target
            best = max(row)
            self._V[h][s] = min(float(H), best)
            self._policy[h][s] = row.index(best)
        return s1


class FederatedHoeffding:
    """Round-based Hoeffding learner over ``M`` agents with the same abort trigger."""

    def __init__(self, mdp: TabularMdp, M: int, c_b: float, iota: float, rngs, initial_state: int | None = None):
        self.mdp = mdp
        self.M = M
        self.c_b = c_b
        self.iota = iota
        self.rngs = rngs
        self.initial_state = initial_state
        self.state = HoeffdingState.initial(mdp.H, mdp.S, mdp.A)
        self.ledger = CommunicationLedger(M, mdp.H, mdp.S)
        self.k = 1

    def run_round(self):
        st, mdp, M = self.state, self.mdp, self.M
        H, S = mdp.H, mdp.S
        hh, ss = np.meshgrid(np.arange(H), np.arange(S), indexing="ij")
        zeros = np.zeros((H, S))
        broadcast = RoundBroadcast(
            policy=st.policy.copy(), N_on_policy=st.N[hh, ss, st.policy].copy(),
            V=st.V.copy(), V_L=zeros, V_R=zeros, k=self.k,
        )
        result = agent_explore_lockstep(mdp, broadcast, M, self.rngs, self.initial_state)
        consts = schedule.BonusConstants(c_b=self.c_b)
        i0 = 2 * M * H * (H + 1)
        for h in range(H):
            for s in range(S):
                visits = [(int(r.n[h, s]), float(r.v[h, s])) for r in result.reports if r.n[h, s] > 0]
                if not visits:
                    continue
                a = int(st.policy[h, s])
                r_hs = float(mdp.rewards[h, s, a])
                n = sum(nm for nm, _ in visits)
                lo = int(st.N[h, s, a])
                hi = lo + n
                win = RateWindow(H, lo, hi, self.iota)
                lr = schedule.alpha_rate(win)
                bonus = schedule.hoeffding_bonus(win, consts)
                q = float(st.Q[h, s, a])
                if lo < i0:
                    if any(nm != 1 for nm, _ in visits):
                        raise ProtocolError("more than one visit per agent below the i0 threshold")
                    weights = schedule.window_weights(lo, hi, H)
                    q = (1.0 - lr) * q + lr * r_hs + sum(w * v for w, (_, v) in zip(weights, visits)) + bonus
                else:
                    v_bar = sum(v for _, v in visits) / n
                    q = (1.0 - lr) * q + lr * (r_hs + v_bar) + bonus
                st.Q[h, s, a] = q
                st.N[h, s, a] = hi
        st.V = np.minimum(float(H), st.Q.max(axis=-1))
        st.policy = np.argmax(st.Q, axis=-1)
        self.ledger.record_round()
        self.k += 1
        return result
