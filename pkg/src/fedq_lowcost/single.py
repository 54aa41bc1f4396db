"""Single-agent round-based learner (the ``M = 1`` case without a server).

The learner owns its tables directly: no broadcast, no reports, no
aggregation over agents.  With the same generator it must reproduce the
federated machine run with one agent bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

from . import schedule
from .fedq import ServerState, next_step_tables
from .mdp import TabularMdp, sample_episode, sample_initial_state
from .schedule import BonusConstants, RateWindow


class QEarlySettledLowCost:
    """Q-learning with UCB/LCB estimates, a settled reference and round-based updates.

    ``tie_break`` exists as a mutation hook for reduction testing; anything
    other than ``"lowest"`` breaks equivalence with the federated machine.
    """

    def __init__(
        self,
        mdp: TabularMdp,
        consts: BonusConstants,
        iota: float,
        rng: np.random.Generator,
        initial_state: int | None = None,
        tie_break: str = "lowest",
    ):
        if tie_break not in ("lowest", "highest"):
            raise ValueError(f"unknown tie_break {tie_break!r}")
        self.mdp = mdp
        self.consts = consts
        self.iota = iota
        self.rng = rng
        self.initial_state = initial_state
        self.tie_break = tie_break
        self.state = ServerState.initial(mdp.H, mdp.S, mdp.A)
        if tie_break == "highest":
            self.state.policy[:] = mdp.A - 1

    def _greedy(self, Q: np.ndarray) -> np.ndarray:
        if self.tie_break == "lowest":
            return np.argmax(Q, axis=-1)
        A = Q.shape[-1]
        return A - 1 - np.argmax(Q[..., ::-1], axis=-1)

    def run_round(self) -> tuple[int, np.ndarray]:
        """Explore until a visit cap is hit, then update.  Returns (episodes, initial-state counts)."""
        mdp, st = self.mdp, self.state
        H, S = mdp.H, mdp.S
        acts = st.policy.tolist()
        N = st.N
        caps = [[max(1, int(N[h, s, acts[h][s]]) // (H * (H + 1))) for s in range(S)] for h in range(H)]
        v_next, vl_next, vr_next, vr2_next, va_next, va2_next = next_step_tables(st.V, st.V_L, st.V_R)

        n = [[0] * S for _ in range(H)]
        sum_v = [[0.0] * S for _ in range(H)]
        sum_vl = [[0.0] * S for _ in range(H)]
        sum_vr = [[0.0] * S for _ in range(H)]
        sum_vr2 = [[0.0] * S for _ in range(H)]
        sum_va = [[0.0] * S for _ in range(H)]
        sum_va2 = [[0.0] * S for _ in range(H)]
        starts = np.zeros(S, dtype=np.int64)
        episodes = 0
        triggered = False
        while not triggered:
            s1 = sample_initial_state(S, self.rng)
            if self.initial_state is not None:
                s1 = self.initial_state
            starts[s1] += 1
            for h, (s, _, _, s2) in enumerate(sample_episode(mdp, acts, s1, self.rng).steps):
                n[h][s] += 1
                if n[h][s] >= caps[h][s]:
                    triggered = True
                if h + 1 < H:
                    sum_v[h][s] += v_next[h][s2]
                    sum_vl[h][s] += vl_next[h][s2]
                    sum_vr[h][s] += vr_next[h][s2]
                    sum_vr2[h][s] += vr2_next[h][s2]
                    sum_va[h][s] += va_next[h][s2]
                    sum_va2[h][s] += va2_next[h][s2]
            episodes += 1

        c = self.consts
        i0 = 2 * H * (H + 1)
        for h in range(H):
            for s in range(S):
                cnt = n[h][s]
                if cnt == 0:
                    continue
                a = acts[h][s]
                r = float(mdp.rewards[h, s, a])
                lo = int(N[h, s, a])
                hi = lo + cnt
                v = sum_v[h][s] / cnt
                vl = sum_vl[h][s] / cnt
                mur = sum_vr[h][s] / cnt
                sigr = sum_vr2[h][s] / cnt
                mua = sum_va[h][s] / cnt
                siga = sum_va2[h][s] / cnt

                mu_R = (lo * float(st.mu_R[h, s, a]) + cnt * mur) / hi
                sigma_R = (lo * float(st.sigma_R[h, s, a]) + cnt * sigr) / hi
                win = RateWindow(H, lo, hi, self.iota)
                lr = schedule.alpha_rate(win)
                B = schedule.hoeffding_bonus(win, c)
                if lo < i0:
                    # cap is 1 here, so exactly one visit with weight eta_hi^hi
                    w = float(schedule.window_weights(lo, hi, H)[0])
                    mu_A = (1.0 - lr) * float(st.mu_A[h, s, a]) + w * mua
                    sigma_A = (1.0 - lr) * float(st.sigma_A[h, s, a]) + w * siga
                    beta_new = schedule.beta_R(mu_R, sigma_R, mu_A, sigma_A, hi, H, self.iota, c.c_b_R)
                    BR = schedule.reference_bonus(win, float(st.beta_R[h, s, a]), beta_new, c)
                    QU = (1.0 - lr) * float(st.Q_U[h, s, a]) + lr * r + w * v + B
                    QL = (1.0 - lr) * float(st.Q_L[h, s, a]) + lr * r + w * vl - B
                    QR = (1.0 - lr) * float(st.Q_R[h, s, a]) + lr * (r + mu_R) + w * (v - mur) + BR
                else:
                    mu_A = (1.0 - lr) * float(st.mu_A[h, s, a]) + lr * mua
                    sigma_A = (1.0 - lr) * float(st.sigma_A[h, s, a]) + lr * siga
                    beta_new = schedule.beta_R(mu_R, sigma_R, mu_A, sigma_A, hi, H, self.iota, c.c_b_R)
                    BR = schedule.reference_bonus(win, float(st.beta_R[h, s, a]), beta_new, c)
                    QU = (1.0 - lr) * float(st.Q_U[h, s, a]) + lr * (r + v) + B
                    QL = (1.0 - lr) * float(st.Q_L[h, s, a]) + lr * (r + vl) - B
                    QR = (1.0 - lr) * float(st.Q_R[h, s, a]) + lr * (r + mu_R + v - mur) + BR
                st.N[h, s, a] = hi
                st.mu_R[h, s, a] = mu_R
                st.sigma_R[h, s, a] = sigma_R
                st.mu_A[h, s, a] = mu_A
                st.sigma_A[h, s, a] = sigma_A
                st.beta_R[h, s, a] = beta_new
                st.Q_U[h, s, a] = QU
                st.Q_L[h, s, a] = QL
                st.Q_R[h, s, a] = QR
                st.Q[h, s, a] = min(QU, QR, float(st.Q[h, s, a]))

        st.V = st.Q.max(axis=-1)
        st.V_L = np.maximum(st.Q_L.max(axis=-1), st.V_L)
        st.policy = self._greedy(st.Q)
        beta = c.beta
        for h in range(H):
            for s in range(S):
                if st.V[h, s] - st.V_L[h, s] > beta:
                    st.V_R[h, s] = st.V[h, s]
                elif st.u_R[h, s]:
                    st.V_R[h, s] = st.V[h, s]
                    st.u_R[h, s] = False
        st.k += 1
        return episodes, starts


def switching_bound(T: float, H: int, S: int, A: int) -> float:
    C = H * H * (H + 1) * S * A
    if T <= 0:
        return 3.0 * C
    return max(2.0 * C + 4.0 * C * math.log(T / C), 3.0 * C)
