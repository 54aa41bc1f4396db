"""Server and agent state machines for federated early-settled Q-learning.

One round is ``make_broadcast -> agent_explore_lockstep -> aggregate_round``.
Arrays are indexed ``[h, s, a]`` (or ``[h, s]``) with 0-based indices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import schedule
from .mdp import Step, TabularMdp, Trajectory
from .schedule import BonusConstants, RateWindow


class ProtocolError(RuntimeError):
    """An agent report disagrees with what the server broadcast."""


_TRIPLE_FIELDS = ("Q_U", "Q_L", "Q_R", "Q", "N", "mu_R", "sigma_R", "mu_A", "sigma_A", "beta_R")
_PAIR_FIELDS = ("V", "V_L", "V_R", "u_R", "policy")


@dataclass
class ServerState:
    Q_U: np.ndarray
    Q_L: np.ndarray
    Q_R: np.ndarray
    Q: np.ndarray
    N: np.ndarray
    mu_R: np.ndarray
    sigma_R: np.ndarray
    mu_A: np.ndarray
    sigma_A: np.ndarray
    beta_R: np.ndarray
    V: np.ndarray
    V_L: np.ndarray
    V_R: np.ndarray
    u_R: np.ndarray
    policy: np.ndarray
    k: int = 1
    seed: int | None = None

    @classmethod
    def initial(cls, H: int, S: int, A: int, seed: int | None = None) -> "ServerState":
        full = lambda shape, v: np.full(shape, v, dtype=np.float64)  # noqa: E731
        t, p = (H, S, A), (H, S)
        return cls(
            Q_U=full(t, H), Q_L=full(t, 0.0), Q_R=full(t, H), Q=full(t, H),
            N=np.zeros(t, dtype=np.int64),
            mu_R=full(t, 0.0), sigma_R=full(t, 0.0), mu_A=full(t, 0.0),
            sigma_A=full(t, 0.0), beta_R=full(t, 0.0),
            V=full(p, H), V_L=full(p, 0.0), V_R=full(p, H),
            u_R=np.ones(p, dtype=bool),
            policy=np.zeros(p, dtype=np.int64),
            k=1, seed=seed,
        )

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.Q.shape

    @property
    def total_visits(self) -> int:
        return int(self.N.sum())

    def copy(self) -> "ServerState":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in _TRIPLE_FIELDS + _PAIR_FIELDS:
            kw[name] = kw[name].copy()
        return ServerState(**kw)

    def to_dict(self) -> dict:
        doc = {name: getattr(self, name).tolist() for name in _TRIPLE_FIELDS + _PAIR_FIELDS}
        doc["k"] = self.k
        doc["seed"] = self.seed
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ServerState":
        kw = {}
        for name in _TRIPLE_FIELDS + _PAIR_FIELDS:
            dtype = {"N": np.int64, "policy": np.int64, "u_R": bool}.get(name, np.float64)
            kw[name] = np.array(doc[name], dtype=dtype)
        return cls(k=doc["k"], seed=doc.get("seed"), **kw)

    def checkpoint(self) -> str:
        """Exact JSON checkpoint (floats round-trip bit-for-bit)."""
        return json.dumps(self.to_dict())

    @classmethod
    def restore(cls, text: str) -> "ServerState":
        return cls.from_dict(json.loads(text))


@dataclass
class RoundBroadcast:
    policy: np.ndarray
    N_on_policy: np.ndarray
    V: np.ndarray
    V_L: np.ndarray
    V_R: np.ndarray
    k: int

    SCALARS_PER_PAIR = 5

    def scalar_count(self, M: int) -> int:
        H, S = self.policy.shape
        return self.SCALARS_PER_PAIR * M * H * S


def make_broadcast(server: ServerState) -> RoundBroadcast:
    H, S, _ = server.shape
    hh, ss = np.meshgrid(np.arange(H), np.arange(S), indexing="ij")
    return RoundBroadcast(
        policy=server.policy.copy(),
        N_on_policy=server.N[hh, ss, server.policy].copy(),
        V=server.V.copy(),
        V_L=server.V_L.copy(),
        V_R=server.V_R.copy(),
        k=server.k,
    )


@dataclass
class AgentRoundReport:
    """Per-(h, s) on-policy quantities one agent uploads at round end.

    The six value columns are raw sums over next states; the server divides
    by the pooled visit count.  ``actions`` echoes the policy the agent ran
    and is used only for consistency checking.
    """

    agent: int
    actions: np.ndarray
    reward: np.ndarray
    n: np.ndarray
    v: np.ndarray
    v_l: np.ndarray
    mu_r: np.ndarray
    sigma_r: np.ndarray
    mu_a: np.ndarray
    sigma_a: np.ndarray

    SCALARS_PER_PAIR = 8
    SUM_FIELDS = ("v", "v_l", "mu_r", "sigma_r", "mu_a", "sigma_a")

    def sums(self, h: int, s: int) -> tuple[float, ...]:
        return tuple(float(getattr(self, name)[h, s]) for name in self.SUM_FIELDS)


def visit_cap(N: int, M: int, H: int) -> int:
    return max(1, N // (M * H * (H + 1)))


def next_step_tables(V, V_L, V_R) -> tuple[list, list, list, list, list, list]:
    """Per-step lookup rows of the six functions evaluated at the next state.

    Row ``h`` holds values of step ``h+1``; the row for the last step is all
    zeros (terminal layer).
    """
    H, S = np.shape(V)
    V = np.asarray(V, dtype=np.float64)
    V_R = np.asarray(V_R, dtype=np.float64)
    zero = np.zeros((1, S))
    nxt = lambda x: np.vstack([np.asarray(x, dtype=np.float64)[1:], zero])  # noqa: E731
    v, vl, vr = nxt(V), nxt(V_L), nxt(V_R)
    va = nxt(V - V_R)
    return v.tolist(), vl.tolist(), vr.tolist(), (vr * vr).tolist(), va.tolist(), (va * va).tolist()


@dataclass
class Exploration:
    reports: list[AgentRoundReport]
    episodes_per_agent: int
    initial_counts: np.ndarray  # (M, S) initial-state histogram
    trajectories: list[list] | None = None


def agent_explore_lockstep(
    mdp: TabularMdp,
    broadcast: RoundBroadcast,
    M: int,
    rngs,
    initial_state: int | None = None,
    keep_trajectories: bool = False,
) -> Exploration:
    """Run all agents one episode at a time until some visit count hits its cap.

    Every agent finishes episode ``j`` before any starts ``j+1``; the abort
    check runs after each such sweep, so all agents run the same number of
    episodes.

    Sweeps are simulated in blocks of doubling size.  Once the triggering
    sweep is known, each generator is rewound and advanced by exactly the
    draws the kept episodes used (``H + 1`` per episode: the start state,
    then one per step), so the streams match one-episode-at-a-time sampling.
    """
    H, S = broadcast.policy.shape
    if len(rngs) != M:
        raise ValueError(f"need one generator per agent, got {len(rngs)} for M={M}")
    policy = broadcast.policy
    caps = np.maximum(1, broadcast.N_on_policy // (M * H * (H + 1)))
    tables = np.array(next_step_tables(broadcast.V, broadcast.V_L, broadcast.V_R))  # (6, H, S)
    cdf = mdp.cdf
    state_ids = np.arange(S)

    counts = np.zeros((M, H, S), dtype=np.int64)
    sums = np.zeros((M, 6, H, S))
    init_counts = np.zeros((M, S), dtype=np.int64)
    kept = []
    block = 1
    finished = False
    while not finished:
        saved = [rng.bit_generator.state for rng in rngs]
        u = np.stack([rng.random((block, H + 1)) for rng in rngs])  # (M, B, H+1)
        states = _rollout_block(cdf, policy, u, S, initial_state)
        visits = states[:, :, :H, None] == state_ids  # (M, B, H, S)
        reached = counts[:, None] + np.cumsum(visits, axis=1) >= caps
        hit = reached.any(axis=(0, 2, 3))
        used = block
        if hit.any():
            used = int(np.argmax(hit)) + 1
            finished = True
            if used < block:
                for rng, st in zip(rngs, saved):
                    rng.bit_generator.state = st
                    rng.random((used, H + 1))
        states = states[:, :used]
        counts += visits[:, :used].sum(axis=1)
        for m in range(M):
            init_counts[m] += np.bincount(states[m, :, 0], minlength=S)
        _accumulate(sums, tables, states, H, S)
        if keep_trajectories:
            kept.append(states)
        block *= 2

    episodes = sum(x.shape[1] for x in kept) if kept else int(init_counts[0].sum())
    reward = mdp.rewards[np.arange(H)[:, None], state_ids[None, :], policy]
    actions = policy.copy()
    reports = [
        AgentRoundReport(
            agent=m, actions=actions, reward=reward, n=counts[m],
            v=sums[m, 0], v_l=sums[m, 1], mu_r=sums[m, 2],
            sigma_r=sums[m, 3], mu_a=sums[m, 4], sigma_a=sums[m, 5],
        )
        for m in range(M)
    ]
    trajectories = None
    if keep_trajectories:
        trajectories = [_to_trajectories(mdp, policy, np.concatenate([x[m] for x in kept])) for m in range(M)]
    return Exploration(reports, episodes, init_counts, trajectories)


def _rollout_block(cdf: np.ndarray, policy: np.ndarray, u: np.ndarray, S: int, initial_state) -> np.ndarray:
    """States ``s_1 .. s_{H+1}`` for a block of episodes from their uniforms."""
    H = policy.shape[0]
    states = np.empty(u.shape, dtype=np.int64)
    if initial_state is None:
        s = np.minimum((u[..., 0] * S).astype(np.int64), S - 1)
    else:
        s = np.full(u.shape[:-1], initial_state, dtype=np.int64)
    states[..., 0] = s
    for h in range(H):
        rows = cdf[h, s, policy[h, s]]  # (..., S)
        # inverse CDF: number of cumulative entries <= u, as bisect_right
        s = np.minimum((rows <= u[..., h + 1, None]).sum(axis=-1), S - 1)
        states[..., h + 1] = s
    return states


def _accumulate(sums: np.ndarray, tables: np.ndarray, states: np.ndarray, H: int, S: int) -> None:
    """Add next-state values into per-agent sums, in episode order within each cell."""
    if H < 2:
        return
    M, B, _ = states.shape
    cur = states[:, :, : H - 1]  # (M, B, H-1)
    nxt = states[:, :, 1:H]
    steps = np.arange(H - 1)
    vals = tables[:, steps, nxt]  # (6, M, B, H-1)
    m_idx = np.arange(M)[:, None, None, None]
    q_idx = np.arange(6)[None, :, None, None]
    h_idx = steps[None, None, :, None]
    s_idx = cur.transpose(0, 2, 1)[:, None, :, :]  # (M, 1, H-1, B)
    flat = ((m_idx * 6 + q_idx) * H + h_idx) * S + s_idx  # (M, 6, H-1, B)
    values = vals.transpose(1, 0, 3, 2)  # (M, 6, H-1, B)
    # ufunc.at adds element by element in array order: per cell, episode order
    np.add.at(sums.reshape(-1), flat.reshape(-1), values.reshape(-1))


def _to_trajectories(mdp: TabularMdp, policy: np.ndarray, states: np.ndarray) -> list[Trajectory]:
    out = []
    for row in states.tolist():
        steps = []
        for h in range(mdp.H):
            s, a = row[h], int(policy[h, row[h]])
            steps.append(Step(s, a, float(mdp.rewards[h, s, a]), row[h + 1]))
        out.append(Trajectory(row[0], steps))
    return out


def update_triple(
    st: ServerState,
    h: int,
    s: int,
    a: int,
    reward: float,
    visits: list[tuple[int, tuple[float, ...]]],
    M: int,
    consts: BonusConstants,
    iota: float,
) -> None:
    """Central aggregation for one visited on-policy triple, in place.

    ``visits`` lists ``(n_m, six local sums)`` for every agent with
    ``n_m > 0``, in increasing agent index.
    """
    H = st.Q.shape[0]
    n = sum(nm for nm, _ in visits)
    totals = [sum(sm[q] for _, sm in visits) for q in range(6)]
    v_bar, vl_bar, mur_bar, sigr_bar, mua_bar, siga_bar = [x / n for x in totals]

    idx = (h, s, a)
    N_lo = int(st.N[idx])
    N_hi = N_lo + n
    mu_R = (N_lo * float(st.mu_R[idx]) + n * mur_bar) / N_hi
    sigma_R = (N_lo * float(st.sigma_R[idx]) + n * sigr_bar) / N_hi

    window = RateWindow(H, N_lo, N_hi, iota)
    alpha = schedule.alpha_rate(window)
    keep = 1.0 - alpha
    bonus = schedule.hoeffding_bonus(window, consts)

    Q_U, Q_L, Q_R = float(st.Q_U[idx]), float(st.Q_L[idx]), float(st.Q_R[idx])
    if N_lo < 2 * M * H * (H + 1):
        if any(nm != 1 for nm, _ in visits):
            raise ProtocolError(f"more than one visit per agent below the i0 threshold at {idx}")
        weights = schedule.window_weights(N_lo, N_hi, H)
        w_mua = w_siga = w_v = w_vl = w_adv = 0.0
        for w, (_, sm) in zip(weights, visits):
            w_v += w * sm[0]
            w_vl += w * sm[1]
            w_adv += w * (sm[0] - sm[2])
            w_mua += w * sm[4]
            w_siga += w * sm[5]
        mu_A = keep * float(st.mu_A[idx]) + w_mua
        sigma_A = keep * float(st.sigma_A[idx]) + w_siga
        beta_new = schedule.beta_R(mu_R, sigma_R, mu_A, sigma_A, N_hi, H, iota, consts.c_b_R)
        bonus_R = schedule.reference_bonus(window, float(st.beta_R[idx]), beta_new, consts)
        Q_U = keep * Q_U + alpha * reward + w_v + bonus
        Q_L = keep * Q_L + alpha * reward + w_vl - bonus
        Q_R = keep * Q_R + alpha * (reward + mu_R) + w_adv + bonus_R
    else:
        mu_A = keep * float(st.mu_A[idx]) + alpha * mua_bar
        sigma_A = keep * float(st.sigma_A[idx]) + alpha * siga_bar
        beta_new = schedule.beta_R(mu_R, sigma_R, mu_A, sigma_A, N_hi, H, iota, consts.c_b_R)
        bonus_R = schedule.reference_bonus(window, float(st.beta_R[idx]), beta_new, consts)
        Q_U = keep * Q_U + alpha * (reward + v_bar) + bonus
        Q_L = keep * Q_L + alpha * (reward + vl_bar) - bonus
        Q_R = keep * Q_R + alpha * (reward + mu_R + v_bar - mur_bar) + bonus_R

    st.N[idx] = N_hi
    st.mu_R[idx], st.sigma_R[idx] = mu_R, sigma_R
    st.mu_A[idx], st.sigma_A[idx] = mu_A, sigma_A
    st.beta_R[idx] = beta_new
    st.Q_U[idx], st.Q_L[idx], st.Q_R[idx] = Q_U, Q_L, Q_R
    st.Q[idx] = min(Q_U, Q_R, float(st.Q[idx]))


def finish_round(st: ServerState, beta: float) -> None:
    """Value, lower-bound, policy and reference updates for every (h, s), in place."""
    st.V = st.Q.max(axis=-1)
    st.V_L = np.maximum(st.Q_L.max(axis=-1), st.V_L)
    st.policy = np.argmax(st.Q, axis=-1)
    wide = st.V - st.V_L > beta
    first_settle = ~wide & st.u_R
    refresh = wide | first_settle
    st.V_R = np.where(refresh, st.V, st.V_R)
    st.u_R = st.u_R & ~first_settle
    st.k += 1


def aggregate_round(
    server: ServerState,
    reports: list[AgentRoundReport],
    M: int,
    consts: BonusConstants,
    iota: float,
) -> ServerState:
    """Fold one round of agent reports into a new server state (round ``k+1``)."""
    if len(reports) != M:
        raise ProtocolError(f"expected {M} reports, got {len(reports)}")
    reports = sorted(reports, key=lambda r: r.agent)
    if [r.agent for r in reports] != list(range(M)):
        raise ProtocolError("agent indices must be 0..M-1, each exactly once")
    for r in reports:
        if not np.array_equal(r.actions, server.policy):
            raise ProtocolError(f"agent {r.agent} explored with a stale or foreign policy")

    st = server.copy()
    H, S, _ = st.shape
    counts = np.stack([r.n for r in reports])  # (M, H, S)
    # (H, S, M, 6) nested lists: one tuple of six sums per agent
    sums = np.stack(
        [np.stack([getattr(r, name) for name in AgentRoundReport.SUM_FIELDS], axis=-1) for r in reports],
        axis=2,
    ).tolist()
    counts_hsm = counts.transpose(1, 2, 0).tolist()
    rewards = reports[-1].reward.tolist()
    policy = server.policy.tolist()
    for h, s in np.argwhere(counts.sum(axis=0) > 0).tolist():
        row = counts_hsm[h][s]
        visits = [(row[m], tuple(sums[h][s][m])) for m in range(M) if row[m] > 0]
        update_triple(st, h, s, policy[h][s], rewards[h][s], visits, M, consts, iota)
    finish_round(st, consts.beta)
    return st


@dataclass
class CommunicationLedger:
    """Scalars exchanged per round: broadcast, uploads and abort-signal relays."""

    M: int
    H: int
    S: int
    rounds: int = 0
    downlink: int = 0
    uplink: int = 0
    signals: int = 0

    @property
    def per_round(self) -> int:
        return (RoundBroadcast.SCALARS_PER_PAIR + AgentRoundReport.SCALARS_PER_PAIR) * self.M * self.H * self.S + self.M + 1

    @property
    def total(self) -> int:
        return self.downlink + self.uplink + self.signals

    def record_round(self) -> int:
        self.rounds += 1
        self.downlink += RoundBroadcast.SCALARS_PER_PAIR * self.M * self.H * self.S
        self.uplink += AgentRoundReport.SCALARS_PER_PAIR * self.M * self.H * self.S
        # one signal from the triggering agent, relayed to all M agents
        self.signals += self.M + 1
        return self.total


@dataclass
class FederatedRun:
    """Round driver holding the server, agent streams and the ledger."""

    mdp: TabularMdp
    M: int
    consts: BonusConstants
    iota: float
    rngs: list
    initial_state: int | None = None
    server: ServerState = None  # type: ignore[assignment]
    ledger: CommunicationLedger = None  # type: ignore[assignment]
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.server is None:
            self.server = ServerState.initial(self.mdp.H, self.mdp.S, self.mdp.A)
        if self.ledger is None:
            self.ledger = CommunicationLedger(self.M, self.mdp.H, self.mdp.S)

    def step(self) -> Exploration:
        broadcast = make_broadcast(self.server)
        result = agent_explore_lockstep(
            self.mdp, broadcast, self.M, self.rngs, self.initial_state
        )
        self.server = aggregate_round(self.server, result.reports, self.M, self.consts, self.iota)
        self.ledger.record_round()
        return result


def theorem_round_bound(T: float, H: int, S: int, A: int, M: int = 1) -> float:
    """``max{2 M C + 4 M C log(T/C), 3 M C}`` with ``C = H^2 (H+1) S A``."""
    C = H * H * (H + 1) * S * A
    if T <= 0:
        return 3.0 * M * C
    return max(2.0 * M * C + 4.0 * M * C * math.log(T / C), 3.0 * M * C)
