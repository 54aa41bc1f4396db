"""Exact dynamic-programming ground truth for a :class:`TabularMdp`."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mdp import DeterministicPolicy, TabularMdp


def optimal_values(mdp: TabularMdp) -> tuple[np.ndarray, np.ndarray]:
    """Backward induction.  Returns ``Vstar`` of shape (H+1, S) and ``Qstar`` (H, S, A).

    ``Vstar[H]`` is the all-zero terminal layer.
    """
    H, S, A = mdp.H, mdp.S, mdp.A
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = mdp.rewards[h] + mdp.transitions[h] @ V[h + 1]
        V[h] = Q[h].max(axis=1)
    return V, Q


def evaluate_policy(mdp: TabularMdp, policy: DeterministicPolicy | np.ndarray) -> np.ndarray:
    """Exact value of a deterministic policy, shape (H+1, S) with zero terminal layer."""
    actions = policy.actions if isinstance(policy, DeterministicPolicy) else np.asarray(policy)
    H, S = mdp.H, mdp.S
    V = np.zeros((H + 1, S))
    states = np.arange(S)
    for h in range(H - 1, -1, -1):
        a = actions[h]
        V[h] = mdp.rewards[h, states, a] + mdp.transitions[h, states, a] @ V[h + 1]
    return V


def greedy_policy(Q: np.ndarray) -> DeterministicPolicy:
    """Argmax over actions with ties broken to the lowest index."""
    return DeterministicPolicy(np.argmax(Q, axis=-1))


def gap_quantities(Vstar: np.ndarray, Qstar: np.ndarray) -> tuple[np.ndarray, float | None]:
    """Suboptimality gaps and the minimum positive gap.

    ``delta_min`` is ``None`` when no gap is positive (degenerate MDP).
    """
    H = Qstar.shape[0]
    gaps = Vstar[:H, :, None] - Qstar
    positive = gaps[gaps > 0.0]
    delta_min = float(positive.min()) if positive.size else None
    return gaps, delta_min


def max_conditional_variance(mdp: TabularMdp, Vstar: np.ndarray) -> float:
    """Largest one-step variance of the optimal value at the next step."""
    H = mdp.H
    nxt = Vstar[1 : H + 1]  # (H, S)
    mean = np.einsum("hsat,ht->hsa", mdp.transitions, nxt)
    second = np.einsum("hsat,ht->hsa", mdp.transitions, nxt**2)
    var = np.maximum(second - mean**2, 0.0)
    return float(var.max())


def state_visitation(mdp: TabularMdp, policy: DeterministicPolicy | np.ndarray, initial=None) -> np.ndarray:
    """Marginal state distribution at each step, shape (H, S).

    ``initial`` defaults to the uniform distribution.
    """
    actions = policy.actions if isinstance(policy, DeterministicPolicy) else np.asarray(policy)
    H, S = mdp.H, mdp.S
    dist = np.empty((H, S))
    dist[0] = np.full(S, 1.0 / S) if initial is None else np.asarray(initial, dtype=float)
    states = np.arange(S)
    for h in range(H - 1):
        dist[h + 1] = dist[h] @ mdp.transitions[h, states, actions[h]]
    return dist


@dataclass
class GmdpReport:
    Pstar: np.ndarray
    C_st: float | None
    multi_optimal: list[tuple[int, int]]
    violates_unique_support: bool
    condition_a: str = "checked under canonical policy only"


def optimal_action_sets(Qstar: np.ndarray) -> list[list[list[int]]]:
    best = Qstar.max(axis=-1, keepdims=True)
    mask = Qstar == best
    return [[np.flatnonzero(mask[h, s]).tolist() for s in range(Qstar.shape[1])]
            for h in range(Qstar.shape[0])]


def gmdp_statistics(mdp: TabularMdp, Qstar: np.ndarray) -> GmdpReport:
    """Visitation probabilities under the canonical optimal policy.

    Uniqueness of visitation across *all* optimal policies is not certified;
    instead every (h, s) with more than one optimal action is listed, and the
    report flags whether any of them lies on the support.
    """
    Pstar = state_visitation(mdp, greedy_policy(Qstar))
    positive = Pstar[Pstar > 0.0]
    C_st = float(positive.min()) if positive.size else None
    sets = optimal_action_sets(Qstar)
    multi = [(h, s) for h in range(mdp.H) for s in range(mdp.S) if len(sets[h][s]) > 1]
    violates = any(Pstar[h, s] > 0.0 for h, s in multi)
    return GmdpReport(Pstar, C_st, multi, violates)


@dataclass
class OracleTables:
    Vstar: np.ndarray
    Qstar: np.ndarray
    gaps: np.ndarray
    delta_min: float | None
    Qvar_max: float
    Pstar: np.ndarray
    C_st: float | None
    optimal_actions: list[list[list[int]]]
    multi_optimal: list[tuple[int, int]]
    violates_unique_support: bool

    @property
    def degenerate(self) -> bool:
        return self.delta_min is None

    @property
    def optimal_policy(self) -> DeterministicPolicy:
        return greedy_policy(self.Qstar)

    @classmethod
    def compute(cls, mdp: TabularMdp) -> "OracleTables":
        Vstar, Qstar = optimal_values(mdp)
        gaps, delta_min = gap_quantities(Vstar, Qstar)
        g = gmdp_statistics(mdp, Qstar)
        return cls(
            Vstar=Vstar,
            Qstar=Qstar,
            gaps=gaps,
            delta_min=delta_min,
            Qvar_max=max_conditional_variance(mdp, Vstar),
            Pstar=g.Pstar,
            C_st=g.C_st,
            optimal_actions=optimal_action_sets(Qstar),
            multi_optimal=g.multi_optimal,
            violates_unique_support=g.violates_unique_support,
        )

    def summary(self) -> dict:
        return {
            "delta_min": self.delta_min,
            "degenerate": self.degenerate,
            "Qvar_max": self.Qvar_max,
            "C_st": self.C_st,
            "multi_optimal": [list(p) for p in self.multi_optimal],
            "violates_unique_support": self.violates_unique_support,
            "gmdp_condition_a": "checked under canonical policy only",
        }

    def to_dict(self, mdp_hash: str | None = None) -> dict:
        doc = {
            "mdp_hash": mdp_hash,
            "Vstar": self.Vstar.tolist(),
            "Qstar": self.Qstar.tolist(),
            "gaps": self.gaps.tolist(),
            "Pstar": self.Pstar.tolist(),
            "optimal_actions": self.optimal_actions,
        }
        doc.update(self.summary())
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "OracleTables":
        return cls(
            Vstar=np.array(doc["Vstar"]),
            Qstar=np.array(doc["Qstar"]),
            gaps=np.array(doc["gaps"]),
            delta_min=doc["delta_min"],
            Qvar_max=doc["Qvar_max"],
            Pstar=np.array(doc["Pstar"]),
            C_st=doc["C_st"],
            optimal_actions=doc["optimal_actions"],
            multi_optimal=[tuple(p) for p in doc["multi_optimal"]],
            violates_unique_support=doc["violates_unique_support"],
        )


def load_or_compute(mdp: TabularMdp, cache_dir: str | Path | None = None) -> OracleTables:
    """Oracle tables, cached on disk under the MDP's content hash."""
    if cache_dir is None:
        return OracleTables.compute(mdp)
    key = mdp.content_hash()
    path = Path(cache_dir) / f"oracle-{key[:16]}.json"
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("mdp_hash") == key:
            return OracleTables.from_dict(doc)
    tables = OracleTables.compute(mdp)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(tables.to_dict(key)))
    return tables
