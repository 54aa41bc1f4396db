"""Tabular episodic MDPs: random instances, episode sampling and JSON I/O.

Indices are 0-based internally: steps ``h`` in ``range(H)``, states in
``range(S)``, actions in ``range(A)``.  The absorbing state reached after
step ``H`` is implicit; every value function is zero there.
"""

from __future__ import annotations

import hashlib
import json
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

ROW_SUM_TOL = 1e-12


class TabularMdp:
    """Finite-horizon MDP with deterministic rewards in [0, 1].

    ``rewards`` has shape ``(H, S, A)`` and ``transitions`` has shape
    ``(H, S, A, S)``; ``transitions[h, s, a]`` is the next-state distribution.
    """

    def __init__(self, rewards: np.ndarray, transitions: np.ndarray):
        rewards = np.array(rewards, dtype=np.float64)
        transitions = np.array(transitions, dtype=np.float64)
        if rewards.ndim != 3 or transitions.ndim != 4:
            raise ValueError("rewards must be (H,S,A) and transitions (H,S,A,S)")
        H, S, A = rewards.shape
        if min(H, S, A) < 1:
            raise ValueError(f"dimensions must be positive, got H={H} S={S} A={A}")
        if transitions.shape != (H, S, A, S):
            raise ValueError(
                f"transitions shape {transitions.shape} does not match {(H, S, A, S)}"
            )
        if np.any(rewards < 0.0) or np.any(rewards > 1.0):
            raise ValueError("rewards must lie in [0, 1]")
        if np.any(transitions < 0.0):
            raise ValueError("transition probabilities must be nonnegative")
        worst = np.max(np.abs(transitions.sum(axis=-1) - 1.0))
        if worst > ROW_SUM_TOL:
            raise ValueError(f"transition rows must sum to 1 (max deviation {worst:.3e})")
        rewards.setflags(write=False)
        transitions.setflags(write=False)
        self.rewards = rewards
        self.transitions = transitions
        self.H, self.S, self.A = H, S, A
        # Plain-list copies for the per-step sampling loop.
        self._reward_rows = rewards.tolist()
        cdf = np.cumsum(transitions, axis=-1)
        cdf.setflags(write=False)
        self.cdf = cdf
        self._cdf_rows = cdf.tolist()

    def __repr__(self) -> str:
        return f"TabularMdp(H={self.H}, S={self.S}, A={self.A})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TabularMdp):
            return NotImplemented
        return np.array_equal(self.rewards, other.rewards) and np.array_equal(
            self.transitions, other.transitions
        )

    __hash__ = None  # type: ignore[assignment]

    def next_state(self, h: int, s: int, a: int, u: float) -> int:
        """Inverse-CDF draw of the next state from a uniform ``u`` in [0, 1)."""
        idx = bisect_right(self._cdf_rows[h][s][a], u)
        return idx if idx < self.S else self.S - 1

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "H": self.H,
            "S": self.S,
            "A": self.A,
            "rewards": self.rewards.tolist(),
            "transitions": self.transitions.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        mdp = cls(doc["rewards"], doc["transitions"])
        if (mdp.H, mdp.S, mdp.A) != (doc["H"], doc["S"], doc["A"]):
            raise ValueError("declared dimensions disagree with the tables")
        return mdp

    def to_json(self) -> str:
        # json writes floats with repr(), the shortest string that round-trips exactly.
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "TabularMdp":
        return cls.from_json(Path(path).read_text())

    def content_hash(self) -> str:
        """SHA-256 over the raw float64 tables and the dimensions."""
        digest = hashlib.sha256()
        digest.update(np.array([self.H, self.S, self.A], dtype=np.int64).tobytes())
        digest.update(np.ascontiguousarray(self.rewards).tobytes())
        digest.update(np.ascontiguousarray(self.transitions).tobytes())
        return digest.hexdigest()


@dataclass
class DeterministicPolicy:
    """``actions[h, s]`` is the action taken in state ``s`` at step ``h``."""

    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 2:
            raise ValueError("policy table must be (H, S)")

    def __call__(self, h: int, s: int) -> int:
        return int(self.actions[h, s])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DeterministicPolicy):
            return NotImplemented
        return np.array_equal(self.actions, other.actions)

    @classmethod
    def constant(cls, H: int, S: int, action: int = 0) -> "DeterministicPolicy":
        return cls(np.full((H, S), action, dtype=np.int64))

    def validate(self, mdp: TabularMdp) -> None:
        if self.actions.shape != (mdp.H, mdp.S):
            raise ValueError(f"policy shape {self.actions.shape} != {(mdp.H, mdp.S)}")
        if np.any(self.actions < 0) or np.any(self.actions >= mdp.A):
            raise ValueError("policy action out of range")


class Step(NamedTuple):
    state: int
    action: int
    reward: float
    next_state: int


@dataclass
class Trajectory:
    initial_state: int
    steps: list[Step] = field(default_factory=list)

    @property
    def total_reward(self) -> float:
        return sum(step.reward for step in self.steps)


def generate_random_mdp(H: int, S: int, A: int, seed: int) -> TabularMdp:
    """Random instance: uniform rewards, uniform-on-simplex transition rows.

    Each row is a vector of i.i.d. standard exponentials divided by its sum,
    which is a draw from the flat Dirichlet distribution.
    """
    if min(H, S, A) < 1:
        raise ValueError(f"dimensions must be positive, got H={H} S={S} A={A}")
    rng = np.random.default_rng(seed)
    rewards = rng.random((H, S, A))
    draws = rng.standard_exponential((H, S, A, S))
    transitions = draws / draws.sum(axis=-1, keepdims=True)
    return TabularMdp(rewards, transitions)


def sample_initial_state(S: int, rng: np.random.Generator) -> int:
    """Uniform initial state.  Always consumes exactly one uniform draw."""
    if S < 1:
        raise ValueError("S must be positive")
    s = int(rng.random() * S)
    return s if s < S else S - 1


def sample_episode(
    mdp: TabularMdp,
    policy: DeterministicPolicy | np.ndarray,
    s1: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll out one episode of ``H`` steps; consumes exactly ``H`` uniforms."""
    if not 0 <= s1 < mdp.S:
        raise ValueError(f"initial state {s1} out of range")
    table = policy.actions if isinstance(policy, DeterministicPolicy) else policy
    acts = table.tolist() if isinstance(table, np.ndarray) else table
    uniforms = rng.random(mdp.H).tolist()
    rewards = mdp._reward_rows
    steps = []
    s = s1
    for h in range(mdp.H):
        a = acts[h][s]
        s_next = mdp.next_state(h, s, a, uniforms[h])
        steps.append(Step(s, a, rewards[h][s][a], s_next))
        s = s_next
    return Trajectory(s1, steps)


def agent_streams(seed: int, M: int) -> list[np.random.Generator]:
    """Independent generator per agent.

    Agent ``m`` draws from ``SeedSequence(seed, spawn_key=(m,))``, so adding
    agents never perturbs the streams of existing ones.
    """
    return [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(m,)))
        for m in range(M)
    ]
