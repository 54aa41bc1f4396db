"""Shared fixtures and independent reference computations for the test suite.

Helpers here deliberately avoid the package's own numerics: policy values
come from brute-force enumeration and sampling uses a separate vectorized
simulator.
"""

import itertools

import numpy as np
import pytest

from fedq_lowcost.mdp import TabularMdp, generate_random_mdp


@pytest.fixture(scope="session")
def mdp_5327():
    return generate_random_mdp(5, 3, 2, seed=7)


@pytest.fixture(scope="session")
def mdp_2223():
    return generate_random_mdp(2, 2, 2, seed=3)


def all_policies(H, S, A):
    for flat in itertools.product(range(A), repeat=H * S):
        yield np.array(flat).reshape(H, S)


def brute_policy_value(mdp, policy):
    """V^pi by explicit recursion over the tables, one entry at a time."""
    H, S = mdp.H, mdp.S
    V = [[0.0] * S for _ in range(H + 1)]
    for h in reversed(range(H)):
        for s in range(S):
            a = int(policy[h][s])
            V[h][s] = mdp.rewards[h, s, a] + sum(
                mdp.transitions[h, s, a, t] * V[h + 1][t] for t in range(S)
            )
    return np.array(V)


def brute_optimum(mdp):
    """Elementwise max of V^pi over every deterministic policy."""
    return np.max([brute_policy_value(mdp, p) for p in all_policies(mdp.H, mdp.S, mdp.A)], axis=0)


def simulate(mdp, policy, n, rng, s1=None):
    """Vectorized rollouts: returns (states (n, H+1), rewards (n, H))."""
    H, S = mdp.H, mdp.S
    policy = np.asarray(policy)
    states = np.empty((n, H + 1), dtype=np.int64)
    states[:, 0] = rng.integers(0, S, n) if s1 is None else s1
    rewards = np.empty((n, H))
    cdf = np.cumsum(mdp.transitions, axis=-1)
    for h in range(H):
        s = states[:, h]
        a = policy[h, s]
        rewards[:, h] = mdp.rewards[h, s, a]
        u = rng.random(n)
        nxt = (cdf[h, s, a] <= u[:, None]).sum(axis=1)
        states[:, h + 1] = np.minimum(nxt, S - 1)
    return states, rewards


def one_hot_mdp(H, S, A, rewards, nxt):
    """Deterministic MDP where action a in state s at step h leads to nxt[h][s][a]."""
    P = np.zeros((H, S, A, S))
    for h in range(H):
        for s in range(S):
            for a in range(A):
                P[h, s, a, nxt[h][s][a]] = 1.0
    return TabularMdp(np.asarray(rewards, dtype=float), P)


# Acceptance criteria append (number, passed, detail) here; printed at session end.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
