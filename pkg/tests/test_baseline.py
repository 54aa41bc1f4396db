import math

import numpy as np
import pytest

from fedq_lowcost.baseline import FederatedHoeffding, HoeffdingLearner, HoeffdingState
from fedq_lowcost.fedq import ServerState, agent_explore_lockstep, make_broadcast
from fedq_lowcost.harness import RunConfig, run
from fedq_lowcost.mdp import agent_streams, sample_episode, sample_initial_state

C_B = math.sqrt(2.0)


def q_ceiling(H, iota=1.0, c_b=C_B):
    # each target is at most 1 + H + b_1 and Q starts at H
    return 1.0 + H + c_b * math.sqrt(H**3 * iota)


class TestInitial:
    def test_state(self):
        st = HoeffdingState.initial(3, 2, 2)
        assert np.all(st.Q == 3.0) and np.all(st.V == 3.0) and np.all(st.N == 0)


class TestSingleAgent:
    def test_zero_regret_trivial_mdp(self):
        m = run(RunConfig(H=4, S=1, A=1, T0=400, algorithm="hoeffding_baseline"))
        assert m.final_regret == 0.0
        assert len(m.rounds) == 100

    def test_first_update_by_hand(self, mdp_5327):
        rng = np.random.default_rng(5)
        learner = HoeffdingLearner(mdp_5327, C_B, 1.0, rng)
        ref = np.random.default_rng(5)
        s1 = sample_initial_state(3, ref)
        traj = sample_episode(mdp_5327, np.zeros((5, 3), dtype=int), s1, ref)
        assert learner.run_episode() == s1
        st = learner.state
        b1 = C_B * math.sqrt(125.0)
        for h, step in enumerate(traj.steps):
            v_next = 5.0 if h < 4 else 0.0
            assert st.Q[h, step.state, 0] == pytest.approx(step.reward + v_next + b1, rel=1e-15)
            assert st.N[h, step.state, 0] == 1

    def test_bounds_and_clipping(self, mdp_5327):
        learner = HoeffdingLearner(mdp_5327, C_B, 1.0, np.random.default_rng(0))
        top = q_ceiling(5)
        for _ in range(3000):
            learner.run_episode()
            st = learner.state
            assert st.Q.min() >= 0.0 and st.Q.max() <= top
            assert np.array_equal(st.V, np.minimum(5.0, st.Q.max(axis=-1)))

    def test_unclipped_estimate_can_exceed_twice_horizon(self, mdp_5327):
        # with the default bonus scale the very first update already overshoots 2H
        learner = HoeffdingLearner(mdp_5327, C_B, 1.0, np.random.default_rng(0))
        learner.run_episode()
        assert learner.state.Q.max() > 2 * 5

    def test_shares_environment_stream(self, mdp_5327):
        """Same generator and same policy yield the same episode as the main learners' sampler."""
        learner = HoeffdingLearner(mdp_5327, C_B, 1.0, np.random.default_rng(8))
        ref = np.random.default_rng(8)
        s1 = sample_initial_state(3, ref)
        sample_episode(mdp_5327, np.zeros((5, 3), dtype=int), s1, ref)
        learner.run_episode()
        assert learner.rng.random() == ref.random()


class TestFederated:
    def test_first_round_matches_main_exploration(self, mdp_5327):
        fed = FederatedHoeffding(mdp_5327, 3, C_B, 1.0, agent_streams(4, 3))
        res_b = fed.run_round()
        res_a = agent_explore_lockstep(mdp_5327, make_broadcast(ServerState.initial(5, 3, 2)), 3, agent_streams(4, 3))
        assert res_a.episodes_per_agent == res_b.episodes_per_agent
        assert np.array_equal(res_a.initial_counts, res_b.initial_counts)
        for a, b in zip(res_a.reports, res_b.reports):
            assert np.array_equal(a.n, b.n)

    def test_rounds_respect_bounds(self, mdp_5327):
        fed = FederatedHoeffding(mdp_5327, 4, C_B, 1.0, agent_streams(1, 4))
        top = q_ceiling(5)
        for _ in range(200):
            fed.run_round()
            st = fed.state
            assert st.Q.min() >= 0.0 and st.Q.max() <= top
            assert np.array_equal(st.V, np.minimum(5.0, st.Q.max(axis=-1)))
        assert fed.ledger.rounds == 200
        assert fed.ledger.total == 200 * (13 * 4 * 15 + 5)

    def test_zero_regret_trivial_mdp(self):
        m = run(RunConfig.from_episodes(200, H=3, S=1, A=1, M=3, algorithm="hoeffding_baseline"))
        assert m.final_regret == 0.0
