import numpy as np
import pytest
from scipy.stats import chisquare

from qdrl.distributions import maximal_wasserstein
from qdrl.mdp import (
    GRID_GOAL,
    GRID_START,
    FiniteMdp,
    Policy,
    build_chain_mdp,
    build_counterexample_mdp,
    build_windy_gridworld,
    exact_value,
    expected_steps,
    greedy,
    policy_iteration,
    random_mdp,
    sample_next_states,
    sample_transition,
    state_values,
    windy_grid_layout,
)
from qdrl.oracle import monte_carlo_returns

# V(x_S) of the policy-iteration policy, cross-checked below against plain
# value iteration and a 10^5-rollout Monte-Carlo estimate
GRID_START_VALUE = 0.8294713547779533


def _value_iteration(mdp, policy, sweeps=20_000):
    """Independent oracle: fixed-point iteration of V <- r_pi + gamma P_pi V."""
    v = np.zeros(mdp.n_states)
    r = (mdp.transition * mdp.reward).sum(axis=2)
    for _ in range(sweeps):
        q = r + mdp.gamma * mdp.transition @ v
        new = (policy.action_probs * q).sum(axis=1)
        if np.max(np.abs(new - v)) < 1e-14:
            break
        v = new
    return new


def _one_state(r=1.0, gamma=0.5):
    return FiniteMdp(np.ones((1, 1, 1)), np.full((1, 1, 1), r), gamma, np.array([False]))


@pytest.fixture(scope="module")
def grid():
    mdp = build_windy_gridworld()
    return mdp, policy_iteration(mdp)


class TestValidation:
    def test_rows_must_sum_to_one(self):
        p = np.array([[[0.5, 0.4]], [[0.0, 1.0]]])
        with pytest.raises(ValueError):
            FiniteMdp(p, np.zeros_like(p), 0.9, np.array([False, True]))

    def test_terminal_self_loop(self):
        p = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
        with pytest.raises(ValueError):
            FiniteMdp(p, np.zeros_like(p), 0.9, np.array([False, True]))

    def test_gamma_range(self):
        with pytest.raises(ValueError):
            _one_state(gamma=1.5)

    def test_json_round_trip(self):
        mdp = build_chain_mdp()
        back = FiniteMdp.from_json(mdp.to_json())
        np.testing.assert_array_equal(back.transition, mdp.transition)
        # only positive-probability transitions are serialised
        live = mdp.transition > 0
        np.testing.assert_array_equal(back.reward[live], mdp.reward[live])
        assert back.gamma == mdp.gamma and back.start_state == mdp.start_state

    def test_solvers_reject_gamma_one(self):
        with pytest.raises(ValueError):
            state_values(_one_state(gamma=1.0), Policy.uniform(1, 1))


class TestSampling:
    def test_deterministic(self):
        mdp = build_chain_mdp(slip=0.0)
        rng = np.random.default_rng(0)
        assert {sample_transition(mdp, 1, 1, rng).next_state for _ in range(50)} == {2}

    def test_terminal_rejected(self):
        mdp = build_chain_mdp()
        with pytest.raises(ValueError):
            sample_transition(mdp, mdp.n_states - 1, 0, np.random.default_rng(0))

    def test_invalid_action(self):
        with pytest.raises(ValueError):
            sample_transition(build_chain_mdp(), 0, 5, np.random.default_rng(0))

    @pytest.mark.parametrize("a", [0, 1, 2, 3])
    def test_chi_square_vectorised(self, grid, a):
        mdp, _ = grid
        x = mdp.start_state
        n = 10 ** 6
        y = sample_next_states(mdp, np.full(n, x), np.full(n, a), np.random.default_rng(a))
        p = mdp.transition[x, a]
        support = np.flatnonzero(p)
        counts = np.bincount(y, minlength=mdp.n_states)
        assert counts[p == 0].sum() == 0
        assert chisquare(counts[support], n * p[support]).pvalue > 1e-3

    def test_chi_square_single(self, grid):
        mdp, _ = grid
        x, a, n = mdp.start_state, 1, 20_000
        rng = np.random.default_rng(9)
        ys = [sample_transition(mdp, x, a, rng).next_state for _ in range(n)]
        p = mdp.transition[x, a]
        support = np.flatnonzero(p)
        counts = np.bincount(ys, minlength=mdp.n_states)
        assert chisquare(counts[support], n * p[support]).pvalue > 1e-3


class TestSolvers:
    def test_geometric_series(self):
        assert exact_value(_one_state(), Policy.uniform(1, 1))[0, 0] == pytest.approx(2.0)

    def test_zero_rewards(self):
        mdp = random_mdp(np.random.default_rng(0))
        mdp = FiniteMdp(mdp.transition, np.zeros_like(mdp.reward), mdp.gamma, mdp.terminal)
        assert np.all(exact_value(mdp, Policy.uniform(mdp.n_states, mdp.n_actions)) == 0)

    def test_bellman_residual(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mdp = random_mdp(rng, max_states=8)
            pi = Policy(rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states))
            q = exact_value(mdp, pi)
            v = (pi.action_probs * q).sum(axis=1)
            r = (mdp.transition * mdp.reward).sum(axis=2)
            assert np.max(np.abs(q - r - mdp.gamma * mdp.transition @ v)) < 1e-9

    def test_greedy_tie_break(self):
        assert greedy(np.array([[1.0, 1.0, 0.5], [0.0, 2.0, 2.0]])).tolist() == [0, 1]

    def test_single_action(self):
        mdp = random_mdp(np.random.default_rng(2), max_actions=1)
        assert np.all(policy_iteration(mdp).greedy_actions() == 0)

    def test_chain_moves_right(self):
        for n in (2, 5):
            mdp = build_chain_mdp(n)
            assert np.all(policy_iteration(mdp).greedy_actions()[:-1] == 1)

    def test_policy_iteration_is_self_greedy(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mdp = random_mdp(rng)
            pi = policy_iteration(mdp)
            assert np.array_equal(greedy(exact_value(mdp, pi)), pi.greedy_actions())


class TestGridworld:
    def test_layout(self):
        layout = windy_grid_layout()
        assert len(layout.cells) == 12 * 8 - 7
        assert (6, 4) in layout.index and (6, 3) not in layout.index

    def test_rewards(self, grid):
        mdp, _ = grid
        goal = windy_grid_layout().state_of(*GRID_GOAL)
        assert mdp.terminal.sum() == 1 and mdp.terminal[goal]
        assert mdp.start_state == windy_grid_layout().state_of(*GRID_START)
        live = ~mdp.terminal
        assert np.all(mdp.reward[live][:, :, goal] == 1.0)
        mask = np.ones(mdp.n_states, dtype=bool)
        mask[goal] = False
        assert np.all(mdp.reward[:, :, mask] == 0.0)
        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)

    def test_start_value_against_value_iteration(self, grid):
        mdp, pi = grid
        v = state_values(mdp, pi)
        assert v[mdp.start_state] == pytest.approx(GRID_START_VALUE, abs=1e-9)
        np.testing.assert_allclose(v, _value_iteration(mdp, pi), atol=1e-9)

    def test_start_value_against_monte_carlo(self, grid):
        mdp, pi = grid
        g = monte_carlo_returns(mdp, pi, mdp.start_state, 10 ** 5, np.random.default_rng(4))
        se = g.std(ddof=1) / np.sqrt(len(g))
        assert abs(g.mean() - GRID_START_VALUE) < 2 * se

    def test_optimal_beats_random_policies(self, grid):
        mdp, pi = grid
        best = state_values(mdp, pi)[mdp.start_state]
        rng = np.random.default_rng(5)
        for _ in range(100):
            rand = Policy.deterministic(rng.integers(4, size=mdp.n_states), 4)
            assert state_values(mdp, rand)[mdp.start_state] <= best + 1e-12

    def test_multimodal_returns(self, grid):
        mdp, pi = grid
        g = monte_carlo_returns(mdp, pi, mdp.start_state, 10 ** 4, np.random.default_rng(6))
        hist, _ = np.histogram(g, bins=50)
        peaks = [i for i in range(1, 49)
                 if hist[i] > 0 and hist[i] >= hist[i - 1] and hist[i] > hist[i + 1]]
        assert len(peaks) >= 2

    def test_expected_steps(self, grid):
        mdp, pi = grid
        steps = expected_steps(mdp, pi)[mdp.start_state]
        assert 10 < steps < 40
        # without slip, always moving left never reaches the goal
        chain = build_chain_mdp(slip=0.0)
        left = Policy.deterministic(np.zeros(chain.n_states, dtype=int), 2)
        assert np.isinf(expected_steps(chain, left)[0])
        right = Policy.deterministic(np.ones(chain.n_states, dtype=int), 2)
        assert expected_steps(chain, right)[0] == pytest.approx(chain.n_states - 1)


class TestCounterexample:
    def test_tables(self):
        mdp, z, y = build_counterexample_mdp()
        assert mdp.gamma == 1.0
        assert z[(1, 0)].locs.tolist() == [0.0, 2.0] and z[(2, 0)].locs.tolist() == [3.0, 5.0]
        assert y[(1, 0)].locs.tolist() == [1.0, 2.0] and y[(2, 0)].locs.tolist() == [4.0, 5.0]
        np.testing.assert_allclose(mdp.transition[0, 0], [0, 2 / 3, 1 / 3])

    def test_maximal_distances(self):
        _, z, y = build_counterexample_mdp()
        assert maximal_wasserstein(z, y, 1.0) == pytest.approx(0.5, abs=1e-15)
        assert maximal_wasserstein(z, y, 2.0) == pytest.approx(2 ** -0.5, abs=1e-15)
