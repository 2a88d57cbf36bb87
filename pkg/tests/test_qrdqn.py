import numpy as np
import pytest
from scipy.stats import chisquare

from qdrl.mdp import FiniteMdp, build_chain_mdp, policy_iteration
from qdrl.network import AdamState, MlpParams, adam_step, mlp_backward, mlp_forward
from qdrl.qrdqn import (
    AgentConfig,
    ReplayBuffer,
    bellman_target,
    epsilon_greedy,
    greedy_action,
    qrdqn_loss,
    train_qrdqn,
)


def _net(rng, n_in=4, hidden=(6, 5), n_actions=2, n=3):
    return MlpParams.init(n_in, hidden, n_actions, n, rng)


def _pre_activations(params, x):
    h, out = x, []
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w + b
        out.append(z)
        h = np.maximum(z, 0.0)
    return out


class TestNetwork:
    def test_zero_weights(self):
        p = _net(np.random.default_rng(0))
        z = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
        assert np.all(mlp_forward(z, np.ones(4)) == 0.0)

    def test_single_linear_layer(self):
        rng = np.random.default_rng(1)
        w, b = rng.normal(size=(3, 4)), rng.normal(size=4)
        p = MlpParams([w], [b], 2, 2)
        x = rng.normal(size=3)
        np.testing.assert_allclose(mlp_forward(p, x), (x @ w + b).reshape(2, 2))

    def test_finite_outputs(self):
        rng = np.random.default_rng(2)
        out = mlp_forward(_net(rng), rng.uniform(-1, 1, size=(1000, 4)))
        assert out.shape == (1000, 2, 3) and np.all(np.isfinite(out))

    def test_shape_errors(self):
        p = _net(np.random.default_rng(3))
        with pytest.raises(ValueError):
            mlp_forward(p, np.ones(5))
        with pytest.raises(ValueError):
            mlp_backward(p, np.ones(4), np.ones((3, 2)))
        with pytest.raises(ValueError):
            MlpParams([np.ones((2, 3))], [np.ones(3)], 2, 2)

    def test_zero_out_grad(self):
        p = _net(np.random.default_rng(4))
        g = mlp_backward(p, np.ones(4), np.zeros((2, 3)))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_linear_gradient_is_outer_product(self):
        rng = np.random.default_rng(5)
        p = MlpParams([rng.normal(size=(3, 4))], [np.zeros(4)], 2, 2)
        x, g = rng.normal(size=3), rng.normal(size=(2, 2))
        grads = mlp_backward(p, x, g)
        np.testing.assert_allclose(grads.weights[0], np.outer(x, g.ravel()))
        np.testing.assert_allclose(grads.biases[0], g.ravel())

    def test_finite_differences(self):
        rng = np.random.default_rng(6)
        p = _net(rng)
        h = 1e-6
        probes = 0
        while probes < 20:
            x = rng.normal(size=4)
            if min(np.abs(z).min() for z in _pre_activations(p, x)) < 1e-3:
                continue  # too close to a ReLU kink
            g = rng.normal(size=(2, 3))
            grads = mlp_backward(p, x, g).arrays()
            arrays = p.arrays()
            k = int(rng.integers(len(arrays)))
            idx = tuple(int(rng.integers(s)) for s in arrays[k].shape)
            up = [a.copy() for a in arrays]
            dn = [a.copy() for a in arrays]
            up[k][idx] += h
            dn[k][idx] -= h
            fd = (np.sum(mlp_forward(p.with_arrays(up), x) * g)
                  - np.sum(mlp_forward(p.with_arrays(dn), x) * g)) / (2 * h)
            exact = grads[k][idx]
            assert abs(fd - exact) <= 1e-5 * max(abs(exact), 1e-3)
            probes += 1

    def test_json_round_trip(self):
        p = _net(np.random.default_rng(7))
        back = MlpParams.from_dict(p.to_dict())
        assert all(np.array_equal(a, b) for a, b in zip(back.arrays(), p.arrays()))


class TestAdam:
    def test_zero_gradient(self):
        p = [np.ones(3)]
        st = AdamState([np.full(3, 0.5)], [np.full(3, 0.25)], 4)
        new, st2 = adam_step(p, [np.zeros(3)], st, 0.1)
        np.testing.assert_allclose(st2.m[0], 0.45)
        np.testing.assert_allclose(st2.v[0], 0.25 * 0.999)
        # from fresh moments a zero gradient leaves the parameters where they are
        new, _ = adam_step(p, [np.zeros(3)], AdamState.zeros_like(p), 0.1)
        np.testing.assert_array_equal(new[0], p[0])

    def test_first_step(self):
        g, lr, eps = 0.3, 0.01, 1e-3
        new, _ = adam_step([np.zeros(1)], [np.full(1, g)], AdamState.zeros_like([np.zeros(1)]),
                           lr, adam_eps=eps)
        assert new[0][0] == pytest.approx(-lr * g / (abs(g) + eps))

    def test_constant_gradient_step_size(self):
        p = [np.zeros(2)]
        st = AdamState.zeros_like(p)
        for _ in range(3000):
            prev = p[0].copy()
            p, st = adam_step(p, [np.array([2.0, -0.5])], st, 0.01, adam_eps=1e-8)
        np.testing.assert_allclose(np.abs(p[0] - prev), 0.01, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState.zeros_like([np.zeros(2)]), 0.1)


class TestActions:
    def test_greedy(self):
        assert greedy_action(np.zeros((1, 4))) == 0
        assert greedy_action(np.array([[1.0, 1.0], [2.0, 2.0]])) == 1
        th = np.random.default_rng(0).normal(size=(5, 8))
        assert greedy_action(th + 3.7) == greedy_action(th)

    def test_epsilon_zero(self):
        th = np.array([[0.0], [1.0], [0.5]])
        rng = np.random.default_rng(1)
        assert all(epsilon_greedy(th, 0.0, rng) == 1 for _ in range(100))

    def test_epsilon_one_uniform(self):
        th = np.array([[0.0], [1.0], [0.5], [0.2]])
        rng = np.random.default_rng(2)
        counts = np.bincount([epsilon_greedy(th, 1.0, rng) for _ in range(100_000)],
                             minlength=4)
        assert chisquare(counts).pvalue > 1e-3

    def test_epsilon_half(self):
        th = np.array([[1.0], [0.0]])
        rng = np.random.default_rng(3)
        frac = np.mean([epsilon_greedy(th, 0.5, rng) == 0 for _ in range(20_000)])
        assert abs(frac - 0.75) < 4 * np.sqrt(0.75 * 0.25 / 20_000)

    def test_epsilon_range(self):
        with pytest.raises(ValueError):
            epsilon_greedy(np.zeros((2, 1)), 1.5, np.random.default_rng(0))


class TestTargetsAndLoss:
    def test_done_target(self):
        np.testing.assert_array_equal(bellman_target(np.ones((2, 3)), 1.0, True, 0.9), 1.0)

    def test_gamma_zero(self):
        th = np.random.default_rng(0).normal(size=(2, 3))
        np.testing.assert_array_equal(bellman_target(th, 0.4, False, 0.0), 0.4)

    def test_uses_greedy_next_action(self):
        th = np.array([[0.0, 0.0], [1.0, 3.0]])
        np.testing.assert_allclose(bellman_target(th, 1.0, False, 0.5), [1.5, 2.5])

    def test_batched_matches_single(self):
        rng = np.random.default_rng(1)
        th = rng.normal(size=(4, 2, 3))
        r, d = rng.normal(size=4), np.array([True, False, False, True])
        out = bellman_target(th, r, d, 0.9)
        for b in range(4):
            np.testing.assert_allclose(out[b], bellman_target(th[b], r[b], d[b], 0.9))

    def test_loss_examples(self):
        loss, grad = qrdqn_loss(np.array([2.0]), np.array([2.0]), 0.0)
        assert loss == 0.0
        assert grad[0] == -0.5  # the u = 0 subgradient takes the 1[u < 0] = 0 branch
        loss, _ = qrdqn_loss(np.zeros(2), np.array([0.0, 1.0]), 0.0)
        assert loss == pytest.approx(0.5)
        with pytest.raises(ValueError):
            qrdqn_loss(np.zeros(2), np.zeros(3), 0.0)

    @pytest.mark.parametrize("kappa", [0.0, 1.0])
    def test_loss_gradient_finite_differences(self, kappa):
        rng = np.random.default_rng(2)
        h = 1e-6
        for _ in range(20):
            pred, tgt = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
            u = tgt[:, None, :] - pred[:, :, None]
            if np.min(np.abs(u)) < 1e-3 or np.min(np.abs(np.abs(u) - kappa)) < 1e-3:
                continue
            loss, grad = qrdqn_loss(pred, tgt, kappa)
            assert loss >= 0
            fd = np.zeros_like(pred)
            for idx in np.ndindex(pred.shape):
                up, dn = pred.copy(), pred.copy()
                up[idx] += h
                dn[idx] -= h
                fd[idx] = (qrdqn_loss(up, tgt, kappa)[0] - qrdqn_loss(dn, tgt, kappa)[0]) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)


class TestReplay:
    def test_fifo_and_sampling(self):
        buf = ReplayBuffer(3)
        with pytest.raises(ValueError):
            buf.sample(1, np.random.default_rng(0))
        for i in range(5):
            buf.add(i, 0, float(i), i + 1, False)
        assert len(buf) == 3
        assert sorted(buf.states.tolist()) == [2, 3, 4]
        b = buf.sample(2, np.random.default_rng(0))
        assert set(b.states.tolist()) <= {2, 3, 4}
        with pytest.raises(ValueError):
            buf.sample(4, np.random.default_rng(0))


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            AgentConfig(kappa=-1)
        with pytest.raises(ValueError):
            AgentConfig(epsilon_start=0.1, epsilon_end=0.5)
        with pytest.raises(ValueError):
            AgentConfig.from_dict({"nope": 1})
        cfg = AgentConfig(epsilon_decay_steps=100)
        assert cfg.epsilon(0) == 1.0 and cfg.epsilon(100) == pytest.approx(0.01)

    def test_one_state_fixed_point(self):
        mdp = FiniteMdp(np.ones((1, 1, 1)), np.ones((1, 1, 1)), 0.5, np.array([False]))
        cfg = AgentConfig(N=8, total_steps=3000, learning_starts=64, hidden_sizes=(16,),
                          target_sync=50, lr=3e-3, max_episode_steps=50, seed=0)
        res = train_qrdqn(mdp, cfg)
        assert abs(mlp_forward(res.params, np.ones(1)).mean() - 2.0) < 0.05

    @pytest.mark.parametrize("kappa", [0.0, 1.0])
    def test_chain_policy_and_determinism(self, kappa):
        env = build_chain_mdp()
        cfg = AgentConfig(kappa=kappa, total_steps=2000, epsilon_decay_steps=1000,
                          eval_every=500, seed=1)
        a, b = train_qrdqn(env, cfg), train_qrdqn(env, cfg)
        assert a.records == b.records
        assert all(np.isfinite(r.loss) for r in a.records)
        live = ~env.terminal
        assert np.array_equal(a.policy.greedy_actions()[live],
                              policy_iteration(env).greedy_actions()[live])
