import math

import numpy as np
import pytest

from imarl import gcl, nn
from imarl.gcl import (
    BackgroundBatch,
    LinearGaussianController,
    PolicySnapshot,
    RewardNet,
    fit_demo_controller,
    importance_log_weights,
    importance_weights,
    reward_gradient,
    reward_objective,
    reward_objective_parts,
    trajectory_logprob,
    trajectory_return,
)
from imarl.trajectory import Trajectory

from enumerable_mdp import coin_policy, enumerate_trajectories, exact_partition, soft_optimal_policy


def make_reward_net(obs_dim=3, act_dim=2, seed=0, scale=1.0):
    net = RewardNet.create(obs_dim, act_dim, width=8, rng=np.random.default_rng(seed))
    net.theta *= scale
    return net


def random_traj(rng, t_len=10, sd=3, ad=2, **kw):
    return Trajectory(states=rng.normal(size=(t_len, sd)), actions=rng.normal(size=(t_len, ad)), **kw)


class TestTrajectoryReturn:
    def test_zero_params_zero_return(self):
        net = make_reward_net(scale=0.0)
        tau = random_traj(np.random.default_rng(0))
        assert trajectory_return(net, tau) == 0.0

    def test_bounded_by_half_length(self):
        net = make_reward_net(scale=50.0)
        tau = random_traj(np.random.default_rng(1), t_len=1000)
        assert abs(trajectory_return(net, tau)) < 500.0

    def test_matches_stepwise_loop(self):
        net = make_reward_net()
        tau = random_traj(np.random.default_rng(2))
        total = 0.0
        for t in range(len(tau)):
            total += float(net.rewards(tau.states[t][None, :], tau.actions[t][None, :])[0])
        assert abs(trajectory_return(net, tau) - total) < 1e-12


class TestFitDemoController:
    def test_noiseless_recovery(self):
        rng = np.random.default_rng(3)
        w0 = rng.normal(size=(2, 3))
        b0 = rng.normal(size=2)
        demos = []
        for _ in range(4):
            states = rng.normal(size=(50, 3))
            demos.append(Trajectory(states=states, actions=states @ w0.T + b0))
        ctrl = fit_demo_controller(demos)
        np.testing.assert_allclose(ctrl.W, w0, atol=1e-6)
        np.testing.assert_allclose(ctrl.b, b0, atol=1e-6)
        np.testing.assert_allclose(ctrl.sigma, 1e-6, atol=1e-6)

    def test_zero_states_ridge_limit(self):
        rng = np.random.default_rng(4)
        actions = rng.normal(size=(100, 2)) + 3.0
        demos = [Trajectory(states=np.zeros((100, 3)), actions=actions)]
        ctrl = fit_demo_controller(demos)
        np.testing.assert_allclose(ctrl.W, 0.0, atol=1e-9)
        np.testing.assert_allclose(ctrl.b, actions.mean(axis=0), atol=1e-6)

    def test_sigma_recovery_within_5pct(self):
        rng = np.random.default_rng(5)
        w0 = rng.normal(size=(2, 3))
        b0 = rng.normal(size=2)
        sigma0 = np.array([0.3, 0.7])
        states = rng.normal(size=(10_000, 3))
        actions = states @ w0.T + b0 + sigma0 * rng.normal(size=(10_000, 2))
        ctrl = fit_demo_controller([Trajectory(states=states, actions=actions)])
        np.testing.assert_allclose(ctrl.sigma, sigma0, rtol=0.05)

    def test_too_few_steps_rejected(self):
        with pytest.raises(ValueError, match="steps"):
            fit_demo_controller([Trajectory(states=np.zeros((2, 3)), actions=np.zeros((2, 2)))])


class TestTrajectoryLogprob:
    def test_single_step_equals_gaussian_density(self):
        rng = np.random.default_rng(6)
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.array([0.5, 1.5]))
        tau = random_traj(rng, t_len=1)
        mean = ctrl.W @ tau.states[0] + ctrl.b
        expect = sum(
            -0.5 * ((tau.actions[0, d] - mean[d]) / ctrl.sigma[d]) ** 2
            - math.log(ctrl.sigma[d])
            - 0.5 * math.log(2 * math.pi)
            for d in range(2)
        )
        assert abs(trajectory_logprob(ctrl, tau) - expect) < 1e-12

    def test_mode_property_at_sigma_floor(self):
        rng = np.random.default_rng(7)
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.full(2, 1e-6))
        states = rng.normal(size=(5, 3))
        exact = Trajectory(states=states, actions=ctrl.mean_actions(states))
        lp_exact = trajectory_logprob(ctrl, exact)
        for _ in range(10):
            perturbed = Trajectory(states=states, actions=exact.actions + 1e-5 * rng.normal(size=(5, 2)))
            assert trajectory_logprob(ctrl, perturbed) < lp_exact

    def test_matches_linear_space_product(self):
        rng = np.random.default_rng(8)
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.array([0.8, 1.2]))
        tau = random_traj(rng, t_len=5)
        mean = ctrl.mean_actions(tau.states)
        prod = 1.0
        for t in range(5):
            for d in range(2):
                prod *= math.exp(-0.5 * ((tau.actions[t, d] - mean[t, d]) / ctrl.sigma[d]) ** 2) / (
                    ctrl.sigma[d] * math.sqrt(2 * math.pi)
                )
        assert abs(trajectory_logprob(ctrl, tau) - math.log(prod)) < 1e-10

    def test_snapshot_density_matches_policy_outputs(self):
        from imarl.refer import PolicyValueNet, gaussian_logpdf

        net = PolicyValueNet.create(3, 2, width=8, rng=np.random.default_rng(9))
        snap = PolicySnapshot(snapshot_id=0, spec=net.spec, theta=net.theta.copy())
        tau = random_traj(np.random.default_rng(10), t_len=7)
        _, mean, std = net.outputs(tau.states)
        expect = float(np.sum(gaussian_logpdf(tau.actions, mean, std)))
        assert abs(trajectory_logprob(snap, tau) - expect) < 1e-10


class TestImportanceWeights:
    def test_single_policy_inverse_density(self):
        rng = np.random.default_rng(11)
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.ones(2))
        tau = random_traj(rng, t_len=3)
        w = importance_weights([tau], [ctrl])
        assert abs(w[0] - 1.0 / math.exp(trajectory_logprob(ctrl, tau))) < 1e-9

    def test_duplicated_policy_matches_single(self):
        rng = np.random.default_rng(12)
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.ones(2))
        t1, t2 = random_traj(rng, t_len=3), random_traj(rng, t_len=3)
        w_pair = importance_weights([t1, t2], [ctrl, ctrl])
        w1 = importance_weights([t1], [ctrl])
        w2 = importance_weights([t2], [ctrl])
        assert abs(w_pair[0] - w1[0]) < 1e-12 * abs(w1[0])
        assert abs(w_pair[1] - w2[0]) < 1e-12 * abs(w2[0])

    def test_distinct_equal_policies_same_as_duplicates(self):
        rng = np.random.default_rng(13)
        mk = lambda: LinearGaussianController(W=np.ones((2, 3)), b=np.zeros(2), sigma=np.ones(2))
        t1 = random_traj(rng, t_len=3)
        w_dup = importance_weights([t1, t1], [mk(), mk()])
        w_single = importance_weights([t1], [mk()])
        np.testing.assert_allclose(w_dup, w_single[0], rtol=1e-12)

    def test_log_space_survives_extreme_densities(self):
        # 1000-step trajectory: linear-space density underflows to zero
        rng = np.random.default_rng(14)
        ctrl = LinearGaussianController(W=np.zeros((2, 3)), b=np.zeros(2), sigma=np.full(2, 0.1))
        tau = random_traj(rng, t_len=1000)
        logw = importance_log_weights([tau], [ctrl])
        assert np.isfinite(logw[0])

    def test_mixture_partition_estimate_within_5pct(self):
        # 2-policy mixture sampler over the enumerable space, 1e4 samples:
        # self-normalized weighted estimate of Z = sum e^R vs exact enumeration
        horizon = 6
        space = enumerate_trajectories(horizon)
        net = make_reward_net(obs_dim=1, act_dim=1, seed=15)
        net.theta *= 3.0
        z_exact = exact_partition(net, space)

        pol_a = coin_policy(horizon, 0.35)
        pol_b = coin_policy(horizon, 0.75)
        rng = np.random.default_rng(16)
        samples, policies = [], []
        for _ in range(10_000):
            pol = pol_a if rng.uniform() < 0.5 else pol_b
            samples.append(pol.sample(rng))
            policies.append(pol)
        logw = importance_log_weights(samples, policies)
        returns = np.array([trajectory_return(net, tau) for tau in samples])
        # self-normalized: |Omega| * sum(w e^R) / sum(w)
        s = logw + returns
        peak = s.max()
        num = np.exp(peak) * np.sum(np.exp(s - peak))
        den = np.sum(np.exp(logw - peak)) * np.exp(peak)
        z_hat = len(space) * num / den
        assert abs(z_hat - z_exact) / z_exact < 0.05


class TestRewardObjective:
    def _pooled(self, seed=17, t_len=4):
        rng = np.random.default_rng(seed)
        demos = [random_traj(rng, t_len=t_len) for _ in range(3)]
        bgs = [random_traj(rng, t_len=t_len) for _ in range(3)]
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.ones(2))
        logw = importance_log_weights(demos + bgs, [ctrl] * 6)
        return demos, bgs, logw

    def test_zero_net_reduces_to_weight_average(self):
        demos, bgs, logw = self._pooled()
        net = make_reward_net(scale=0.0)
        k = len(demos)
        expect = -k * (np.log(np.sum(np.exp(logw))) - np.log(len(logw)))
        assert abs(reward_objective(net, demos, bgs, logw) - expect) < 1e-10

    def test_linearity_in_demo_returns_with_frozen_partition(self):
        demos, bgs, logw = self._pooled()
        net = make_reward_net(seed=18)
        parts = reward_objective_parts(net, demos, bgs, logw)
        delta = 0.37
        shifted = parts.demo_return_sum + len(demos) * delta
        assert abs((shifted - parts.demo_count * parts.log_partition) - (parts.objective + len(demos) * delta)) < 1e-10

    def test_empty_minibatch_rejected(self):
        net = make_reward_net()
        with pytest.raises(ValueError):
            reward_objective(net, [], [], np.array([]))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        demos = [random_traj(rng, t_len=3) for _ in range(2)]
        bgs = [random_traj(rng, t_len=3) for _ in range(2)]
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.ones(2))
        logw = importance_log_weights(demos + bgs, [ctrl] * 4)
        net = make_reward_net(seed=seed)
        grad, _ = reward_gradient(net, demos, bgs, logw)

        h = 1e-6
        fd = np.zeros_like(net.theta)
        for i in range(net.theta.size):
            tp = net.theta.copy()
            tm = net.theta.copy()
            tp[i] += h
            tm[i] -= h
            net_p = RewardNet(net.spec, tp, net.obs_dim, net.act_dim)
            net_m = RewardNet(net.spec, tm, net.obs_dim, net.act_dim)
            fd[i] = (reward_objective(net_p, demos, bgs, logw) - reward_objective(net_m, demos, bgs, logw)) / (2 * h)
        err = np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-4

    def test_identical_demo_and_bg_minibatch_cancellation(self):
        # both sums share the trajectories: per-trajectory coefficient
        # collapses to (1 - 2 K w_m); compare against per-trajectory gradients
        rng = np.random.default_rng(19)
        trajs = [random_traj(rng, t_len=3) for _ in range(3)]
        ctrl = LinearGaussianController(W=rng.normal(size=(2, 3)), b=rng.normal(size=2), sigma=np.ones(2))
        logw = importance_log_weights(trajs + trajs, [ctrl] * 6)
        net = make_reward_net(seed=20)
        grad, _ = reward_gradient(net, trajs, trajs, logw)

        returns = np.array([trajectory_return(net, t) for t in trajs])
        s = np.asarray(logw) + np.concatenate([returns, returns])
        s -= s.max()
        wtil = np.exp(s) / np.exp(s).sum()
        k = 3
        per_traj = []
        for tau in trajs:
            rows = np.concatenate([tau.states, tau.actions], axis=1)
            g, _ = nn.backward(net.spec, net.theta, rows, np.ones((len(tau), 1)))
            per_traj.append(g)
        expect = sum((1.0 - k * wtil[i] - k * wtil[k + i]) * per_traj[i] for i in range(3))
        np.testing.assert_allclose(grad, expect, atol=1e-12)


class TestBackgroundBatch:
    def _snap(self, sid, seed=0):
        from imarl.refer import PolicyValueNet

        net = PolicyValueNet.create(3, 2, width=8, rng=np.random.default_rng(seed))
        return PolicySnapshot(snapshot_id=sid, spec=net.spec, theta=net.theta.copy())

    def test_fifo_eviction(self):
        bg = BackgroundBatch(capacity=3)
        rng = np.random.default_rng(21)
        snaps = [self._snap(i) for i in range(5)]
        trajs = [random_traj(rng, snapshot_id=i, source="background") for i in range(5)]
        for t, s in zip(trajs, snaps):
            bg.add(t, s)
        assert len(bg) == 3
        assert [t.snapshot_id for t in bg.trajectories] == [2, 3, 4]
        assert set(bg._snapshots) == {2, 3, 4}

    def test_snapshot_id_mismatch_rejected(self):
        bg = BackgroundBatch()
        with pytest.raises(ValueError):
            bg.add(random_traj(np.random.default_rng(0), snapshot_id=1, source="background"), self._snap(2))

    def test_reward_update_moves_params_and_reports(self):
        rng = np.random.default_rng(22)
        net = make_reward_net(seed=23)
        demos = [random_traj(rng, t_len=6) for _ in range(5)]
        ctrl = fit_demo_controller(demos)
        bg = BackgroundBatch()
        for i in range(4):
            snap = self._snap(i, seed=i)
            bg.add(random_traj(rng, t_len=6, snapshot_id=i, source="background"), snap)
        adam = nn.AdamState.for_params(net.theta, lr=1e-3)
        before = net.theta.copy()
        stats = gcl.reward_update(net, demos, ctrl, bg, adam, rng, demo_minibatch=4, bg_minibatch=4)
        assert not np.array_equal(before, net.theta)
        assert np.isfinite(stats.objective)

    def test_reward_update_requires_background(self):
        rng = np.random.default_rng(24)
        net = make_reward_net()
        demos = [random_traj(rng, t_len=6) for _ in range(3)]
        ctrl = fit_demo_controller(demos)
        adam = nn.AdamState.for_params(net.theta)
        with pytest.raises(ValueError, match="background"):
            gcl.reward_update(net, demos, ctrl, BackgroundBatch(), adam, rng)


class TestRewardSensitivity:
    def _setup(self):
        from imarl import swarm

        cfg = swarm.SwarmConfig(n_agents=10, k_neighbors=7, r_repulsion=1.0, r_orientation=3.4, r_attraction=16.0)
        state = swarm.init_state(cfg, np.random.default_rng(25))
        net = RewardNet.create(cfg.obs_dim, 2, width=8, rng=np.random.default_rng(26))
        return net, state, cfg

    def test_zero_rotation_reproduces_unperturbed(self):
        from imarl import swarm

        net, state, cfg = self._setup()
        grid, per_agent, mean, _ = gcl.reward_sensitivity(net, state, cfg, dphi_grid=np.array([0.0]))
        base = np.array(
            [net.rewards(swarm.observe(state, i, cfg)[None, :], np.zeros((1, 2)))[0] for i in range(10)]
        )
        np.testing.assert_allclose(per_agent[0], base, atol=1e-12)

    def test_two_pi_periodicity(self):
        net, state, cfg = self._setup()
        grid, per_agent, _, _ = gcl.reward_sensitivity(net, state, cfg, dphi_grid=np.array([-np.pi, np.pi]))
        np.testing.assert_allclose(per_agent[0], per_agent[1], atol=1e-9)
