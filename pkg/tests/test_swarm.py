import math

import numpy as np
import pytest

from imarl import swarm
from imarl.swarm import SwarmConfig, SwarmState


def make_config(**kw):
    base = dict(n_agents=25, r_repulsion=1.0, r_orientation=4.0, r_attraction=12.0)
    base.update(kw)
    return SwarmConfig(**base)


def state_from(positions, headings, t=0):
    positions = np.asarray(positions, dtype=float)
    headings = np.asarray(headings, dtype=float)
    headings = headings / np.linalg.norm(headings, axis=1, keepdims=True)
    return SwarmState(positions, headings, t)


class TestConfig:
    def test_rejects_bad_radii(self):
        with pytest.raises(ValueError):
            make_config(r_repulsion=5.0, r_orientation=4.0)

    def test_rejects_too_many_neighbors(self):
        with pytest.raises(ValueError):
            make_config(n_agents=5, k_neighbors=5)


class TestInitState:
    def test_single_agent_unit_heading(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = swarm.init_state(cfg, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(st.headings, axis=1), 1.0, atol=1e-12)
        assert st.t == 0

    def test_mean_position_is_centered(self):
        # 1e4 draws of N=25: per-coordinate variance of uniform ball is R^2/5.
        cfg = make_config()
        rng = np.random.default_rng(1)
        total = np.zeros(3)
        draws = 10_000
        for _ in range(draws):
            total += swarm.init_state(cfg, rng).positions.mean(axis=0)
        mean = total / draws
        sigma = cfg.spawn_radius / math.sqrt(5.0 * cfg.n_agents * draws)
        assert np.all(np.abs(mean) < 3.0 * sigma * 1.5)  # 3-sigma with slack

    def test_positions_inside_ball(self):
        cfg = make_config(init_radius=7.5)
        st = swarm.init_state(cfg, np.random.default_rng(2))
        assert np.all(np.linalg.norm(st.positions, axis=1) <= 7.5 + 1e-12)

    def test_fixed_seed_bitwise_identical(self):
        cfg = make_config()
        a = swarm.init_state(cfg, np.random.default_rng(42))
        b = swarm.init_state(cfg, np.random.default_rng(42))
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.headings, b.headings)


class TestWishedDirection:
    def test_repulsion_two_agents(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [0.5, 0, 0]], [[0, 1, 0], [0, 1, 0]])
        np.testing.assert_allclose(swarm.wished_direction(st, 0, cfg), [-1, 0, 0], atol=1e-12)

    def test_single_orientation_neighbor(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [2.0, 0, 0]], [[1, 0, 0], [0, 1, 0]])
        np.testing.assert_allclose(swarm.wished_direction(st, 0, cfg), [0, 1, 0], atol=1e-12)

    def test_attraction_only(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [8.0, 0, 0]], [[0, 0, 1], [0, 0, 1]])
        np.testing.assert_allclose(swarm.wished_direction(st, 0, cfg), [1, 0, 0], atol=1e-12)

    def test_no_neighbors_keeps_heading(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [100.0, 0, 0]], [[0, 0, 1], [1, 0, 0]])
        np.testing.assert_allclose(swarm.wished_direction(st, 0, cfg), [0, 0, 1], atol=1e-12)

    def test_exact_repulsion_cancellation_falls_back(self):
        cfg = make_config(n_agents=3, k_neighbors=2)
        st = state_from([[0, 0, 0], [0.5, 0, 0], [-0.5, 0, 0]], [[0, 1, 0]] * 3)
        np.testing.assert_allclose(swarm.wished_direction(st, 0, cfg), [0, 1, 0], atol=1e-12)

    def test_orientation_and_attraction_sum(self):
        cfg = make_config(n_agents=3, k_neighbors=2)
        # one neighbor aligned +y in orientation zone, one at +x in attraction zone
        st = state_from([[0, 0, 0], [2.0, 0, 0], [8.0, 0, 0]], [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
        expect = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
        np.testing.assert_allclose(swarm.wished_direction(st, 0, cfg), expect, atol=1e-12)


class TestTurnPrimitives:
    def test_apply_turn_zero_is_identity(self):
        h = np.array([0.3, -0.4, 0.866])
        h /= np.linalg.norm(h)
        assert np.array_equal(swarm.apply_turn(h, 0.0, 0.0), h)

    def test_yaw_rotates_about_z(self):
        h = np.array([1.0, 0.0, 0.0])
        out = swarm.apply_turn(h, math.radians(4.0), 0.0)
        np.testing.assert_allclose(out, [math.cos(math.radians(4)), math.sin(math.radians(4)), 0.0], atol=1e-15)

    def test_pitch_raises_heading(self):
        h = np.array([1.0, 0.0, 0.0])
        out = swarm.apply_turn(h, 0.0, math.radians(10.0))
        np.testing.assert_allclose(out, [math.cos(math.radians(10)), 0.0, math.sin(math.radians(10))], atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_action_roundtrip_exact(self, seed):
        rng = np.random.default_rng(seed)
        h0 = rng.normal(size=3)
        h0 /= np.linalg.norm(h0)
        dphi, dtheta = rng.uniform(-0.07, 0.07, size=2)
        h1 = swarm.apply_turn(h0, dphi, dtheta)
        d2phi, d2theta = swarm.heading_change_to_action(h0, h1)
        assert abs(d2phi - dphi) < 1e-12
        assert abs(d2theta - dtheta) < 1e-12
        np.testing.assert_allclose(np.linalg.norm(h1), 1.0, atol=1e-12)

    def test_rotate_toward_respects_limit(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.normal(size=3)
            a /= np.linalg.norm(a)
            b = rng.normal(size=3)
            b /= np.linalg.norm(b)
            out = swarm.rotate_toward(a, b, 0.07)
            ang = math.atan2(np.linalg.norm(np.cross(a, out)), a @ out)
            assert ang <= 0.07 + 1e-12


class TestModelStep:
    def test_noiseless_aligned_agents_translate(self):
        cfg = make_config(n_agents=2, k_neighbors=1, noise_sigma=0.0)
        # both in orientation zone, already aligned: wished == heading
        st = state_from([[0, 0, 0], [2.0, 0, 0]], [[1, 0, 0], [1, 0, 0]])
        nxt = swarm.model_step(st, cfg, np.random.default_rng(0))
        np.testing.assert_allclose(nxt.headings, st.headings, atol=1e-12)
        np.testing.assert_allclose(nxt.positions, st.positions + cfg.dt * cfg.speed * st.headings, atol=1e-12)
        assert nxt.t == 1

    def test_antipodal_wish_turns_exactly_max_turn(self):
        cfg = make_config(n_agents=2, k_neighbors=1, noise_sigma=0.0)
        # agent 1 far ahead in the attraction zone behind agent 0: the wish for
        # agent 0 points opposite to its heading
        st = state_from([[0, 0, 0], [-8.0, 0, 0]], [[1, 0, 0], [1, 0, 0]])
        nxt = swarm.model_step(st, cfg, np.random.default_rng(0))
        h0 = st.headings[0]
        h1 = nxt.headings[0]
        ang = math.atan2(np.linalg.norm(np.cross(h0, h1)), h0 @ h1)
        assert abs(ang - cfg.max_turn) < 1e-9

    def test_speed_conservation_invariant(self):
        cfg = make_config()
        rng = np.random.default_rng(5)
        st = swarm.init_state(cfg, rng)
        for _ in range(50):
            prev = st
            st = swarm.model_step(st, cfg, rng)
            np.testing.assert_allclose(np.linalg.norm(st.headings, axis=1), 1.0, atol=1e-9)
            disp = np.linalg.norm(st.positions - prev.positions, axis=1)
            np.testing.assert_allclose(disp, cfg.dt * cfg.speed, atol=1e-9)

    def test_noiseless_step_deterministic(self):
        cfg = make_config(noise_sigma=0.0)
        st = swarm.init_state(cfg, np.random.default_rng(7))
        a = swarm.model_step(st, cfg, np.random.default_rng(1))
        b = swarm.model_step(st, cfg, np.random.default_rng(2))
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.headings, b.headings)

    def test_synchronous_update_permutation_equivariant(self):
        cfg = make_config(noise_sigma=0.0)
        rng = np.random.default_rng(8)
        st = swarm.init_state(cfg, rng)
        perm = np.random.default_rng(9).permutation(cfg.n_agents)
        st_perm = SwarmState(st.positions[perm], st.headings[perm], st.t)
        nxt = swarm.model_step(st, cfg, np.random.default_rng(0))
        nxt_perm = swarm.model_step(st_perm, cfg, np.random.default_rng(0))
        np.testing.assert_allclose(nxt_perm.positions, nxt.positions[perm], atol=1e-12)
        np.testing.assert_allclose(nxt_perm.headings, nxt.headings[perm], atol=1e-12)


class TestPolicyStep:
    def test_zero_actions_pure_translation(self):
        cfg = make_config(n_agents=3, k_neighbors=2)
        st = swarm.init_state(cfg, np.random.default_rng(1))
        nxt = swarm.policy_step(st, np.zeros((3, 2)), cfg)
        assert np.array_equal(nxt.headings, st.headings)
        np.testing.assert_allclose(nxt.positions, st.positions + cfg.dt * cfg.speed * st.headings, atol=1e-15)

    def test_max_yaw_rotates_about_z(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [5, 5, 5]], [[1, 0, 0], [0, 1, 0]])
        actions = np.array([[cfg.max_turn, 0.0], [0.0, 0.0]])
        nxt = swarm.policy_step(st, actions, cfg)
        np.testing.assert_allclose(nxt.headings[0], [math.cos(cfg.max_turn), math.sin(cfg.max_turn), 0.0], atol=1e-12)

    def test_actions_clipped(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [5, 5, 5]], [[1, 0, 0], [0, 1, 0]])
        big = np.array([[1.0, 0.0], [0.0, 0.0]])
        nxt = swarm.policy_step(st, big, cfg)
        ang = math.acos(np.clip(nxt.headings[0] @ st.headings[0], -1, 1))
        assert abs(ang - cfg.max_turn) < 1e-9

    def test_nonfinite_actions_raise(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = swarm.init_state(cfg, np.random.default_rng(0))
        with pytest.raises(ValueError):
            swarm.policy_step(st, np.array([[np.nan, 0.0], [0.0, 0.0]]), cfg)

    def test_replaying_model_actions_reproduces_trajectory(self):
        # cross-check oracle between the two steppers: noise folded into actions
        cfg = make_config(noise_sigma=0.35)
        rng = np.random.default_rng(11)
        st_model = swarm.init_state(cfg, rng)
        st_replay = st_model.copy()
        for _ in range(100):
            st_model, actions = swarm.model_step_actions(st_model, cfg, rng)
            st_replay = swarm.policy_step(st_replay, actions, cfg)
            np.testing.assert_allclose(st_replay.positions, st_model.positions, atol=1e-9)
            np.testing.assert_allclose(st_replay.headings, st_model.headings, atol=1e-9)


class TestObserve:
    def test_neighbor_directly_ahead(self):
        cfg = make_config(n_agents=2, k_neighbors=1)
        st = state_from([[0, 0, 0], [3.0, 0, 0]], [[1, 0, 0], [1, 0, 0]])
        feats = swarm.observe(st, 0, cfg)
        np.testing.assert_allclose(feats, [3.0, 0, 0, 0, 0], atol=1e-12)

    def test_feature_length_and_sorting(self):
        cfg = make_config()
        st = swarm.init_state(cfg, np.random.default_rng(3))
        feats = swarm.observe(st, 0, cfg)
        assert feats.shape == (35,)
        dists = feats[0::5]
        assert np.all(np.diff(dists) >= 0)
        angles = np.concatenate([feats[1::5], feats[2::5], feats[3::5], feats[4::5]])
        assert np.all(angles > -np.pi) and np.all(angles <= np.pi)

    def test_translation_invariance(self):
        cfg = make_config()
        st = swarm.init_state(cfg, np.random.default_rng(4))
        shifted = SwarmState(st.positions + np.array([17.0, -3.0, 9.0]), st.headings.copy(), st.t)
        for i in range(cfg.n_agents):
            np.testing.assert_allclose(swarm.observe(st, i, cfg), swarm.observe(shifted, i, cfg), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_rotation_about_z_invariance(self, seed):
        cfg = make_config()
        rng = np.random.default_rng(seed)
        st = swarm.init_state(cfg, rng)
        ang = rng.uniform(0, 2 * np.pi)
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        st_rot = SwarmState(st.positions @ rot.T, st.headings @ rot.T, st.t)
        for i in range(cfg.n_agents):
            np.testing.assert_allclose(swarm.observe(st, i, cfg), swarm.observe(st_rot, i, cfg), atol=1e-9)


class TestBatchedEquivalence:
    """The vectorized internals must agree with the per-agent reference functions."""

    @pytest.mark.parametrize("seed", range(5))
    def test_wished_directions_match_scalar(self, seed):
        cfg = make_config()
        st = swarm.init_state(cfg, np.random.default_rng(seed))
        batch = swarm._wished_directions(st, cfg)
        for i in range(cfg.n_agents):
            np.testing.assert_allclose(batch[i], swarm.wished_direction(st, i, cfg), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_observe_all_matches_scalar(self, seed):
        cfg = make_config()
        st = swarm.init_state(cfg, np.random.default_rng(seed))
        batch = swarm.observe_all(st, cfg)
        for i in range(cfg.n_agents):
            np.testing.assert_allclose(batch[i], swarm.observe(st, i, cfg), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_apply_turn_batch_matches_scalar(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.normal(size=(16, 3))
        h /= np.linalg.norm(h, axis=1, keepdims=True)
        dphi = rng.uniform(-0.07, 0.07, 16)
        dtheta = rng.uniform(-0.07, 0.07, 16)
        batch = swarm._apply_turn_batch(h, dphi, dtheta)
        for i in range(16):
            np.testing.assert_allclose(batch[i], swarm.apply_turn(h[i], dphi[i], dtheta[i]), atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_rotate_toward_batch_matches_scalar(self, seed):
        rng = np.random.default_rng(seed)
        cur = rng.normal(size=(16, 3))
        cur /= np.linalg.norm(cur, axis=1, keepdims=True)
        tgt = rng.normal(size=(16, 3))
        tgt /= np.linalg.norm(tgt, axis=1, keepdims=True)
        batch = swarm._rotate_toward_batch(cur, tgt, 0.07)
        for i in range(16):
            np.testing.assert_allclose(batch[i], swarm.rotate_toward(cur[i], tgt[i], 0.07), atol=1e-13)


class TestOrderParameters:
    def test_perfect_mill(self):
        n = 8
        ang = 2 * np.pi * np.arange(n) / n
        positions = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1) * 5.0
        headings = np.stack([-np.sin(ang), np.cos(ang), np.zeros(n)], axis=1)
        st = SwarmState(positions, headings)
        r, p = swarm.order_parameters(st)
        assert abs(r - 1.0) < 1e-9
        assert abs(p) < 1e-12

    def test_perfect_school(self):
        rng = np.random.default_rng(0)
        positions = rng.normal(size=(10, 3))
        headings = np.tile(np.array([0.0, 1.0, 0.0]), (10, 1))
        _, p = swarm.order_parameters(SwarmState(positions, headings))
        assert abs(p - 1.0) < 1e-9

    def test_agent_at_centroid_contributes_zero(self):
        positions = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0.0, 0, 0]])
        # centroid is origin; agent 3 sits exactly there
        headings = np.tile(np.array([0.0, 0.0, 1.0]), (4, 1))
        r, _ = swarm.order_parameters(SwarmState(positions, headings))
        assert np.isfinite(r)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        cfg = make_config()
        st = swarm.init_state(cfg, rng)
        r, p = swarm.order_parameters(st)
        # independent evaluation of the two order-parameter formulas
        mu = st.positions.mean(axis=0)
        acc = np.zeros(3)
        for i in range(cfg.n_agents):
            rel = st.positions[i] - mu
            acc += np.cross(rel / np.linalg.norm(rel), st.headings[i])
        r_ref = np.linalg.norm(acc) / cfg.n_agents
        p_ref = np.linalg.norm(st.headings.sum(axis=0)) / cfg.n_agents
        assert abs(r - r_ref) < 1e-12
        assert abs(p - p_ref) < 1e-12
        assert 0.0 <= r <= 1.0
        assert 0.0 <= p <= 1.0
