"""Tests for the gate point-mass environment and the quadratic oracle task."""

import numpy as np
import pytest

from selfpaced.envs import GATE_PARAM_DIM, GateEnv, QuadraticEnv, gate_reward, success
from selfpaced.gauss import rng_from_seed


def _gate_controller(gate_x: float) -> np.ndarray:
    """Hand-tuned two-phase controller: cancel the drift, steer to the gate,
    then steer to the origin."""
    theta = np.zeros(GATE_PARAM_DIM)
    theta[0:4] = [5.0, 0.0, 0.0, 0.0]   # K1
    theta[4:6] = [-5.0, 0.0]            # k1 cancels the x-drift
    theta[6] = gate_x                   # aim at the gate centre
    theta[7:11] = [5.0, 0.0, 0.0, 5.0]  # K2
    theta[11:13] = [-5.0, 1.0]          # k2 cancels the full drift
    theta[13] = 0.0                     # then go home
    return theta


class TestGateDynamics:
    def test_zero_controller_drifts_into_wall(self):
        env = GateEnv()
        result = env.rollout(np.zeros(GATE_PARAM_DIM), np.array([0.0, 1.0]))
        assert result.crashed
        # drift [5, -1] from (0, 5) crosses y=2.5 at x=12.5
        assert result.final[1] == pytest.approx(env.wall_y)
        assert result.final[0] == pytest.approx(12.5, abs=1e-9)

    def test_zero_controller_passes_gate_at_crossing_point(self):
        env = GateEnv(context_highs=(20.0, 8.0))
        result = env.rollout(np.zeros(GATE_PARAM_DIM),
                             np.array([12.5, 1.0]))
        assert not result.crashed

    def test_hand_controller_solves_many_contexts(self):
        env = GateEnv()
        for gate_x in (-3.0, 0.0, 2.5):
            for width in (0.1, 1.0, 6.0):
                context = np.array([gate_x, width])
                result = env.rollout(_gate_controller(gate_x), context)
                assert result.success, (gate_x, width, result.final)
                assert result.reward > 8.0

    def test_noise_free_rollout_is_deterministic(self):
        env = GateEnv()
        theta = _gate_controller(1.0)
        c = np.array([1.0, 0.5])
        a = env.rollout(theta, c)
        b = env.rollout(theta, c)
        assert a.reward == b.reward
        assert np.array_equal(a.final, b.final)

    def test_seeded_noise_is_reproducible(self):
        env = GateEnv()
        theta = _gate_controller(1.0)
        c = np.array([1.0, 0.5])
        a = env.rollout(theta, c, rng=rng_from_seed(42))
        b = env.rollout(theta, c, rng=rng_from_seed(42))
        assert a.reward == b.reward

    def test_wider_gate_forgives_worse_aim(self):
        env = GateEnv()
        theta = _gate_controller(0.5)  # aims 0.5 left of the gate
        passes = []
        for width in (0.2, 0.6, 1.5, 3.0):
            result = env.rollout(theta, np.array([1.0, width]))
            passes.append(not result.crashed)
        # once a width admits the trajectory, all wider gates do too
        assert passes == sorted(passes)
        assert passes[-1]

    def test_crash_interpolates_crossing(self):
        env = GateEnv()
        result = env.rollout(np.zeros(GATE_PARAM_DIM), np.array([0.0, 0.1]))
        # the interpolated wall hit lies exactly on the wall
        assert result.final[1] == pytest.approx(env.wall_y)

    def test_unstable_controller_gets_zero_reward(self):
        theta = np.zeros(GATE_PARAM_DIM)
        theta[0] = -100.0  # positive feedback in x
        env = GateEnv()
        result = env.rollout(theta, np.array([0.0, 8.0]))
        assert result.reward == 0.0

    def test_batch_matches_scalar(self):
        env = GateEnv()
        thetas = np.stack([_gate_controller(x) for x in (-1.0, 0.0, 2.0)])
        contexts = np.array([[-1.0, 0.5], [0.0, 2.0], [2.0, 0.1]])
        rewards, finals, succ, crash = env.rollout_batch(thetas, contexts)
        for i in range(3):
            single = env.rollout(thetas[i], contexts[i])
            assert rewards[i] == pytest.approx(single.reward)
            assert np.allclose(finals[i], single.final)

    def test_traced_rollout_matches_plain(self):
        env = GateEnv()
        theta = _gate_controller(2.5)
        c = np.array([2.5, 0.1])
        plain = env.rollout(theta, c)
        traced = env.rollout(theta, c, record_trajectory=True)
        assert traced.reward == pytest.approx(plain.reward, rel=1e-12)
        assert traced.trajectory.shape[1] == 5


class TestGateReward:
    def test_reward_formula(self):
        final = np.array([3.0, 4.0])  # distance 5
        actions = np.array([[1.0, 0.0], [0.0, 2.0]])
        got = gate_reward(final, actions, kappa=10.0, nu=1e-4)
        assert got == pytest.approx(10.0 * np.exp(-5.0) - 1e-4 * 5.0)

    def test_reward_clipped_at_zero(self):
        final = np.array([50.0, 0.0])
        actions = np.full((100, 2), 10.0)
        assert gate_reward(final, actions, 10.0, 1e-4) == 0.0

    def test_success_is_strict_ball(self):
        goal = np.zeros(2)
        assert success(np.array([0.04, 0.0]), goal, tau=0.05)
        assert not success(np.array([0.05, 0.0]), goal, tau=0.05)

    def test_episode_success_requires_no_crash(self):
        env = GateEnv()
        rewards, finals, succ, crash = env.rollout_batch(
            np.zeros((1, GATE_PARAM_DIM)), np.array([[0.0, 0.1]]))
        assert crash[0] and not succ[0]


class TestContextBox:
    def test_clamp(self):
        env = GateEnv()
        out = env.clamp_contexts(np.array([[9.0, -3.0], [0.0, 1.0]]))
        assert np.allclose(out, [[4.0, 0.1], [0.0, 1.0]])

    def test_box_shape(self):
        lows, highs = GateEnv().box
        assert lows.shape == (2,) and highs.shape == (2,)
        assert np.all(highs > lows)


class TestQuadratic:
    def test_optimal_gain_maximizes_reward(self):
        env = QuadraticEnv()
        c = np.array([0.4, -0.7])
        theta = env.gain @ c
        result = env.rollout(theta, c)
        assert result.reward == pytest.approx(1.0)
        assert result.success

    def test_reward_is_squared_exponential(self):
        env = QuadraticEnv()
        c = np.array([0.2, 0.1])
        theta = env.gain @ c + np.array([0.3, -0.4])
        result = env.rollout(theta, c)
        assert result.reward == pytest.approx(np.exp(-0.25))

    def test_contexts_clamped_to_box(self):
        env = QuadraticEnv()
        big = np.array([5.0, -5.0])
        inside = np.array([1.0, -1.0])
        theta = env.gain @ inside
        r_big = env.rollout(theta, big).reward
        r_in = env.rollout(theta, inside).reward
        assert r_big == pytest.approx(r_in)
