"""Episodic contextual environments.

The gate task steers a drifting point-mass from [0, 5] to the origin through
a gate in a wall at y = 2.5; the context is the gate's x-position and width.
The quadratic task is a noise-free oracle with a known optimal linear policy,
used to validate the learning loop end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RolloutResult",
    "GateEnv",
    "QuadraticEnv",
    "GATE_PARAM_DIM",
]

# theta layout: [K1 (row-major 2x2), k1 (2), x1_des, K2 (2x2), k2 (2), x2_des]
GATE_PARAM_DIM = 14


@dataclass(frozen=True)
class RolloutResult:
    reward: float
    final: np.ndarray
    success: bool
    crashed: bool
    trajectory: np.ndarray | None = None


def _unpack_controllers(thetas: np.ndarray):
    t = np.atleast_2d(thetas)
    if t.shape[1] != GATE_PARAM_DIM:
        raise ValueError(f"theta must have {GATE_PARAM_DIM} entries")
    gains1 = t[:, 0:4].reshape(-1, 2, 2)
    offs1 = t[:, 4:6]
    xdes1 = t[:, 6]
    gains2 = t[:, 7:11].reshape(-1, 2, 2)
    offs2 = t[:, 11:13]
    xdes2 = t[:, 13]
    return gains1, offs1, xdes1, gains2, offs2, xdes2


@dataclass(frozen=True)
class GateEnv:
    """Point-mass-through-a-gate task."""

    kappa: float = 10.0
    nu: float = 1e-4
    tau: float = 0.05
    dt: float = 0.05
    horizon: int = 100
    noise_std: float = np.sqrt(2.5e-3)
    wall_y: float = 2.5
    drift: tuple[float, float] = (5.0, -1.0)
    start: tuple[float, float] = (0.0, 5.0)
    context_lows: tuple[float, float] = (-4.0, 0.1)
    context_highs: tuple[float, float] = (4.0, 8.0)

    context_dim = 2
    param_dim = GATE_PARAM_DIM

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.context_lows), np.array(self.context_highs)

    def clamp_contexts(self, contexts: np.ndarray) -> np.ndarray:
        lows, highs = self.box
        return np.clip(contexts, lows, highs)

    def rollout_batch(self, thetas: np.ndarray, contexts: np.ndarray,
                      noise: np.ndarray | None = None):
        """Simulate a batch of episodes; `noise` is (m, horizon, 2) or None
        for the noise-free system.

        Returns (rewards, finals, successes, crashes).
        """
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        contexts = self.clamp_contexts(
            np.atleast_2d(np.asarray(contexts, dtype=float)))
        m = thetas.shape[0]
        if contexts.shape != (m, 2):
            raise ValueError("contexts must be (m, 2)")
        g1, o1, x1, g2, o2, x2 = _unpack_controllers(thetas)
        gate_x, gate_w = contexts[:, 0], contexts[:, 1]

        state = np.tile(np.asarray(self.start, dtype=float), (m, 1))
        drift = np.asarray(self.drift, dtype=float)
        active = np.ones(m, dtype=bool)
        passed = np.zeros(m, dtype=bool)
        crashed = np.zeros(m, dtype=bool)
        diverged = np.zeros(m, dtype=bool)
        finals = state.copy()
        action_sq = np.zeros(m)

        targets1 = np.stack([x1, np.full(m, self.wall_y)], axis=1)
        targets2 = np.stack([x2, np.zeros(m)], axis=1)

        for t in range(self.horizon):
            err1 = targets1 - state
            err2 = targets2 - state
            u1 = np.einsum("mij,mj->mi", g1, err1) + o1
            u2 = np.einsum("mij,mj->mi", g2, err2) + o2
            u = np.where(passed[:, None], u2, u1)
            action_sq += np.where(active, np.sum(u * u, axis=1), 0.0)

            step = self.dt * (drift + u)
            if noise is not None:
                step = step + np.sqrt(self.dt) * noise[:, t, :]
            nxt = np.where(active[:, None], state + step, state)

            bad = active & ~np.all(np.isfinite(nxt), axis=1)
            if np.any(bad):
                # Unstable control law: stop with zero reward via divergence.
                diverged |= bad
                active &= ~bad
                nxt = np.where(bad[:, None], state, nxt)

            above = state[:, 1] > self.wall_y
            nxt_above = nxt[:, 1] > self.wall_y
            crossing = active & (above != nxt_above)
            if np.any(crossing):
                dy = state[:, 1] - nxt[:, 1]
                frac = np.divide(state[:, 1] - self.wall_y, dy,
                                 out=np.zeros_like(dy),
                                 where=np.abs(dy) > 1e-300)
                x_cross = state[:, 0] + frac * (nxt[:, 0] - state[:, 0])
                hit_wall = crossing & (
                    np.abs(x_cross - gate_x) > 0.5 * gate_w)
                through = crossing & ~hit_wall
                passed |= through
                if np.any(hit_wall):
                    crashed |= hit_wall
                    finals[hit_wall, 0] = x_cross[hit_wall]
                    finals[hit_wall, 1] = self.wall_y
                    active &= ~hit_wall

            state = np.where(active[:, None], nxt, state)
            if not np.any(active):
                break

        finals = np.where((crashed | diverged)[:, None], finals, state)
        dist = np.linalg.norm(finals, axis=1)
        rewards = np.maximum(
            self.kappa * np.exp(-dist) - self.nu * action_sq, 0.0)
        rewards = np.where(diverged, 0.0, rewards)
        successes = (dist < self.tau) & ~crashed & ~diverged
        return rewards, finals, successes, crashed | diverged

    def rollout(self, theta: np.ndarray, context: np.ndarray,
                rng: np.random.Generator | None = None,
                record_trajectory: bool = False) -> RolloutResult:
        """Single episode; deterministic given (theta, context, seed)."""
        noise = None
        if rng is not None:
            noise = self.noise_std * rng.standard_normal((1, self.horizon, 2))
        if not record_trajectory:
            rewards, finals, succ, crash = self.rollout_batch(
                theta, context, noise)
            return RolloutResult(float(rewards[0]), finals[0], bool(succ[0]),
                                 bool(crash[0]))
        return self._rollout_traced(np.asarray(theta, dtype=float),
                                    np.asarray(context, dtype=float), noise)

    def _rollout_traced(self, theta, context, noise):
        # Scalar re-run of the batch dynamics that also records (t, x, y, u).
        g1, o1, x1, g2, o2, x2 = _unpack_controllers(theta[None, :])
        context = self.clamp_contexts(context[None, :])[0]
        gate_x, gate_w = context
        state = np.asarray(self.start, dtype=float).copy()
        drift = np.asarray(self.drift, dtype=float)
        passed = crashed = diverged = False
        rows, action_sq = [], 0.0
        for t in range(self.horizon):
            target = (np.array([x2[0], 0.0]) if passed
                      else np.array([x1[0], self.wall_y]))
            gains = g2[0] if passed else g1[0]
            offs = o2[0] if passed else o1[0]
            u = gains @ (target - state) + offs
            rows.append([t * self.dt, state[0], state[1], u[0], u[1]])
            action_sq += float(u @ u)
            step = self.dt * (drift + u)
            if noise is not None:
                step = step + np.sqrt(self.dt) * noise[0, t, :]
            nxt = state + step
            if not np.all(np.isfinite(nxt)):
                diverged = True
                break
            if (state[1] > self.wall_y) != (nxt[1] > self.wall_y):
                frac = (state[1] - self.wall_y) / (state[1] - nxt[1])
                x_cross = state[0] + frac * (nxt[0] - state[0])
                if abs(x_cross - gate_x) > 0.5 * gate_w:
                    crashed = True
                    state = np.array([x_cross, self.wall_y])
                    break
                passed = True
            state = nxt
        dist = float(np.linalg.norm(state))
        reward = 0.0 if diverged else max(
            self.kappa * np.exp(-dist) - self.nu * action_sq, 0.0)
        success = dist < self.tau and not crashed and not diverged
        return RolloutResult(reward, state, success, crashed or diverged,
                             trajectory=np.array(rows))

    def run_episodes(self, thetas, contexts, rng: np.random.Generator | None):
        noise = None
        m = np.atleast_2d(thetas).shape[0]
        if rng is not None:
            noise = self.noise_std * rng.standard_normal((m, self.horizon, 2))
        return self.rollout_batch(thetas, contexts, noise)


def gate_reward(final: np.ndarray, actions, kappa: float, nu: float) -> float:
    """Clipped goal-distance reward with an action-magnitude penalty."""
    final = np.asarray(final, dtype=float)
    actions = np.asarray(actions, dtype=float)
    penalty = float(np.sum(actions * actions))
    return max(kappa * np.exp(-np.linalg.norm(final)) - nu * penalty, 0.0)


def success(final: np.ndarray, goal: np.ndarray, tau: float) -> bool:
    return bool(np.linalg.norm(np.asarray(final) - np.asarray(goal)) < tau)


@dataclass(frozen=True)
class QuadraticEnv:
    """Noise-free oracle task with reward exp(-||theta - G c||^2).

    The optimal linear policy gain equals G exactly, which makes the task a
    convenient end-to-end check for the full learning loop.
    """

    gain: np.ndarray = field(
        default_factory=lambda: np.array([[1.0, -0.5], [0.3, 0.8]]))
    context_lows: tuple[float, ...] = (-1.0, -1.0)
    context_highs: tuple[float, ...] = (1.0, 1.0)
    success_reward: float = 0.9

    @property
    def context_dim(self) -> int:
        return np.asarray(self.gain).shape[1]

    @property
    def param_dim(self) -> int:
        return np.asarray(self.gain).shape[0]

    @property
    def box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array(self.context_lows), np.array(self.context_highs)

    def clamp_contexts(self, contexts: np.ndarray) -> np.ndarray:
        lows, highs = self.box
        return np.clip(contexts, lows, highs)

    def run_episodes(self, thetas, contexts, rng=None):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        contexts = self.clamp_contexts(
            np.atleast_2d(np.asarray(contexts, dtype=float)))
        resid = thetas - contexts @ np.asarray(self.gain).T
        rewards = np.exp(-np.sum(resid * resid, axis=1))
        successes = rewards > self.success_reward
        finals = thetas
        crashes = np.zeros(rewards.size, dtype=bool)
        return rewards, finals, successes, crashes

    def rollout(self, theta, context, rng=None) -> RolloutResult:
        rewards, finals, succ, crash = self.run_episodes(theta, context)
        return RolloutResult(float(rewards[0]), finals[0], bool(succ[0]),
                             bool(crash[0]))
