"""Synthetic 2D manipulation task family.

Six tasks share one state space and one action space and differ only in
their reward, success predicate and initial-state samplers:

    reach, push-right, push-left, pick-place, press-down, press-up

State layout (8 dims): ``[gx, gy, grip, ox, oy, tx, ty, grasped]``.
Action layout (3 dims): ``[vx, vy, grip_cmd]``, clipped to ``[-1, 1]`` inside
``step``.

All dynamics are written for a batch of environments (leading axis), so a
single ``step`` call advances every episode of a PPO iteration at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STATE_DIM = 8
ACTION_DIM = 3
START = (0.0, 0.8)
# strict "inside the success disc" test, robust to accumulated roundoff on the boundary
EPS = 1e-12

GX, GY, GRIP, OX, OY, TX, TY, GRASPED = range(STATE_DIM)

TASK_NAMES = ("pick-place", "press-down", "press-up", "push-left", "push-right", "reach")

GRASP_TASKS = frozenset({"reach", "pick-place", "push-left", "push-right"})
PUSH_TASKS = frozenset({"push-left", "push-right"})
PRESS_TASKS = frozenset({"press-down", "press-up"})

Box = tuple[tuple[float, float], tuple[float, float]]


class CorruptedActionError(ValueError):
    """Raised when a policy emits non-finite action components."""


# (object box, goal box); push goals are offsets from the object, press goals
# coincide with the button.
DEFAULT_REGIONS: dict[str, dict[str, Box]] = {
    "reach": {"object": ((-0.4, 0.4), (-0.3, 0.2)), "goal": ((-0.4, 0.4), (-0.3, 0.4))},
    "pick-place": {"object": ((-0.4, 0.4), (0.0, 0.4)), "goal": ((-0.4, 0.4), (0.0, 0.5))},
    "push-right": {"object": ((-0.4, 0.1), (-0.3, 0.2)), "goal": ((0.2, 0.35), (0.0, 0.0))},
    "push-left": {"object": ((-0.1, 0.4), (-0.3, 0.2)), "goal": ((-0.35, -0.2), (0.0, 0.0))},
    "press-down": {"object": ((-0.4, 0.4), (-0.3, 0.2))},
    "press-up": {"object": ((-0.4, 0.4), (-0.3, 0.2))},
}


@dataclass(frozen=True)
class TaskSpec:
    """One task of the family: reward, dynamics and samplers."""

    name: str
    step_gain: float = 0.05
    grasp_radius: float = 0.05
    contact_radius: float = 0.06
    success_radius: float = 0.05
    # minimum per-step travel in the press direction for a press to register
    press_speed: float = 0.02
    # a held object is released once grip_cmd drops below this
    release_below: float = -0.5
    reward_scale: float = 1.0
    success_bonus: float = 1.0
    horizon: int = 100
    regions: dict = field(default=None, hash=False, compare=False)

    def __post_init__(self):
        if self.name not in TASK_NAMES:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASK_NAMES}")
        if self.regions is None:
            object.__setattr__(self, "regions", DEFAULT_REGIONS[self.name])
        if not 0 < self.reward_scale <= 1:
            raise ValueError("reward_scale must lie in (0, 1]")
        if self.horizon < 0:
            raise ValueError("horizon must be nonnegative")

    # -- sampling ---------------------------------------------------------
    def reset(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Sample ``n`` initial states."""
        s = np.zeros((n, STATE_DIM))
        s[:, GX], s[:, GY] = START
        (oxl, oxh), (oyl, oyh) = self.regions["object"]
        s[:, OX] = rng.uniform(oxl, oxh, n)
        s[:, OY] = rng.uniform(oyl, oyh, n)
        if self.name in PRESS_TASKS:
            s[:, TX], s[:, TY] = s[:, OX], s[:, OY]
        elif self.name in PUSH_TASKS:
            (dl, dh), _ = self.regions["goal"]
            s[:, TX] = s[:, OX] + rng.uniform(dl, dh, n)
            s[:, TY] = s[:, OY]
        else:
            (txl, txh), (tyl, tyh) = self.regions["goal"]
            s[:, TX] = rng.uniform(txl, txh, n)
            s[:, TY] = rng.uniform(tyl, tyh, n)
        return s

    # -- dynamics ---------------------------------------------------------
    def step(self, s: np.ndarray, a: np.ndarray):
        """Advance a batch of states. Returns ``(next_state, reward, success)``."""
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        single = s.ndim == 1
        s, a = np.atleast_2d(s), np.atleast_2d(a)
        if not np.all(np.isfinite(a)):
            raise CorruptedActionError("non-finite action component (corrupted policy output?)")
        a = np.clip(a, -1.0, 1.0)

        g_old = s[:, [GX, GY]]
        o_old = s[:, [OX, OY]]
        goal = s[:, [TX, TY]]
        g_new = np.clip(g_old + self.step_gain * a[:, :2], -1.0, 1.0)
        delta = g_new - g_old
        grip = a[:, 2] > 0.5
        was_grasped = s[:, GRASPED] > 0.5
        hold = a[:, 2] >= self.release_below

        o_new = o_old
        grasped = np.zeros(len(s), dtype=bool)
        if self.name in GRASP_TASKS:
            carried = was_grasped & hold
            o_new = o_old + delta * carried[:, None]
            if self.name in PUSH_TASKS:
                # the object slides along x only (a rail), and only away from
                # the side the gripper touches it from
                near = (np.linalg.norm(g_new - o_old, axis=1) < self.contact_radius) & ~carried
                side = np.sign(o_old[:, 0] - g_old[:, 0])
                shove = np.maximum(delta[:, 0] * side, 0.0) * side * near
                o_new = o_new + np.stack([shove, np.zeros_like(shove)], axis=1)
            o_new = np.clip(o_new, -1.0, 1.0)
            grasped = carried | (grip & (np.linalg.norm(g_new - o_new, axis=1) < self.grasp_radius))

        nxt = s.copy()
        nxt[:, [GX, GY]] = g_new
        nxt[:, GRIP] = grip
        nxt[:, [OX, OY]] = o_new
        nxt[:, GRASPED] = grasped

        d_go = np.linalg.norm(g_new - o_new, axis=1)
        if self.name == "reach":
            dist = np.linalg.norm(g_new - goal, axis=1)
            success = dist < self.success_radius - EPS
        elif self.name in PRESS_TASKS:
            dist = d_go
            sign = -1.0 if self.name == "press-down" else 1.0
            success = (dist < self.success_radius - EPS) & (sign * delta[:, 1] >= self.press_speed)
        else:
            to_goal = goal - o_new
            d_ot = np.linalg.norm(to_goal, axis=1)
            if self.name in PUSH_TASKS:
                # attract the gripper to the pushing stance behind the object
                unit = to_goal / np.maximum(d_ot, 1e-9)[:, None]
                stance = np.clip(o_new - self.contact_radius * unit, -1.0, 1.0)
                dist = 0.5 * (np.linalg.norm(g_new - stance, axis=1) + d_ot)
            else:
                dist = 0.45 * (d_go + d_ot) + 0.2 * ~grasped
            success = d_ot < self.success_radius - EPS
        reward = -self.reward_scale * dist + self.success_bonus * success
        if single:
            return nxt[0], float(reward[0]), bool(success[0])
        return nxt, reward, success


def make_task_space(names=TASK_NAMES, **params) -> dict[str, TaskSpec]:
    """Build the task family keyed by (lexicographically ordered) task id."""
    return {name: TaskSpec(name, **params) for name in sorted(names)}


def mirror_x(x: np.ndarray) -> np.ndarray:
    """Negate every x coordinate of a state or action batch."""
    x = np.array(x, dtype=float, copy=True)
    if x.shape[-1] == STATE_DIM:
        x[..., [GX, OX, TX]] *= -1
    else:
        x[..., 0] *= -1
    return x


@dataclass
class Episode:
    """A single recorded episode. ``states`` has one more row than ``actions``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    successes: np.ndarray
    truncated: bool

    def __len__(self):
        return len(self.actions)

    @property
    def success(self) -> bool:
        return bool(np.any(self.successes))

    @property
    def total_return(self) -> float:
        return float(np.sum(self.rewards))


@dataclass
class Batch:
    """Time-major arrays for ``n`` parallel full-horizon episodes.

    Shapes: states (n, T+1, S), actions (n, T, A), log_probs/rewards/successes (n, T).
    """

    states: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    successes: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.rewards.size)

    @property
    def episode_success(self) -> np.ndarray:
        return self.successes.any(axis=1)

    @property
    def episode_returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def episodes(self) -> list[Episode]:
        return [
            Episode(self.states[i], self.actions[i], self.rewards[i], self.successes[i], True)
            for i in range(len(self.rewards))
        ]


def rollout_batch(task, policy, n: int, rng: np.random.Generator, horizon: int | None = None,
                  deterministic: bool = False) -> Batch:
    """Run ``n`` episodes of ``task`` side by side for ``horizon`` steps.

    ``policy`` is anything with ``act(states, rng, deterministic) -> (actions, log_probs)``.
    """
    horizon = task.horizon if horizon is None else horizon
    s = task.reset(rng, n)
    states = np.empty((n, horizon + 1, STATE_DIM))
    actions = np.empty((n, horizon, ACTION_DIM))
    log_probs = np.empty((n, horizon))
    rewards = np.empty((n, horizon))
    successes = np.zeros((n, horizon), dtype=bool)
    states[:, 0] = s
    for t in range(horizon):
        a, lp = policy.act(s, rng, deterministic)
        s, r, ok = task.step(s, a)
        actions[:, t], log_probs[:, t] = a, lp
        rewards[:, t], successes[:, t] = r, ok
        states[:, t + 1] = s
    return Batch(states, actions, log_probs, rewards, successes)


def rollout(task, policy, horizon: int, rng: np.random.Generator, deterministic: bool = False) -> Episode:
    """Run one episode; success is the OR of the per-step success flags."""
    return rollout_batch(task, policy, 1, rng, horizon, deterministic).episodes()[0]
