import numpy as np
import pytest
import torch

from skillcurriculum.envs import GX, GY, STATE_DIM, TX, TY

torch.set_num_threads(1)


class ScriptedReach:
    """Moves straight at the goal at full speed; never grips."""

    def act(self, states, rng, deterministic=False):
        s = np.atleast_2d(states)
        delta = s[:, [TX, TY]] - s[:, [GX, GY]]
        dist = np.maximum(np.linalg.norm(delta, axis=1, keepdims=True), 1e-12)
        v = delta / dist * np.minimum(dist / 0.05, 1.0)
        a = np.concatenate([v, -np.ones((len(s), 1))], axis=1)
        return (a[0], 0.0) if np.ndim(states) == 1 else (a, np.zeros(len(s)))


class DoNothing:
    def act(self, states, rng, deterministic=False):
        s = np.atleast_2d(states)
        a = np.zeros((len(s), 3))
        return (a[0], 0.0) if np.ndim(states) == 1 else (a, np.zeros(len(s)))


class ClockTask:
    """Toy MDP: state[0] is elapsed time / horizon, reward is a constant, success is fixed."""

    name = "clock"

    def __init__(self, reward=1.0, success=False, horizon=100):
        self.reward, self.success, self.horizon = reward, success, horizon

    def reset(self, rng, n=1):
        return np.zeros((n, STATE_DIM))

    def step(self, s, a):
        s = np.atleast_2d(s).copy()
        s[:, 0] += 1.0 / self.horizon
        n = len(s)
        return s, np.full(n, float(self.reward)), np.full(n, self.success)


@pytest.fixture
def scripted_reach():
    return ScriptedReach()


@pytest.fixture
def do_nothing():
    return DoNothing()
