import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skillcurriculum.envs import (
    GRASPED, GRIP, GX, GY, OX, OY, START, STATE_DIM, TASK_NAMES, TX, TY, CorruptedActionError, TaskSpec,
    make_task_space, mirror_x, rollout, rollout_batch,
)

seeds = st.integers(0, 2**32 - 1)
unit = st.floats(-1, 1, allow_nan=False)
coord = st.floats(-0.9, 0.9, allow_nan=False)


def state(g=(0.0, 0.8), o=(0.0, 0.0), t=(0.5, 0.0), grip=0.0, grasped=0.0):
    s = np.zeros(STATE_DIM)
    s[[GX, GY]], s[[OX, OY]], s[[TX, TY]] = g, o, t
    s[GRIP], s[GRASPED] = grip, grasped
    return s


# -- reset ------------------------------------------------------------------

@pytest.mark.parametrize("name", TASK_NAMES)
@given(seed=seeds)
@settings(max_examples=25, deadline=None)
def test_reset_start_state_and_workspace(name, seed):
    s = TaskSpec(name).reset(np.random.default_rng(seed), 16)
    assert s.shape == (16, STATE_DIM)
    assert np.all(s[:, [GX, GY]] == START)
    assert np.all(s[:, GRIP] == 0) and np.all(s[:, GRASPED] == 0)
    assert np.all(np.abs(s[:, [OX, OY, TX, TY]]) <= 1)


@given(seed=seeds)
@settings(max_examples=50, deadline=None)
def test_push_goal_lies_on_the_push_side(seed):
    right = TaskSpec("push-right").reset(np.random.default_rng(seed), 32)
    left = TaskSpec("push-left").reset(np.random.default_rng(seed), 32)
    assert np.all(right[:, TX] > right[:, OX]) and np.all(right[:, TY] == right[:, OY])
    assert np.all(left[:, TX] < left[:, OX])


def test_press_goal_is_the_button():
    s = TaskSpec("press-down").reset(np.random.default_rng(0), 8)
    assert np.array_equal(s[:, [TX, TY]], s[:, [OX, OY]])


def test_unknown_task_rejected():
    with pytest.raises(ValueError):
        TaskSpec("open-window")


def test_task_space_is_ordered():
    assert list(make_task_space()) == sorted(TASK_NAMES)


# -- dynamics ---------------------------------------------------------------

@pytest.mark.parametrize("name", TASK_NAMES)
@given(vx=st.floats(-5, 5), vy=st.floats(-5, 5))
@settings(max_examples=30, deadline=None)
def test_gripper_moves_by_gain_times_clipped_velocity(name, vx, vy):
    s = state(g=(0.1, 0.2), o=(-0.7, -0.7))
    nxt, _, _ = TaskSpec(name).step(s, np.array([vx, vy, 0.0]))
    expected = np.array([0.1, 0.2]) + 0.05 * np.clip([vx, vy], -1, 1)
    assert np.allclose(nxt[[GX, GY]], expected, atol=1e-15)


def test_gripper_stays_in_workspace():
    nxt, _, _ = TaskSpec("reach").step(state(g=(0.99, -0.99)), np.array([1.0, -1.0, 0.0]))
    assert nxt[GX] == 1.0 and nxt[GY] == -1.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_action_is_an_error(bad):
    with pytest.raises(CorruptedActionError):
        TaskSpec("reach").step(state(), np.array([0.0, bad, 0.0]))


def test_reach_kinematic_oracle():
    # 0.9 / 0.05 = 18 steps to the goal; after 17 the distance sits exactly on the
    # (strict) 0.05 success boundary
    task = TaskSpec("reach")
    s = state(g=(0.0, 0.8), t=(0.0, -0.1))
    first = None
    for k in range(1, 21):
        s, _, ok = task.step(s, np.array([0.0, -1.0, 0.0]))
        if ok and first is None:
            first = k
    assert first is not None and 18 <= first <= 20


def test_grasp_requires_proximity_and_command():
    task = TaskSpec("pick-place")
    near = state(g=(0.0, 0.03), o=(0.0, 0.0))
    assert task.step(near, np.array([0.0, 0.0, 1.0]))[0][GRASPED] == 1
    assert task.step(near, np.array([0.0, 0.0, 0.4]))[0][GRASPED] == 0
    far = state(g=(0.0, 0.2), o=(0.0, 0.0))
    assert task.step(far, np.array([0.0, 0.0, 1.0]))[0][GRASPED] == 0


@given(vx=unit, vy=unit)
@settings(max_examples=50, deadline=None)
def test_grasped_object_tracks_gripper(vx, vy):
    task = TaskSpec("pick-place")
    s = state(g=(0.1, 0.1), o=(0.1, 0.1), grip=1, grasped=1)
    nxt, _, _ = task.step(s, np.array([vx, vy, 1.0]))
    assert np.allclose(nxt[[OX, OY]], nxt[[GX, GY]])
    assert nxt[GRASPED] == 1


def test_release_below_threshold_drops_object():
    task = TaskSpec("pick-place")
    s = state(g=(0.1, 0.1), o=(0.1, 0.1), grip=1, grasped=1)
    nxt, _, _ = task.step(s, np.array([1.0, 0.0, task.release_below - 0.1]))
    assert nxt[GRASPED] == 0 and np.allclose(nxt[[OX, OY]], [0.1, 0.1])


def test_push_moves_object_by_gripper_advance_while_in_contact():
    task = TaskSpec("push-right")
    s = state(g=(-0.07, 0.0), o=(0.0, 0.0), t=(0.3, 0.0))
    nxt, _, _ = task.step(s, np.array([1.0, 0.0, 0.0]))
    assert nxt[GX] == pytest.approx(-0.02)
    assert nxt[OX] == pytest.approx(0.05) and nxt[OY] == 0.0


def test_push_without_contact_leaves_object():
    task = TaskSpec("push-right")
    s = state(g=(-0.3, 0.0), o=(0.0, 0.0), t=(0.3, 0.0))
    nxt, _, _ = task.step(s, np.array([1.0, 0.0, 0.0]))
    assert nxt[OX] == 0.0 and nxt[OY] == 0.0


def test_push_pulling_away_does_not_drag():
    task = TaskSpec("push-right")
    s = state(g=(-0.05, 0.0), o=(0.0, 0.0), t=(0.3, 0.0))
    nxt, _, _ = task.step(s, np.array([-1.0, 0.0, 0.0]))
    assert nxt[OX] == 0.0


def _random_state(rng):
    s = np.zeros(STATE_DIM)
    s[[GX, GY, OX, OY, TX, TY]] = rng.uniform(-0.9, 0.9, 6)
    if rng.random() < 0.5:
        s[[OX, OY]] = s[[GX, GY]] + rng.uniform(-0.07, 0.07, 2)
    s[GRIP] = rng.integers(2)
    s[GRASPED] = rng.integers(2)
    return s


@given(seed=seeds)
@settings(max_examples=200, deadline=None)
def test_push_left_is_the_mirror_image_of_push_right(seed):
    rng = np.random.default_rng(seed)
    s = _random_state(rng)
    a = rng.uniform(-1.2, 1.2, 3)
    right, left = TaskSpec("push-right"), TaskSpec("push-left")
    n1, r1, ok1 = right.step(s, a)
    n2, r2, ok2 = left.step(mirror_x(s), mirror_x(a))
    assert np.allclose(mirror_x(n1), n2, atol=1e-12)
    assert r1 == pytest.approx(r2, abs=1e-12) and ok1 == ok2


def test_mirror_regions_match():
    r, l = TaskSpec("push-right").regions, TaskSpec("push-left").regions
    (ox, oy), (gx, _) = r["object"], r["goal"]
    assert l["object"] == ((-ox[1], -ox[0]), oy)
    assert l["goal"][0] == (-gx[1], -gx[0])


def test_press_down_needs_downward_approach():
    task = TaskSpec("press-down")
    s = state(g=(0.0, 0.06), o=(0.0, 0.0), t=(0.0, 0.0))
    _, _, down = task.step(s, np.array([0.0, -1.0, 0.0]))
    assert down
    below = state(g=(0.0, -0.06), o=(0.0, 0.0), t=(0.0, 0.0))
    _, _, up = task.step(below, np.array([0.0, 1.0, 0.0]))
    assert not up
    assert TaskSpec("press-up").step(below, np.array([0.0, 1.0, 0.0]))[2]


def test_press_needs_motion_not_just_proximity():
    s = state(g=(0.0, 0.0), o=(0.0, 0.0), t=(0.0, 0.0))
    assert not TaskSpec("press-down").step(s, np.zeros(3))[2]


@pytest.mark.parametrize("name", TASK_NAMES)
@given(seed=seeds)
@settings(max_examples=40, deadline=None)
def test_reward_bounds(name, seed):
    rng = np.random.default_rng(seed)
    s = np.stack([_random_state(rng) for _ in range(8)])
    _, r, ok = TaskSpec(name).step(s, rng.uniform(-2, 2, (8, 3)))
    assert np.all(r <= 1.0) and np.all(r >= -2 * math.sqrt(2))
    assert np.all(r[ok] > 0) or not ok.any()


def test_reach_reward_is_negative_distance():
    s = state(g=(0.0, 0.8), t=(0.3, 0.4))
    nxt, r, ok = TaskSpec("reach").step(s, np.zeros(3))
    assert not ok and r == pytest.approx(-0.5)


def test_reach_reward_ignores_object():
    a = state(o=(0.3, 0.3))
    b = state(o=(-0.6, -0.2))
    assert TaskSpec("reach").step(a, np.zeros(3))[1] == TaskSpec("reach").step(b, np.zeros(3))[1]


def test_batched_step_matches_single_steps():
    rng = np.random.default_rng(3)
    task = TaskSpec("pick-place")
    s = np.stack([_random_state(rng) for _ in range(10)])
    a = rng.uniform(-1, 1, (10, 3))
    nb, rb, okb = task.step(s, a)
    for i in range(10):
        n, r, ok = task.step(s[i], a[i])
        assert np.array_equal(n, nb[i]) and r == rb[i] and ok == okb[i]


# -- rollouts ---------------------------------------------------------------

def test_do_nothing_fails_reach(do_nothing):
    ep = rollout(TaskSpec("reach"), do_nothing, 100, np.random.default_rng(0))
    assert not ep.success


def test_scripted_expert_solves_reach(scripted_reach):
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert rollout(TaskSpec("reach"), scripted_reach, 100, rng).success


def test_zero_horizon_gives_empty_episode(scripted_reach):
    ep = rollout(TaskSpec("reach"), scripted_reach, 0, np.random.default_rng(0))
    assert len(ep) == 0 and not ep.success and ep.states.shape == (1, STATE_DIM)


def test_episode_shapes_consistent(scripted_reach):
    ep = rollout(TaskSpec("push-left"), scripted_reach, 37, np.random.default_rng(1))
    assert ep.states.shape == (38, STATE_DIM)
    assert ep.actions.shape == (37, 3) and ep.rewards.shape == (37,) and ep.successes.shape == (37,)
    assert ep.success == bool(ep.successes.any())
    assert ep.truncated


def test_rollout_batch_reproducible(scripted_reach):
    a = rollout_batch(TaskSpec("reach"), scripted_reach, 4, np.random.default_rng(5))
    b = rollout_batch(TaskSpec("reach"), scripted_reach, 4, np.random.default_rng(5))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.rewards, b.rewards)
