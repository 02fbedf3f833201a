import math

import numpy as np
import pytest

from flowgrasp import codec, env


def make_state(**kw):
    base = dict(gripper=(0.3, 0.4), grip_closed=False, held=False,
                block=(0.6, 0.6), goal=(0.8, 0.2))
    base.update(kw)
    return env.ToyEnvState(**base)


def test_zero_action_changes_only_step_count():
    s = make_state()
    s2, done, success = env.env_step(s, env.ToyAction(0.0, 0.0, close=False))
    assert s2.gripper == s.gripper and s2.block == s.block
    assert s2.grip_closed == s.grip_closed and s2.held == s.held
    assert s2.step_count == s.step_count + 1
    assert not done and not success


def test_close_beyond_grasp_radius_does_not_hold():
    s = make_state(gripper=(0.6, 0.55), block=(0.6, 0.6))  # distance 0.05
    s2, _, _ = env.env_step(s, env.ToyAction(0.0, 0.0, close=True))
    assert s2.grip_closed and not s2.held


def test_close_within_grasp_radius_holds_and_block_tracks():
    s = make_state(gripper=(0.6, 0.58), block=(0.6, 0.6))  # distance 0.02
    s2, _, _ = env.env_step(s, env.ToyAction(0.0, 0.0, close=True))
    assert s2.held
    s3, _, _ = env.env_step(s2, env.ToyAction(0.04, -0.03, close=True))
    assert s3.block == s3.gripper


def test_delta_clamped():
    s = make_state()
    s2, _, _ = env.env_step(s, env.ToyAction(0.5, -0.5, close=False))
    assert s2.gripper[0] == pytest.approx(0.35)
    assert s2.gripper[1] == pytest.approx(0.35)


def test_open_inside_goal_is_success():
    s = make_state(gripper=(0.8, 0.2), block=(0.8, 0.2), held=True,
                   grip_closed=True)
    s2, done, success = env.env_step(s, env.ToyAction(0.0, 0.0, close=False))
    assert success and done and not s2.held


def test_dynamics_pure_function_replay():
    rng = np.random.default_rng(3)
    s = env.reset_state(rng)
    actions = [env.ToyAction(float(rng.uniform(-0.05, 0.05)),
                             float(rng.uniform(-0.05, 0.05)),
                             bool(rng.random() < 0.3)) for _ in range(40)]
    run1 = [s]
    for a in actions:
        run1.append(env.env_step(run1[-1], a)[0])
    run2 = [s]
    for a in actions:
        run2.append(env.env_step(run2[-1], a)[0])
    assert run1 == run2


def test_oracle_succeeds_quickly_over_many_seeds():
    worst = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        states, _, success = env.oracle_rollout(env.reset_state(rng))
        assert success, f"oracle failed on seed {seed}"
        worst = max(worst, states[-1].step_count)
    assert worst <= 120, f"oracle needed {worst} steps"


def test_oracle_subtask_far_from_block():
    s = make_state()
    action, subtask = env.oracle_policy(s)
    assert subtask == env.SUBTASK_APPROACH
    assert not action.close


def test_oracle_moves_toward_goal_while_held():
    rng = np.random.default_rng(11)
    for _ in range(100):
        g = tuple(rng.uniform(0.1, 0.9, size=2))
        goal = tuple(rng.uniform(0.1, 0.9, size=2))
        if math.dist(g, goal) < 0.12:
            continue
        s = make_state(gripper=g, block=g, goal=goal, held=True, grip_closed=True)
        action, subtask = env.oracle_policy(s)
        assert subtask == env.SUBTASK_CARRY
        to_goal = (goal[0] - g[0], goal[1] - g[1])
        assert action.dx * to_goal[0] + action.dy * to_goal[1] > 0


def test_derived_actions_replay_reproduces_states():
    rng = np.random.default_rng(5)
    states, _, _ = env.oracle_rollout(env.reset_state(rng))
    mat = np.array([env.proprio_vec(s) for s in states])
    actions = codec.derive_actions(mat)
    cur = states[0]
    for t in range(len(states) - 1):
        act = env.ToyAction.from_continuous(actions[t], cur.gripper)
        cur, _, _ = env.env_step(cur, act)
        assert abs(cur.gripper[0] - states[t + 1].gripper[0]) < 1e-9
        assert abs(cur.gripper[1] - states[t + 1].gripper[1]) < 1e-9
        assert cur.grip_closed == states[t + 1].grip_closed


def test_render_deterministic_and_block_visible():
    s = make_state()
    v1 = env.render(s)
    v2 = env.render(s)
    for name in env.VIEW_NAMES:
        assert np.array_equal(v1[name], v2[name])
        assert v1[name].shape == (64, 64, 3)
        assert v1[name].min() >= 0.0 and v1[name].max() <= 1.0
    block_px = np.all(np.isclose(v1["overview"], env._BLOCK_COLOR), axis=-1)
    assert block_px.any()


def test_view2_center_is_gripper_and_projector_consistent():
    s = make_state(gripper=(0.37, 0.71))
    views = env.render(s)
    # the world point at the gripper-view center is the gripper itself
    center, half = env.view_window(s, "gripper")
    assert center == s.gripper
    u, v = env.world_to_view(s.gripper, center, half)
    assert (u, v) == (0.5, 0.5)
    gv = views["gripper"]
    cpix = gv[32, 32]
    assert np.allclose(cpix, env._GRIP_COLOR)
    # the primary-view projector puts the gripper inside its rendered pixels
    pu, pv = env.primary_projector(*s.gripper)
    r, c = int(pv * 64), int(pu * 64)
    patch = views["overview"][max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
    assert np.any(np.all(np.isclose(patch, env._GRIP_COLOR), axis=-1))


def test_emitted_goal_box_contains_block_pixels():
    rng = np.random.default_rng(13)
    for _ in range(50):
        s = env.reset_state(rng)
        box = env.block_box(s)
        img = env.render(s)["overview"]
        block_px = np.all(np.isclose(img, env._BLOCK_COLOR), axis=-1)
        rows, cols = np.nonzero(block_px)
        us = (cols + 0.5) / 64
        vs = (rows + 0.5) / 64
        assert us.min() >= box[0] - 1e-9 and us.max() <= box[2] + 1e-9
        assert vs.min() >= box[1] - 1e-9 and vs.max() <= box[3] + 1e-9


def test_generate_dataset_reproducible_and_complete(tmp_path):
    out1 = tmp_path / "d1"
    out2 = tmp_path / "d2"
    info1 = env.generate_dataset(str(out1), n_episodes=4, seed=7, n_vl=10, n_er=10)
    info2 = env.generate_dataset(str(out2), n_episodes=4, seed=7, n_vl=10, n_er=10)
    assert info1["oracle_successes"] == 4
    for rel in sorted(p.relative_to(out1) for p in out1.rglob("*") if p.is_file()):
        b1 = (out1 / rel).read_bytes()
        b2 = (out2 / rel).read_bytes()
        assert b1 == b2, f"{rel} differs between identical-seed runs"


def test_evaluate_oracle_hits_100_percent():
    report = env.evaluate(env.oracle_chunk_policy(), n_rollouts=100, seed=3)
    assert report["success_rate"] == 1.0


def test_evaluate_random_policy_below_5_percent():
    report = env.evaluate(env.random_chunk_policy(), n_rollouts=100, seed=3)
    assert report["success_rate"] < 0.05


def test_evaluate_deterministic_outcomes():
    r1 = env.evaluate(env.oracle_chunk_policy(), n_rollouts=20, seed=9)
    r2 = env.evaluate(env.oracle_chunk_policy(), n_rollouts=20, seed=9)
    assert [e["steps"] for e in r1["episodes"]] == [e["steps"] for e in r2["episodes"]]


def test_evaluate_policy_exception_scores_failure():
    def bad_policy(obs):
        raise RuntimeError("boom")

    report = env.evaluate(bad_policy, n_rollouts=3, seed=1)
    assert report["successes"] == 0
    assert all(e["error"] for e in report["episodes"])


def test_wilson_interval_sane():
    lo, hi = env.wilson_interval(90, 100)
    assert 0.8 < lo < 0.9 < hi < 0.96
