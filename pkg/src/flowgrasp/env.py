"""PointGrasp-2D: deterministic planar pick-and-place with three views.

A point gripper moves in the unit workspace, grasps a block when closing
within reach, and must release it inside a circular goal region. A scripted
phase-machine oracle supplies demonstrations plus scaffold annotations
(subtask text, goal box, waypoint trace). Rendering, dynamics, and the
dataset writer share one coordinate convention.
"""

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from . import codec
from .scaffold import build_trace

MAX_DELTA = 0.05
GRASP_RADIUS = 0.03
STEP_LIMIT = 200
GOAL_RADIUS = 0.08
BLOCK_HALF = 0.03
VIEW_PX = 64
CROP_HALF = 0.25

VIEW_NAMES = ("overview", "gripper", "goal")

SUBTASK_APPROACH = "move to the block"
SUBTASK_GRASP = "grasp the block"
SUBTASK_CARRY = "carry to the goal"
SUBTASK_RELEASE = "release the block"

INSTRUCTIONS = (
    "move the block into the goal region",
    "pick up the block and place it in the goal",
    "put the red block inside the blue zone",
    "carry the block to the goal area",
)

_BG = (0.12, 0.12, 0.12)
_GOAL_COLOR = (0.15, 0.25, 0.9)
_BLOCK_COLOR = (0.95, 0.15, 0.1)
_GRIP_COLOR = (0.1, 0.9, 0.2)


@dataclass(frozen=True)
class ToyEnvState:
    gripper: tuple
    grip_closed: bool
    held: bool
    block: tuple
    goal: tuple
    goal_radius: float = GOAL_RADIUS
    step_count: int = 0


@dataclass(frozen=True)
class ToyAction:
    dx: float
    dy: float
    close: bool

    @classmethod
    def from_continuous(cls, row, gripper):
        """Raw codec action row (next absolute pose + grip in [-1,1]) ->
        delta-form env action."""
        return cls(dx=float(row[0]) - gripper[0],
                   dy=float(row[1]) - gripper[1],
                   close=float(row[2]) > 0.0)


def _dist(a, b):
    return math.hypot(a[0] - b[0], a[1] - b[1])


def env_step(state, action):
    """Deterministic dynamics; returns (state', done, success)."""
    dx = min(max(action.dx, -MAX_DELTA), MAX_DELTA)
    dy = min(max(action.dy, -MAX_DELTA), MAX_DELTA)
    gx = min(max(state.gripper[0] + dx, 0.0), 1.0)
    gy = min(max(state.gripper[1] + dy, 0.0), 1.0)
    gripper = (gx, gy)

    held = state.held
    block = state.block
    if action.close:
        if held or _dist(gripper, block) < GRASP_RADIUS:
            held = True
    else:
        held = False
    if held:
        block = gripper

    new = replace(state, gripper=gripper, grip_closed=action.close,
                  held=held, block=block, step_count=state.step_count + 1)
    success = (not new.grip_closed) and _dist(new.block, new.goal) <= new.goal_radius
    done = success or new.step_count >= STEP_LIMIT
    return new, done, success


def reset_state(rng):
    """Randomized start: block away from the goal, gripper away from the block."""
    while True:
        gx, gy, bx, by, ox, oy = rng.uniform(0.1, 0.9, size=6)
        if _dist((bx, by), (ox, oy)) <= GOAL_RADIUS + 0.1:
            continue
        if _dist((gx, gy), (bx, by)) <= 0.1:
            continue
        return ToyEnvState(gripper=(gx, gy), grip_closed=False, held=False,
                           block=(bx, by), goal=(ox, oy))


def proprio_vec(state):
    """Proprioceptive reading: pose plus grip/held flags in {-1, +1}."""
    return np.array([state.gripper[0], state.gripper[1],
                     1.0 if state.grip_closed else -1.0,
                     1.0 if state.held else -1.0], dtype=np.float64)


# ----------------------------------------------------------------- rendering


def view_window(state, name):
    """(center, half_extent) of a named view's world window."""
    if name == "overview":
        return (0.5, 0.5), 0.5
    if name == "gripper":
        return state.gripper, CROP_HALF
    if name == "goal":
        return state.goal, CROP_HALF
    raise KeyError(f"unknown view {name!r}")


def world_to_view(point, center, half):
    """World (x, y) -> normalized [0, 1]^2 coordinates of a view window."""
    return ((point[0] - center[0] + half) / (2 * half),
            (point[1] - center[1] + half) / (2 * half))


def primary_projector(point_x, point_y):
    """World -> normalized overview coordinates (the trace/box projector)."""
    return world_to_view((point_x, point_y), (0.5, 0.5), 0.5)


def _render_window(state, center, half, px):
    offsets = (np.arange(px) + 0.5) / px * (2 * half)
    xs = offsets + (center[0] - half)
    ys = offsets + (center[1] - half)
    xx = xs[None, :]
    yy = ys[:, None]
    img = np.empty((px, px, 3), dtype=np.float32)
    img[:] = _BG

    goal_mask = (xx - state.goal[0]) ** 2 + (yy - state.goal[1]) ** 2 <= state.goal_radius ** 2
    img[goal_mask] = _GOAL_COLOR

    bx, by = state.block
    block_mask = (np.abs(xx - bx) <= BLOCK_HALF) & (np.abs(yy - by) <= BLOCK_HALF)
    img[block_mask] = _BLOCK_COLOR

    gx, gy = state.gripper
    arm = 0.035
    thick = 0.008
    bar_h = (np.abs(xx - gx) <= arm) & (np.abs(yy - gy) <= thick)
    bar_v = (np.abs(xx - gx) <= thick) & (np.abs(yy - gy) <= arm)
    grip_mask = bar_h | bar_v
    if state.grip_closed:
        grip_mask |= (np.abs(xx - gx) <= 0.015) & (np.abs(yy - gy) <= 0.015)
    img[grip_mask] = _GRIP_COLOR
    return img


def render(state, px=VIEW_PX):
    """Three-view observation: global top-down plus gripper- and
    goal-centered crops; bitwise deterministic per state."""
    out = {}
    for name in VIEW_NAMES:
        center, half = view_window(state, name)
        out[name] = _render_window(state, center, half, px)
    return out


def block_box(state, pad=0.012):
    """Ground-truth block rectangle in overview [0, 1]^2 coordinates."""
    bx, by = state.block
    half = BLOCK_HALF + pad
    return (max(bx - half, 0.0), max(by - half, 0.0),
            min(bx + half, 1.0), min(by + half, 1.0))


# -------------------------------------------------------------------- oracle


def oracle_policy(state):
    """Phase machine: approach -> grasp -> carry -> release.

    Returns (ToyAction, subtask string). Straight-line motion scaled so the
    largest component stays inside the per-step clamp.
    """
    if not state.held:
        d = (state.block[0] - state.gripper[0], state.block[1] - state.gripper[1])
        if _dist(state.block, state.gripper) > 0.02:
            return _move_toward(d, close=False), SUBTASK_APPROACH
        return ToyAction(0.0, 0.0, close=True), SUBTASK_GRASP
    d = (state.goal[0] - state.gripper[0], state.goal[1] - state.gripper[1])
    if _dist(state.goal, state.gripper) > state.goal_radius - 0.02:
        return _move_toward(d, close=True), SUBTASK_CARRY
    return ToyAction(0.0, 0.0, close=False), SUBTASK_RELEASE


def _move_toward(d, close):
    m = max(abs(d[0]), abs(d[1]))
    s = 1.0 if m <= MAX_DELTA else MAX_DELTA / m
    return ToyAction(d[0] * s, d[1] * s, close=close)


def oracle_rollout(state):
    """Run the oracle to termination; returns (states, subtasks, success).

    states has T+1 entries (initial through terminal); subtasks has T.
    """
    states = [state]
    subtasks = []
    success = False
    for _ in range(STEP_LIMIT):
        action, subtask = oracle_policy(states[-1])
        subtasks.append(subtask)
        nxt, done, success = env_step(states[-1], action)
        states.append(nxt)
        if done:
            break
    return states, subtasks, success


def oracle_annotations(states, t, trace_len=8):
    """Scaffold supervision for timestep t of a rollout."""
    subtask = oracle_policy(states[t])[1]
    box = block_box(states[t])
    future = np.array([s.gripper for s in states[min(t + 1, len(states) - 1):]])
    trace_pts = build_trace(future, trace_len, primary_projector)
    trace_norm = [(u / 1000.0, v / 1000.0) for u, v in trace_pts]
    return subtask, box, trace_norm


# ----------------------------------------------------------- dataset writing


def _view_ref(npz_name, view, t):
    return f"{npz_name}::{view}::{t}"


VL_QUESTIONS = (
    ("where is the block?", "block_box"),
    ("where is the goal region?", "goal_box"),
    ("is the block inside the goal region?", "inside"),
    ("what color is the block?", "color"),
    ("is the gripper near the block?", "near"),
)


def _goal_box_rect(state):
    ox, oy = state.goal
    r = state.goal_radius
    return (max(ox - r, 0.0), max(oy - r, 0.0), min(ox + r, 1.0), min(oy + r, 1.0))


def _vl_answer(kind, state):
    from .scaffold import encode_box
    if kind == "block_box":
        box = encode_box(block_box(state))
        return "<box>" + " ".join(str(c) for c in box) + "</box>"
    if kind == "goal_box":
        box = encode_box(_goal_box_rect(state))
        return "<box>" + " ".join(str(c) for c in box) + "</box>"
    if kind == "inside":
        return "yes" if _dist(state.block, state.goal) <= state.goal_radius else "no"
    if kind == "color":
        return "red"
    if kind == "near":
        return "yes" if _dist(state.gripper, state.block) < 0.15 else "no"
    raise KeyError(kind)


ER_QUESTIONS = (
    "what should the robot do next?",
    "name the next subtask.",
    "which step comes next for this task?",
)


def generate_dataset(out_dir, n_episodes, seed, scaffold_fraction=0.5,
                     n_vl=400, n_er=400, trace_len=8, px=VIEW_PX,
                     robot_weight=0.6, vl_weight=0.25, er_weight=0.15):
    """Write an episodic JSONL dataset with views, VL/ER side files,
    normalization stats, and a manifest. Byte-reproducible for a fixed seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 17)))
    ep_dir = os.path.join(out_dir, "episodes")
    os.makedirs(ep_dir, exist_ok=True)

    all_actions = []
    frames = []  # (episode index, npz name, per-t refs, state) for VL/ER reuse
    n_success = 0
    for ep in range(n_episodes):
        states, subtasks, success = oracle_rollout(reset_state(rng))
        n_success += int(success)
        instruction = INSTRUCTIONS[int(rng.integers(0, len(INSTRUCTIONS)))]
        annotated = rng.random() < scaffold_fraction

        stem = f"ep_{ep:05d}"
        npz_name = f"episodes/ep_{ep:05d}_views.npz"
        view_stack = {name: np.empty((len(states), px, px, 3), dtype=np.uint8)
                      for name in VIEW_NAMES}
        lines = []
        state_mat = np.array([proprio_vec(s) for s in states])
        all_actions.append(codec.derive_actions(state_mat))
        for t, state in enumerate(states):
            views = render(state, px=px)
            for name in VIEW_NAMES:
                view_stack[name][t] = np.round(views[name] * 255).astype(np.uint8)
            rec = {
                "t": t,
                "instruction": instruction,
                "state": [float(v) for v in state_mat[t]],
                "views": {name: _view_ref(npz_name, name, t) for name in VIEW_NAMES},
            }
            if annotated:
                subtask, box, trace = oracle_annotations(states, t, trace_len)
                rec["subtask"] = subtask
                rec["goal_box"] = [float(v) for v in box]
                rec["trace"] = [[float(u), float(v)] for u, v in trace]
            lines.append(json.dumps(rec, sort_keys=True))
            frames.append((ep, npz_name, rec["views"], state))
        with open(os.path.join(ep_dir, f"{stem}.jsonl"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        np.savez_compressed(os.path.join(out_dir, npz_name), **view_stack)

    stats = codec.fit_norm_stats(np.concatenate(all_actions, axis=0))
    stats.save(os.path.join(out_dir, "norm_stats.txt"))

    vl_lines = []
    for _ in range(n_vl):
        _, _, refs, state = frames[int(rng.integers(0, len(frames)))]
        q, kind = VL_QUESTIONS[int(rng.integers(0, len(VL_QUESTIONS)))]
        vl_lines.append(json.dumps(
            {"views": refs, "question": q, "answer": _vl_answer(kind, state)},
            sort_keys=True))
    with open(os.path.join(out_dir, "vl.jsonl"), "w") as fh:
        fh.write("\n".join(vl_lines) + "\n")

    er_lines = []
    for _ in range(n_er):
        _, _, refs, state = frames[int(rng.integers(0, len(frames)))]
        q = ER_QUESTIONS[int(rng.integers(0, len(ER_QUESTIONS)))]
        subtask = oracle_policy(state)[1]
        er_lines.append(json.dumps(
            {"views": refs, "instruction": INSTRUCTIONS[0], "question": q,
             "subtask": subtask}, sort_keys=True))
    with open(os.path.join(out_dir, "er.jsonl"), "w") as fh:
        fh.write("\n".join(er_lines) + "\n")

    manifest = [
        f"seed = {seed}",
        "norm_stats = norm_stats.txt",
        "source.robot.kind = robot",
        "source.robot.path = episodes",
        f"source.robot.weight = {robot_weight}",
        "source.vl.kind = vision-language",
        "source.vl.path = vl.jsonl",
        f"source.vl.weight = {vl_weight}",
        "source.er.kind = embodied-reasoning",
        "source.er.path = er.jsonl",
        f"source.er.weight = {er_weight}",
    ]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(manifest) + "\n")
    return {"episodes": n_episodes, "oracle_successes": n_success,
            "frames": len(frames)}


# ----------------------------------------------------------------- evaluation


def wilson_interval(k, n, z=1.96):
    """95% binomial interval on a success fraction."""
    if n == 0:
        return (0.0, 1.0)
    p = k / n
    denom = 1 + z ** 2 / n
    center = (p + z ** 2 / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z ** 2 / (4 * n ** 2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def evaluate(policy, n_rollouts, seed, execute_steps=10, px=VIEW_PX,
             instruction=INSTRUCTIONS[0], log_path=None):
    """Receding-horizon closed-loop evaluation.

    `policy` is a callable taking an observation dict (keys: views, proprio,
    instruction, rollout_seed, and the privileged ground-truth `state` for
    scripted baselines) and returning a raw action chunk (H, 3). The first
    `execute_steps` rows of each chunk are executed before re-inference.
    Policy exceptions score the episode as a failure. Returns a report dict
    with a 95% binomial interval.
    """
    episodes = []
    successes = 0
    for i in range(n_rollouts):
        ep_rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 29, i)))
        state = reset_state(ep_rng)
        success = False
        error = None
        infers = 0
        trail = [state.gripper]
        try:
            while True:
                obs = {"views": render(state, px=px), "proprio": proprio_vec(state),
                       "instruction": instruction, "state": state,
                       "rollout_seed": seed * 100003 + i}
                chunk = np.asarray(policy(obs))
                infers += 1
                done = False
                for row in chunk[:execute_steps]:
                    action = ToyAction.from_continuous(row, state.gripper)
                    state, done, success = env_step(state, action)
                    trail.append(state.gripper)
                    if done:
                        break
                if done:
                    break
        except Exception as exc:  # noqa: BLE001 - scored as failure, logged
            error = f"{type(exc).__name__}: {exc}"
            success = False
        successes += int(success)
        episodes.append({"episode": i, "success": bool(success),
                         "steps": state.step_count, "inferences": infers,
                         "final_block_to_goal": _dist(state.block, state.goal),
                         "goal": list(state.goal), "block": list(state.block),
                         "trail": [list(p) for p in trail], "error": error})
    lo, hi = wilson_interval(successes, n_rollouts)
    report = {"rollouts": n_rollouts, "successes": successes,
              "success_rate": successes / max(n_rollouts, 1),
              "interval_95": [lo, hi], "seed": seed,
              "execute_steps": execute_steps, "episodes": episodes}
    if log_path is not None:
        with open(log_path, "w") as fh:
            for ep in episodes:
                fh.write(json.dumps(ep, sort_keys=True) + "\n")
    return report


def oracle_chunk_policy(horizon=50):
    """Oracle wrapped as an evaluate() policy; reads the privileged state."""

    def policy(obs):
        sim = obs["state"]
        rows = []
        for _ in range(horizon):
            action, _ = oracle_policy(sim)
            sim, _, _ = env_step(sim, action)
            rows.append([sim.gripper[0], sim.gripper[1],
                         1.0 if sim.grip_closed else -1.0])
        return np.array(rows)

    return policy


def random_chunk_policy(horizon=50, action_dim=3):
    """Uniform-random raw chunks: the no-skill closed-loop baseline."""

    def policy(obs):
        rng = np.random.default_rng(obs["rollout_seed"])
        chunk = rng.uniform(-1, 1, size=(horizon, action_dim))
        chunk[:, 0] = (chunk[:, 0] + 1) / 2
        chunk[:, 1] = (chunk[:, 1] + 1) / 2
        return chunk

    return policy
