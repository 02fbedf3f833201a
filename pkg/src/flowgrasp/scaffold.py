"""Spatial scaffold targets: subtask text, goal box, waypoint trace, actions.

The assistant target is a fixed-order sequence of delimited segments,
    <sub>...</sub> <box>x1 y1 x2 y2</box> <trace>u v ...</trace> <act>...</act>
with integer coordinates in [0, 1000]. Optional segments may be absent but
never reordered or duplicated; `parse_scaffold` inverts `assemble_scaffold`
on whatever segments are present.
"""

from dataclasses import dataclass

import numpy as np

from . import vocab as V

COORD_MAX = 1000

SEGMENT_ORDER = ("subtask", "goal_box", "trace", "actions")
_SEG_ATTR = {"subtask": "subtask", "goal_box": "goal_box",
             "trace": "trace", "actions": "action_tokens"}
_SEG_DELIMS = {
    "subtask": (V.SUB_OPEN, V.SUB_CLOSE),
    "goal_box": (V.BOX_OPEN, V.BOX_CLOSE),
    "trace": (V.TRACE_OPEN, V.TRACE_CLOSE),
    "actions": (V.ACT_OPEN, V.ACT_CLOSE),
}


class BoxEncodeError(ValueError):
    """Rectangle corners are inverted or malformed."""


class ScaffoldOrderError(ValueError):
    """Segments out of the (i)-(iv) order, or duplicated."""


class ScaffoldParseError(ValueError):
    """Token stream does not follow the scaffold grammar."""


@dataclass
class ScaffoldFields:
    """Whatever scaffold supervision a sample carries; actions at minimum."""

    subtask: str | None = None
    goal_box: tuple | None = None     # 4 ints in [0, 1000]
    trace: tuple | None = None        # N pairs of ints in [0, 1000]
    action_tokens: np.ndarray | None = None

    def present(self):
        return tuple(name for name in SEGMENT_ORDER
                     if getattr(self, _SEG_ATTR[name]) is not None)

    def __eq__(self, other):
        if not isinstance(other, ScaffoldFields):
            return NotImplemented
        if (self.subtask, self.goal_box, self.trace) != \
                (other.subtask, other.goal_box, other.trace):
            return False
        a, b = self.action_tokens, other.action_tokens
        if (a is None) != (b is None):
            return False
        return a is None or np.array_equal(a, b)


def encode_box(rect):
    """Real rect (x1, y1, x2, y2) in [0, 1]^2 -> 4 ints in [0, 1000]."""
    x1, y1, x2, y2 = (float(c) for c in rect)
    if x1 > x2 or y1 > y2:
        raise BoxEncodeError(f"inverted rectangle {rect}")
    return tuple(int(np.clip(round(c * COORD_MAX), 0, COORD_MAX))
                 for c in (x1, y1, x2, y2))


def decode_box(ints):
    return tuple(c / COORD_MAX for c in ints)


def encode_point(pt):
    return tuple(int(np.clip(round(float(c) * COORD_MAX), 0, COORD_MAX)) for c in pt)


def build_trace(future_states, n, projector):
    """N waypoints at evenly spaced indices over the future gripper path.

    `future_states` holds (x, y, ...) rows from t+1 onward; `projector` maps
    workspace (x, y) to normalized [0, 1]^2 primary-view coordinates. When
    fewer than n states remain the final state repeats.
    """
    future_states = np.asarray(future_states, dtype=np.float64)
    if future_states.ndim != 2 or future_states.shape[0] < 1:
        raise ValueError("build_trace needs at least one future state")
    f = future_states.shape[0]
    idx = np.round(np.arange(1, n + 1) / n * (f - 1)).astype(int)
    waypoints = []
    for i in idx:
        u, v = projector(future_states[i, 0], future_states[i, 1])
        waypoints.append(encode_point((u, v)))
    return tuple(waypoints)


def _encode_ints(vocab, values):
    return vocab.encode_text(" ".join(str(int(v)) for v in values))


def assemble_segments(segments, vocab):
    """Segments [(kind, payload), ...] -> (token ids, per-token segment labels).

    Enforces the fixed (i)-(iv) order with no duplicates; payloads are
    text for subtask, int tuples for box/trace, token ids for actions.
    """
    last_rank = -1
    seen = set()
    ids = []
    labels = []
    for kind, payload in segments:
        if kind not in SEGMENT_ORDER:
            raise ScaffoldOrderError(f"unknown segment kind {kind!r}")
        rank = SEGMENT_ORDER.index(kind)
        if kind in seen:
            raise ScaffoldOrderError(f"duplicate segment {kind!r}")
        if rank <= last_rank:
            raise ScaffoldOrderError(
                f"segment {kind!r} out of order (after {SEGMENT_ORDER[last_rank]!r})")
        seen.add(kind)
        last_rank = rank

        open_tok, close_tok = _SEG_DELIMS[kind]
        body = []
        if kind == "subtask":
            body = vocab.encode_text(payload)
        elif kind == "goal_box":
            if len(payload) != 4:
                raise ScaffoldOrderError("goal_box payload must have 4 coordinates")
            _check_coords(payload)
            body = _encode_ints(vocab, payload)
        elif kind == "trace":
            flat = [c for pt in payload for c in pt]
            _check_coords(flat)
            body = _encode_ints(vocab, flat)
        elif kind == "actions":
            body = [int(t) for t in payload]
            for t in body:
                if not vocab.is_action(t):
                    raise ScaffoldOrderError(f"non-action token {t} in actions segment")
        seg_ids = [vocab.token_id(open_tok)] + body + [vocab.token_id(close_tok)]
        ids.extend(seg_ids)
        labels.extend([kind] * len(seg_ids))
    return np.asarray(ids, dtype=np.int64), labels


def _check_coords(values):
    for c in values:
        if not 0 <= int(c) <= COORD_MAX:
            raise ScaffoldOrderError(f"coordinate {c} outside [0, {COORD_MAX}]")


def assemble_scaffold(fields, vocab):
    """ScaffoldFields -> (token ids, segment labels); actions are mandatory."""
    if fields.action_tokens is None:
        raise ScaffoldOrderError("scaffold requires action tokens at minimum")
    segments = [(name, getattr(fields, _SEG_ATTR[name])) for name in fields.present()]
    return assemble_segments(segments, vocab)


def parse_scaffold(ids, vocab, require_actions=True):
    """Inverse of assemble_scaffold over the structured segments."""
    ids = [int(i) for i in ids]
    pos = 0
    found = {}
    open_ids = {vocab.token_id(_SEG_DELIMS[k][0]): k for k in SEGMENT_ORDER}
    last_rank = -1
    while pos < len(ids):
        tok = ids[pos]
        if tok not in open_ids:
            raise ScaffoldParseError(f"expected a segment opener at position {pos}")
        kind = open_ids[tok]
        rank = SEGMENT_ORDER.index(kind)
        if kind in found:
            raise ScaffoldParseError(f"duplicate segment {kind!r}")
        if rank <= last_rank:
            raise ScaffoldParseError(f"segment {kind!r} out of order")
        last_rank = rank
        close_id = vocab.token_id(_SEG_DELIMS[kind][1])
        try:
            end = ids.index(close_id, pos + 1)
        except ValueError:
            raise ScaffoldParseError(f"unterminated segment {kind!r}") from None
        body = ids[pos + 1:end]
        if kind == "subtask":
            if not all(vocab.is_text(t) for t in body):
                raise ScaffoldParseError("subtask body must be text tokens")
            found[kind] = vocab.decode(body)
        elif kind == "goal_box":
            coords = _parse_ints(body, vocab, kind)
            if len(coords) != 4:
                raise ScaffoldParseError(f"goal box needs 4 coordinates, got {len(coords)}")
            found[kind] = tuple(coords)
        elif kind == "trace":
            coords = _parse_ints(body, vocab, kind)
            if len(coords) % 2:
                raise ScaffoldParseError("trace needs an even coordinate count")
            found[kind] = tuple((coords[i], coords[i + 1])
                                for i in range(0, len(coords), 2))
        else:
            if not all(vocab.is_action(t) for t in body):
                raise ScaffoldParseError("actions body must be action-bin tokens")
            found[kind] = np.asarray(body, dtype=np.int64)
        pos = end + 1
    if require_actions and "actions" not in found:
        raise ScaffoldParseError("scaffold is missing the actions segment")
    return ScaffoldFields(
        subtask=found.get("subtask"),
        goal_box=found.get("goal_box"),
        trace=found.get("trace"),
        action_tokens=found.get("actions"),
    )


def _parse_ints(body, vocab, kind):
    text = vocab.decode(body)
    if not all(vocab.is_text(t) for t in body):
        raise ScaffoldParseError(f"{kind} body must be text tokens")
    try:
        values = [int(v) for v in text.split()]
    except ValueError:
        raise ScaffoldParseError(f"{kind} body {text!r} is not whitespace ints") from None
    _check_coords_parse(values, kind)
    return values


def _check_coords_parse(values, kind):
    for c in values:
        if not 0 <= c <= COORD_MAX:
            raise ScaffoldParseError(f"{kind} coordinate {c} outside [0, {COORD_MAX}]")
