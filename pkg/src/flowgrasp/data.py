"""Data pipeline: episodic JSONL parsing, view padding, keyframe sampling,
manifest loading, and weighted mixture sampling into training samples.

Episode files carry one timestep per line with mandatory `instruction`,
`state`, `views` keys and optional `subtask`, `goal_box`, `trace` scaffold
annotations. View values are either inline nested lists or reference strings
"relative/path.npz::view::t" resolved against the dataset root.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .vocab import ASST, EOS, IMG, PROP, USR

log = logging.getLogger("flowgrasp.data")


class EpisodeParseError(ValueError):
    """A mandatory episode field is missing or malformed; names the line."""


class DataConfigError(ValueError):
    """Manifest or source configuration is unusable."""


class MixtureSampleError(RuntimeError):
    """The mixture has no usable source left to draw from."""


@dataclass
class EpisodeRecord:
    """One parsed robot episode; optional per-timestep scaffold annotations."""

    instruction: str
    states: np.ndarray                  # (T, D_s)
    view_refs: list                     # per t: dict name -> ref or inline array
    subtask: list                       # per t: str or None
    goal_box: list                      # per t: (x1, y1, x2, y2) floats or None
    trace: list                         # per t: tuple of (u, v) floats or None
    base_dir: str = ""
    name: str = ""
    timesteps: list = field(default_factory=list)  # original t per row
    warnings: int = 0

    def __post_init__(self):
        if not self.timesteps:
            self.timesteps = list(range(len(self.states)))
        self._actions = None

    def __len__(self):
        return self.states.shape[0]

    def derived_actions(self):
        """Full-rate temporally shifted actions, computed once per record."""
        if self._actions is None:
            self._actions = codec.derive_actions(self.states)
        return self._actions


_OPTIONAL_FIELDS = ("subtask", "goal_box", "trace")


def _check_optional(key, value):
    """Validate one optional field; raises ValueError on malformed content."""
    if key == "subtask":
        if not isinstance(value, str) or not value:
            raise ValueError("subtask must be a non-empty string")
        return value
    if key == "goal_box":
        box = tuple(float(v) for v in value)
        if len(box) != 4 or box[0] > box[2] or box[1] > box[3] or \
                min(box) < 0 or max(box) > 1:
            raise ValueError(f"goal_box {value} is not a valid [0,1] rect")
        return box
    if key == "trace":
        pts = tuple((float(u), float(v)) for u, v in value)
        for u, v in pts:
            if not (0 <= u <= 1 and 0 <= v <= 1):
                raise ValueError(f"trace point ({u}, {v}) outside [0,1]^2")
        return pts
    raise KeyError(key)


def parse_episode(lines, base_dir="", name=""):
    """Validate an episodic JSONL body (iterable of lines or a file path).

    Malformed optional fields are dropped with a warning; malformed mandatory
    fields fail the episode with the offending line number.
    """
    if isinstance(lines, (str, os.PathLike)) and os.path.exists(lines):
        path = os.fspath(lines)
        name = name or os.path.basename(path)
        with open(path) as fh:
            lines = fh.read().splitlines()
    rows = [ln for ln in lines if ln.strip()]
    if not rows:
        raise EpisodeParseError(f"{name or 'episode'}: empty input")

    instruction = None
    states, view_refs = [], []
    subtask, goal_box, trace = [], [], []
    warnings = 0
    for lineno, raw in enumerate(rows, start=1):
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise EpisodeParseError(f"{name} line {lineno}: invalid json ({exc})") from None
        for key in ("instruction", "state", "views"):
            if key not in rec:
                raise EpisodeParseError(f"{name} line {lineno}: missing {key!r}")
        if instruction is None:
            instruction = rec["instruction"]
        elif rec["instruction"] != instruction:
            raise EpisodeParseError(
                f"{name} line {lineno}: instruction differs from line 1")
        try:
            state = np.asarray(rec["state"], dtype=np.float64)
            if state.ndim != 1 or (states and state.shape != states[0].shape):
                raise ValueError
        except (TypeError, ValueError):
            raise EpisodeParseError(f"{name} line {lineno}: malformed state") from None
        if not isinstance(rec["views"], dict) or not rec["views"]:
            raise EpisodeParseError(f"{name} line {lineno}: views must be a non-empty map")
        states.append(state)
        view_refs.append(rec["views"])
        for key, store in (("subtask", subtask), ("goal_box", goal_box),
                           ("trace", trace)):
            if key in rec:
                try:
                    store.append(_check_optional(key, rec[key]))
                except (ValueError, TypeError, KeyError):
                    warnings += 1
                    log.warning("%s line %d: dropping malformed %s", name, lineno, key)
                    store.append(None)
            else:
                store.append(None)
    return EpisodeRecord(instruction=instruction, states=np.stack(states),
                         view_refs=view_refs, subtask=subtask,
                         goal_box=goal_box, trace=trace,
                         base_dir=base_dir, name=name, warnings=warnings)


class ViewLoader:
    """Resolves view references against a dataset root; small npz LRU."""

    def __init__(self, base_dir, max_cached=96):
        self.base_dir = base_dir
        self.max_cached = max_cached
        self._cache = {}

    def _load_npz(self, rel):
        if rel in self._cache:
            arrs = self._cache.pop(rel)
            self._cache[rel] = arrs
            return arrs
        with np.load(os.path.join(self.base_dir, rel)) as npz:
            arrs = {k: npz[k] for k in npz.files}
        self._cache[rel] = arrs
        while len(self._cache) > self.max_cached:
            self._cache.pop(next(iter(self._cache)))
        return arrs

    def resolve(self, ref):
        if isinstance(ref, str):
            rel, view, t = ref.split("::")
            arr = self._load_npz(rel)[view][int(t)]
        else:
            arr = np.asarray(ref)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        return arr.astype(np.float32)

    def views_at(self, view_refs):
        return {name: self.resolve(ref) for name, ref in view_refs.items()}


def pad_views(views, priority, n_views=3):
    """Deterministic canonical ordering, truncation past `n_views`, zero-image
    padding below it. Returns (images list, names, pad_flags)."""
    if not views:
        raise DataConfigError("pad_views needs at least one view")
    named = dict(views)
    ordered = [n for n in priority if n in named]
    ordered += sorted(n for n in named if n not in priority)
    ordered = ordered[:n_views]
    imgs = [np.asarray(named[n], dtype=np.float32) for n in ordered]
    names = list(ordered)
    flags = [False] * len(imgs)
    zero = np.zeros_like(imgs[0])
    while len(imgs) < n_views:
        imgs.append(zero)
        names.append("<pad>")
        flags.append(True)
    return imgs, names, flags


def keyframe_indices(states, delta, grip_col=2):
    """Frames to keep: first, last, grip toggles, and any frame drifting more
    than `delta` (inf-norm) from the last kept frame."""
    if delta <= 0:
        raise ValueError("keyframe delta must be positive")
    states = np.asarray(states)
    t_max = states.shape[0] - 1
    kept = [0]
    for t in range(1, t_max + 1):
        ref = states[kept[-1]]
        toggle = grip_col is not None and states[t, grip_col] != ref[grip_col]
        moved = np.max(np.abs(states[t] - ref)) > delta
        if t == t_max or toggle or moved:
            kept.append(t)
    return kept


def keyframe_sample(record, delta, grip_col=2):
    """Reduced episode keeping only keyframes; remembers original timesteps."""
    kept = keyframe_indices(record.states, delta, grip_col)
    return EpisodeRecord(
        instruction=record.instruction,
        states=record.states[kept],
        view_refs=[record.view_refs[t] for t in kept],
        subtask=[record.subtask[t] for t in kept],
        goal_box=[record.goal_box[t] for t in kept],
        trace=[record.trace[t] for t in kept],
        base_dir=record.base_dir, name=record.name,
        timesteps=[record.timesteps[t] for t in kept],
        warnings=record.warnings)


@dataclass(frozen=True)
class DataSourceSpec:
    name: str
    kind: str          # robot | vision-language | embodied-reasoning
    path: str
    weight: float


@dataclass
class Manifest:
    sources: list
    norm_stats_path: str
    seed: int
    base_dir: str

    @property
    def weights(self):
        total = sum(s.weight for s in self.sources)
        return np.array([s.weight / total for s in self.sources])


_KINDS = ("robot", "vision-language", "embodied-reasoning")


def load_manifest(path):
    base_dir = os.path.dirname(os.path.abspath(path))
    kv = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise DataConfigError(f"manifest line not key = value: {line!r}")
            kv[key.strip()] = val.strip()
    names = sorted({k.split(".")[1] for k in kv if k.startswith("source.")})
    sources = []
    for n in names:
        kind = kv.get(f"source.{n}.kind")
        if kind not in _KINDS:
            raise DataConfigError(f"source {n}: unknown kind {kind!r}")
        weight = float(kv.get(f"source.{n}.weight", "0"))
        if weight < 0:
            raise DataConfigError(f"source {n}: negative weight")
        sources.append(DataSourceSpec(
            name=n, kind=kind, path=kv[f"source.{n}.path"], weight=weight))
    if not sources or sum(s.weight for s in sources) <= 0:
        raise DataConfigError("manifest needs at least one positively weighted source")
    return Manifest(sources=sources,
                    norm_stats_path=os.path.join(base_dir, kv["norm_stats"]),
                    seed=int(kv.get("seed", "0")), base_dir=base_dir)


# ----------------------------------------------------------------- sampling


@dataclass
class ConversationSample:
    """Rendered dialogue ready for the model."""

    token_ids: np.ndarray
    loss_mask: np.ndarray
    images: list                      # padded view arrays, canonical order
    pad_flags: list
    proprio: np.ndarray | None
    chunk_norm: np.ndarray | None     # (H, D) for embodied samples
    embodied: bool
    act_start: int | None             # position of <act>; expert prefix boundary
    provenance: dict
    segment_labels: list | None = None


def encode_rich(text, vocab):
    """Tokenize text that may embed control-token markers like <box>."""
    ids = []
    i = 0
    while i < len(text):
        if text[i] == "<":
            close = text.find(">", i)
            marker = text[i:close + 1] if close != -1 else ""
            if marker in vocab._id:
                ids.append(vocab.token_id(marker))
                i = close + 1
                continue
        ids.extend(vocab.encode_text(text[i]))
        i += 1
    return ids


def jitter_views(images, pad_flags, rng):
    """Brightness/contrast jitter of +-10%, non-pad views only."""
    out = []
    for img, padded in zip(images, pad_flags):
        if padded:
            out.append(img)
            continue
        c = float(rng.uniform(0.9, 1.1))
        b = float(rng.uniform(-0.1, 0.1))
        out.append(np.clip(img * c + b, 0.0, 1.0).astype(np.float32))
    return out


def build_token_sequence(vocab, n_image_tokens, user_ids, assistant_ids,
                         with_proprio):
    """[IMG]*n [PROP]? [USR] user [ASST] assistant [EOS] plus its loss mask."""
    ids = [vocab.token_id(IMG)] * n_image_tokens
    if with_proprio:
        ids.append(vocab.token_id(PROP))
    ids.append(vocab.token_id(USR))
    ids.extend(user_ids)
    asst_at = len(ids)
    ids.append(vocab.token_id(ASST))
    ids.extend(assistant_ids)
    ids.append(vocab.token_id(EOS))
    mask = np.zeros(len(ids), dtype=np.float64)
    mask[asst_at + 1:] = 1.0
    return np.asarray(ids, dtype=np.int64), mask
