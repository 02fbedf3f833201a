"""Action codec: raw state trajectories -> normalized chunks -> token ids.

Raw actions are built by temporal state shifting (the action at t is the
commanded pose/grip at t+1). Chunks are fixed-horizon windows normalized to
[-1, 1] by per-dimension 1st/99th-percentile bounds, then quantized into a
255-bin vocabulary block.
"""

from dataclasses import dataclass

import numpy as np

from .vocab import N_ACTION_BINS

# state vector layout for the desk embodiment: (x, y, grip, held);
# the action keeps (x, y, grip) of the *next* state
DEFAULT_ACTION_COLS = (0, 1, 2)


class EpisodeTooShortError(ValueError):
    """Temporal shifting needs at least two timesteps."""


class TokenDecodeError(ValueError):
    """A token id fell outside the contiguous action block."""


@dataclass(frozen=True)
class NormStats:
    """Per-dimension normalization bounds, persisted with the dataset."""

    q_lo: np.ndarray
    q_hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q_lo", np.asarray(self.q_lo, dtype=np.float64))
        object.__setattr__(self, "q_hi", np.asarray(self.q_hi, dtype=np.float64))
        if self.q_lo.shape != self.q_hi.shape or self.q_lo.ndim != 1:
            raise ValueError("q_lo/q_hi must be equal-length vectors")
        if np.any(self.q_lo > self.q_hi):
            raise ValueError("q_lo must be <= q_hi per dimension")

    @property
    def dims(self):
        return self.q_lo.shape[0]

    def save(self, path):
        lines = [f"dims = {self.dims}",
                 "q_lo = " + ",".join(repr(float(v)) for v in self.q_lo),
                 "q_hi = " + ",".join(repr(float(v)) for v in self.q_hi)]
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        kv = {}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, _, val = line.partition("=")
                kv[key.strip()] = val.strip()
        lo = np.array([float(v) for v in kv["q_lo"].split(",")])
        hi = np.array([float(v) for v in kv["q_hi"].split(",")])
        if len(lo) != int(kv["dims"]):
            raise ValueError(f"norm stats file {path} is inconsistent")
        return cls(lo, hi)


def fit_norm_stats(actions):
    """1st/99th percentile bounds over a (N, D) action corpus."""
    actions = np.asarray(actions, dtype=np.float64)
    lo = np.percentile(actions, 1.0, axis=0)
    hi = np.percentile(actions, 99.0, axis=0)
    return NormStats(lo, hi)


def derive_actions(states, action_cols=DEFAULT_ACTION_COLS):
    """Temporal state shifting: action[t] = states[t+1, action_cols];
    the final row repeats its predecessor."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 2:
        raise EpisodeTooShortError(
            f"need >= 2 timesteps to derive actions, got shape {states.shape}")
    nxt = states[1:, list(action_cols)]
    return np.concatenate([nxt, nxt[-1:]], axis=0)


def window(actions, t, horizon):
    """Rows t..t+H-1, repeating the final real action past the end."""
    actions = np.asarray(actions)
    n = actions.shape[0]
    if not 0 <= t < n:
        raise IndexError(f"window start {t} outside [0, {n})")
    idx = np.minimum(np.arange(t, t + horizon), n - 1)
    return actions[idx]


def normalize(chunk, stats):
    """Affine map raw values into [-1, 1] with clamping; degenerate dims -> 0."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[-1] != stats.dims:
        raise ValueError(f"chunk dim {chunk.shape[-1]} != stats dims {stats.dims}")
    span = stats.q_hi - stats.q_lo
    safe = np.where(span > 0, span, 1.0)
    out = 2.0 * (chunk - stats.q_lo) / safe - 1.0
    out = np.where(span > 0, out, 0.0)
    return np.clip(out, -1.0, 1.0)


def denormalize(chunk, stats):
    """Inverse of `normalize` on [-1, 1]; clamped values are not recoverable."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape[-1] != stats.dims:
        raise ValueError(f"chunk dim {chunk.shape[-1]} != stats dims {stats.dims}")
    span = stats.q_hi - stats.q_lo
    return (chunk + 1.0) / 2.0 * span + stats.q_lo


def quantize(chunk, vocab):
    """Normalized chunk -> token ids, row-major (time-major, then dimension)."""
    chunk = np.asarray(chunk, dtype=np.float64)
    bins = np.floor((chunk + 1.0) / 2.0 * N_ACTION_BINS)
    bins = np.clip(bins, 0, N_ACTION_BINS - 1).astype(np.int64)
    return (vocab.action_base + bins).reshape(-1)


def dequantize(tokens, vocab, action_dim):
    """Token ids -> bin-center chunk of shape (H, action_dim)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size % action_dim != 0:
        raise TokenDecodeError(
            f"token count {tokens.size} not divisible by action dim {action_dim}")
    bins = tokens - vocab.action_base
    if np.any(bins < 0) or np.any(bins >= N_ACTION_BINS):
        bad = tokens[(bins < 0) | (bins >= N_ACTION_BINS)][0]
        raise TokenDecodeError(f"token {int(bad)} outside the action block")
    centers = -1.0 + (bins + 0.5) * (2.0 / N_ACTION_BINS)
    return centers.reshape(-1, action_dim)
