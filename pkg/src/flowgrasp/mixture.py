"""Weighted multi-source sampling into a deterministic training stream.

Each draw picks a source i.i.d. by mixture weight, then a sample uniformly
within it: robot sources yield embodied samples (keyframed frame selection,
full-rate action windows), VL and reasoning sources yield text-only
supervision. Exhausted (empty) sources are renormalized away with a warning.
"""

import glob
import json
import logging
import os

import numpy as np

from . import templates as T
from .data import (DataConfigError, MixtureSampleError, ViewLoader,
                   keyframe_indices, parse_episode)

log = logging.getLogger("flowgrasp.mixture")


class MixtureSampler:
    """Infinite deterministic stream of ConversationSamples."""

    def __init__(self, manifest, vocab, stats, horizon, n_image_tokens, rng,
                 keyframe_delta=0.01, augment=True, per_signature=20,
                 max_episodes=None):
        self.vocab = vocab
        self.stats = stats
        self.horizon = horizon
        self.n_image_tokens = n_image_tokens
        self.rng = rng
        self.augment = augment
        self.loader = ViewLoader(manifest.base_dir)
        self.robot_pool_templates = T.build_robot_pool(per_signature)
        self.keyframe_delta = keyframe_delta

        self.sources = []
        for spec in manifest.sources:
            path = os.path.join(manifest.base_dir, spec.path)
            if spec.kind == "robot":
                episodes, frame_pool = self._load_robot(path, max_episodes)
                self.sources.append(
                    {"spec": spec, "episodes": episodes, "pool": frame_pool})
            else:
                with open(path) as fh:
                    records = [json.loads(ln) for ln in fh if ln.strip()]
                self.sources.append({"spec": spec, "records": records})
        self.weights = manifest.weights
        self._warned_empty = set()

    def _load_robot(self, path, max_episodes):
        files = sorted(glob.glob(os.path.join(path, "ep_*.jsonl")))
        if max_episodes is not None:
            files = files[:max_episodes]
        if not files:
            raise DataConfigError(f"no episode files under {path}")
        episodes = []
        frame_pool = []
        for i, f in enumerate(files):
            rec = parse_episode(f, base_dir=os.path.dirname(os.path.dirname(f)),
                                name=os.path.basename(f))
            kept = keyframe_indices(rec.states, self.keyframe_delta)
            episodes.append(rec)
            frame_pool.extend((i, t) for t in kept)
        return episodes, frame_pool

    def _source_size(self, src):
        if src["spec"].kind == "robot":
            return len(src["pool"])
        return len(src["records"])

    def draw(self):
        """One i.i.d. draw from the mixture."""
        weights = self.weights.copy()
        while True:
            if weights.sum() <= 0:
                raise MixtureSampleError("all mixture sources are empty")
            idx = int(self.rng.choice(len(self.sources), p=weights / weights.sum()))
            src = self.sources[idx]
            if self._source_size(src) == 0:
                if src["spec"].name not in self._warned_empty:
                    self._warned_empty.add(src["spec"].name)
                    log.warning("source %r is empty; resampling with "
                                "renormalized weights", src["spec"].name)
                weights[idx] = 0.0
                continue
            return self._render(src)

    def _render(self, src):
        kind = src["spec"].kind
        name = src["spec"].name
        if kind == "robot":
            ep_idx, t = src["pool"][int(self.rng.integers(0, len(src["pool"])))]
            return T.render_conversation(
                src["episodes"][ep_idx], t, self.robot_pool_templates, self.rng,
                self.vocab, self.loader, self.stats, self.horizon,
                self.n_image_tokens, augment=self.augment, source_name=name)
        rec = src["records"][int(self.rng.integers(0, len(src["records"])))]
        if kind == "vision-language":
            return T.render_vl(rec, self.rng, self.vocab, self.loader,
                               self.n_image_tokens, augment=self.augment,
                               source_name=name)
        return T.render_er(rec, self.rng, self.vocab, self.loader,
                           self.n_image_tokens, augment=self.augment,
                           source_name=name)

    def draw_kind(self, kinds):
        """Draw restricted to the given source kinds (VL warm-up phase)."""
        weights = self.weights.copy()
        for i, src in enumerate(self.sources):
            if src["spec"].kind not in kinds:
                weights[i] = 0.0
        if weights.sum() <= 0:
            raise MixtureSampleError(f"no sources of kinds {kinds}")
        while True:
            idx = int(self.rng.choice(len(self.sources), p=weights / weights.sum()))
            src = self.sources[idx]
            if self._source_size(src) == 0:
                weights[idx] = 0.0
                if weights.sum() <= 0:
                    raise MixtureSampleError(f"no non-empty sources of kinds {kinds}")
                continue
            return self._render(src)

    def __iter__(self):
        while True:
            yield self.draw()
