"""Inference engine: direct action prediction and reason-then-act.

Direct mode encodes the observation and instruction, then integrates the
expert's flow from noise conditioned on that prefix cache. Reasoned mode
first decodes scaffold text (stopping before any discrete action tokens),
extends the cache with it, and conditions the expert on the longer prefix.
A diagnostic decoder exposes the VLM's own discrete-action head for
comparing the two action paths.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codec
from .checkpoint import load_stack
from .data import ViewLoader, build_token_sequence, pad_views
from .env import VIEW_NAMES
from .scaffold import ScaffoldParseError, parse_scaffold
from .vocab import ACT_OPEN, EOS


class InferenceConfigError(ValueError):
    """Missing normalization stats or inconsistent model configuration."""


MODES = ("direct", "reasoned")


@dataclass
class PolicyRequest:
    views: dict
    proprio: np.ndarray
    instruction: str
    mode: str = "direct"
    euler_steps: int = 10
    max_reason_len: int = 96
    decode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise InferenceConfigError(f"unknown mode {self.mode!r}")
        if self.euler_steps < 1:
            raise InferenceConfigError("euler_steps must be >= 1")


@dataclass
class PolicyResponse:
    actions_raw: np.ndarray
    actions_norm: np.ndarray
    mode: str
    reasoning: str | None = None
    reasoning_tokens: tuple | None = None
    reasoning_logprob: float | None = None
    scaffold: object | None = None
    degraded: bool = False
    truncated: bool = False
    timing: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps({
            "mode": self.mode,
            "actions_raw": self.actions_raw.tolist(),
            "actions_norm": self.actions_norm.tolist(),
            "reasoning": self.reasoning,
            "reasoning_logprob": self.reasoning_logprob,
            "degraded": self.degraded,
            "truncated": self.truncated,
            "timing": self.timing,
        }, sort_keys=True)


# the fixed inference-time phrasing; index 0 of the training phrasing pool
PROMPT_PATTERN = "{instruction}"


class Policy:
    """Loaded model stack plus normalization stats; stateless across calls."""

    def __init__(self, backbone, expert, vocab, stats,
                 view_priority=VIEW_NAMES):
        self.backbone = backbone
        self.expert = expert
        self.vocab = vocab
        self.stats = stats
        self.view_priority = view_priority

    @classmethod
    def from_checkpoint(cls, ckpt_path, norm_stats_path):
        backbone, expert, vocab, _ = load_stack(ckpt_path)
        if norm_stats_path is None:
            raise InferenceConfigError(
                "norm stats are required to denormalize actions")
        stats = codec.NormStats.load(norm_stats_path)
        return cls(backbone, expert, vocab, stats)

    # ------------------------------------------------------------- plumbing

    def build_prefix(self, views, proprio, instruction):
        """Observation + instruction -> (ids, padded images); the same layout
        a direct-mode (actions-only) training sample uses before <act>."""
        user_ids = self.vocab.encode_text(
            PROMPT_PATTERN.format(instruction=instruction))
        ids, _ = build_token_sequence(
            self.vocab, self.backbone.cfg.n_image_tokens, user_ids,
            assistant_ids=[], with_proprio=True)
        ids = ids[:-1]  # drop the EOS closing the empty assistant turn
        images, _, _ = pad_views(views, self.view_priority,
                                 self.backbone.cfg.n_views)
        return ids, images

    def _rng(self, seed):
        return np.random.default_rng(np.random.SeedSequence(entropy=(seed, 5)))

    def _finish(self, cache, req, t_encode, t0, extra=None):
        if self.stats is None:
            raise InferenceConfigError("norm stats missing")
        t1 = time.perf_counter()
        chunk_norm = self.expert.sample_actions(
            cache, req.proprio, req.euler_steps, self._rng(req.seed))
        t2 = time.perf_counter()
        raw = codec.denormalize(chunk_norm, self.stats)
        timing = {"encode_s": t_encode, "flow_s": t2 - t1,
                  "total_s": time.perf_counter() - t0}
        if extra:
            timing.update(extra)
        return chunk_norm, raw, timing

    # ----------------------------------------------------------------- modes

    def infer(self, req):
        return self.infer_reasoned(req) if req.mode == "reasoned" \
            else self.infer_direct(req)

    def infer_direct(self, req):
        """Encode o_t and the instruction, then sample actions from the flow."""
        t0 = time.perf_counter()
        ids, images = self.build_prefix(req.views, req.proprio, req.instruction)
        with ad.no_grad():
            _, _, cache = self.backbone.forward(ids, images, req.proprio)
        t_encode = time.perf_counter() - t0
        chunk_norm, raw, timing = self._finish(cache, req, t_encode, t0)
        return PolicyResponse(actions_raw=raw, actions_norm=chunk_norm,
                              mode="direct", timing=timing)

    def infer_reasoned(self, req):
        """Generate scaffold text first, then condition the expert on it.

        Decoding stops before any discrete action token; the continuous
        actions always come from the expert. An unparseable scaffold flags
        the response degraded but still produces actions.
        """
        t0 = time.perf_counter()
        ids, images = self.build_prefix(req.views, req.proprio, req.instruction)
        stop_ids = {self.vocab.token_id(ACT_OPEN), self.vocab.token_id(EOS)}
        gen = self.backbone.generate_text(
            ids, images, req.proprio, stop_ids, req.max_reason_len,
            decode=req.decode, temperature=req.temperature,
            rng=self._rng(req.seed + 1))
        t_encode = time.perf_counter() - t0
        scaffold_fields = None
        degraded = False
        if gen.tokens:
            try:
                scaffold_fields = parse_scaffold(gen.tokens, self.vocab,
                                                 require_actions=False)
            except ScaffoldParseError:
                degraded = True
        chunk_norm, raw, timing = self._finish(
            gen.cache, req, t_encode, t0,
            extra={"reason_tokens": len(gen.tokens)})
        return PolicyResponse(
            actions_raw=raw, actions_norm=chunk_norm, mode="reasoned",
            reasoning=self.vocab.decode(gen.tokens),
            reasoning_tokens=gen.tokens, reasoning_logprob=gen.logprob,
            scaffold=scaffold_fields, degraded=degraded,
            truncated=gen.truncated, timing=timing)

    def decode_discrete_actions(self, req):
        """Diagnostic: greedy-decode the VLM's own action tokens after <act>
        and dequantize them (the discrete head of the hybrid supervision)."""
        ids, images = self.build_prefix(req.views, req.proprio, req.instruction)
        ids = np.concatenate([ids, [self.vocab.token_id(ACT_OPEN)]])
        h, d = self.expert.cfg.horizon, self.expert.cfg.action_dim
        base = self.vocab.action_base
        with ad.no_grad():
            logits, _, cache = self.backbone.forward(ids, images, req.proprio)
            row = logits.data[-1]
            tokens = []
            pos = len(ids)
            for _ in range(h * d):
                tok = base + int(np.argmax(row[base:base + 255]))
                tokens.append(tok)
                out, cache = self.backbone.step(tok, pos, cache)
                row = out.data[0]
                pos += 1
        chunk_norm = codec.dequantize(np.array(tokens), self.vocab, d)
        return codec.denormalize(chunk_norm, self.stats), chunk_norm

    # ------------------------------------------------------------ adapters

    def as_eval_policy(self, mode="direct", euler_steps=10, max_reason_len=96):
        """Adapter for env.evaluate: observation dict -> raw action chunk."""

        def policy(obs):
            req = PolicyRequest(
                views=obs["views"], proprio=obs["proprio"],
                instruction=obs["instruction"], mode=mode,
                euler_steps=euler_steps, max_reason_len=max_reason_len,
                seed=obs["rollout_seed"])
            return self.infer(req).actions_raw

        return policy

    def checksum(self):
        """Order-stable parameter checksum (mutation guard)."""
        total = 0.0
        for _, p in self.backbone.named_params() + self.expert.named_params():
            total += float(np.abs(p.data.astype(np.float64)).sum())
        return total


def run_request_file(policy, in_path, out_path, base_dir="."):
    """Batch CLI: line-delimited requests in, line-delimited responses out."""
    loader = ViewLoader(base_dir)
    n = 0
    with open(in_path) as fin, open(out_path, "w") as fout:
        for line in fin:
            if not line.strip():
                continue
            rec = json.loads(line)
            req = PolicyRequest(
                views=loader.views_at(rec["views"]),
                proprio=np.asarray(rec["proprio"], dtype=np.float64),
                instruction=rec["instruction"],
                mode=rec.get("mode", "direct"),
                euler_steps=int(rec.get("euler_steps", 10)),
                max_reason_len=int(rec.get("max_reason_len", 96)),
                seed=int(rec.get("seed", 0)))
            fout.write(policy.infer(req).to_json() + "\n")
            n += 1
    return n
