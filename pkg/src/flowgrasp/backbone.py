"""Decoder-only VLM backbone over interleaved image/text/action tokens.

Multi-view patch encoder with two stride-2 3x3 convolutions (16x token
reduction per view), pre-norm transformer blocks, next-token cross-entropy
over masked assistant positions, greedy/temperature text generation, and a
per-layer KV cache exported for the action expert and incremental decoding.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class SequenceLengthError(ValueError):
    """Sequence exceeds the configured maximum."""


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 128
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    max_seq: int = 512
    view_px: int = 64
    patch: int = 8
    n_views: int = 3
    proprio_dim: int = 4
    rms_eps: float = 1e-5

    def __post_init__(self):
        if self.view_px % (self.patch * 4) != 0:
            raise ValueError(
                f"view_px {self.view_px} must be divisible by patch*4 = {self.patch * 4}")

    @property
    def grid(self):
        return self.view_px // self.patch

    @property
    def tokens_per_view(self):
        # two stride-2 convs quarter each grid axis
        return (self.grid // 4) ** 2

    @property
    def n_image_tokens(self):
        return self.n_views * self.tokens_per_view

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("dim", "layers", "heads", "mlp_ratio", "max_seq", "view_px",
                 "patch", "n_views", "proprio_dim", "rms_eps")}


@dataclass
class PrefixCache:
    """Per-layer (k, v) tensors over the processed prefix; append-only."""

    layers: list

    def __len__(self):
        return self.layers[0][0].data.shape[0] if self.layers else 0

    @property
    def n_layers(self):
        return len(self.layers)

    def detach(self):
        return PrefixCache([(k.detach(), v.detach()) for k, v in self.layers])

    def slice(self, upto):
        """Cache over positions [0, upto); keeps the gradient path."""
        return PrefixCache([(ad.narrow(k, 0, 0, upto), ad.narrow(v, 0, 0, upto))
                            for k, v in self.layers])

    def appended(self, new_rows):
        """New cache with one (k, v) row pair appended per layer."""
        return PrefixCache([
            (ad.concat([k, nk], axis=0), ad.concat([v, nv], axis=0))
            for (k, v), (nk, nv) in zip(self.layers, new_rows)])


def _init_params(cfg, vocab_size, rng):
    std = 0.02
    p = {}

    def normal(shape, scale=std):
        return rng.normal(0.0, scale, size=shape)

    p["tok_emb"] = normal((vocab_size, cfg.dim))
    p["pos_emb"] = normal((cfg.max_seq, cfg.dim))
    patch_dim = cfg.patch * cfg.patch * 3
    p["enc.patch_w"] = normal((patch_dim, cfg.dim))
    p["enc.patch_b"] = np.zeros(cfg.dim)
    for c in (1, 2):
        p[f"enc.conv{c}_w"] = normal((3, 3, cfg.dim, cfg.dim), scale=0.02)
        p[f"enc.conv{c}_b"] = np.zeros(cfg.dim)
    p["prop_w"] = normal((cfg.proprio_dim, cfg.dim))
    p["prop_b"] = np.zeros(cfg.dim)
    res_scale = std / math.sqrt(2 * cfg.layers)
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        p[pre + "ln1"] = np.ones(cfg.dim)
        p[pre + "wq"] = normal((cfg.dim, cfg.dim))
        p[pre + "wk"] = normal((cfg.dim, cfg.dim))
        p[pre + "wv"] = normal((cfg.dim, cfg.dim))
        p[pre + "wo"] = rng.normal(0.0, res_scale, size=(cfg.dim, cfg.dim))
        p[pre + "bq"] = np.zeros(cfg.dim)
        p[pre + "bk"] = np.zeros(cfg.dim)
        p[pre + "bv"] = np.zeros(cfg.dim)
        p[pre + "bo"] = np.zeros(cfg.dim)
        p[pre + "ln2"] = np.ones(cfg.dim)
        p[pre + "w1"] = normal((cfg.dim, cfg.dim * cfg.mlp_ratio))
        p[pre + "b1"] = np.zeros(cfg.dim * cfg.mlp_ratio)
        p[pre + "w2"] = rng.normal(0.0, res_scale, size=(cfg.dim * cfg.mlp_ratio, cfg.dim))
        p[pre + "b2"] = np.zeros(cfg.dim)
    p["ln_f"] = np.ones(cfg.dim)
    p["head_w"] = normal((cfg.dim, vocab_size))
    return {k: ad.param(v, name=f"vlm.{k}") for k, v in p.items()}


class Backbone:
    """Desk-scale VLM: patch encoder + causal transformer + LM head."""

    def __init__(self, cfg, vocab, rng=None, params=None):
        self.cfg = cfg
        self.vocab = vocab
        if params is not None:
            self.p = params
        else:
            if rng is None:
                rng = np.random.default_rng(0)
            self.p = _init_params(cfg, len(vocab), rng)

    def named_params(self):
        return [(k, self.p[k]) for k in sorted(self.p)]

    def astype(self, dtype):
        cast = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True, name=v.name)
                for k, v in self.p.items()}
        return Backbone(self.cfg, self.vocab, params=cast)

    # ------------------------------------------------------------- encoding

    def encode_views(self, images, pad_flags=None):
        """Padded view list -> (n_views * tokens_per_view, dim) embeddings.

        Per view: patchify, linear embed, then two stride-2 3x3 convolutions
        over the token grid; views concatenate in their canonical order.
        """
        cfg = self.cfg
        if len(images) != cfg.n_views:
            raise ad.DimensionError(
                f"expected {cfg.n_views} padded views, got {len(images)}")
        out = []
        for img in images:
            img = np.asarray(img)
            if img.shape != (cfg.view_px, cfg.view_px, 3):
                raise ad.DimensionError(
                    f"view shape {img.shape} != ({cfg.view_px}, {cfg.view_px}, 3)")
            g = cfg.grid
            patches = (img.reshape(g, cfg.patch, g, cfg.patch, 3)
                       .transpose(0, 2, 1, 3, 4)
                       .reshape(g * g, cfg.patch * cfg.patch * 3))
            tok = ad.affine(ad.tensor(patches), self.p["enc.patch_w"],
                            self.p["enc.patch_b"])
            grid = ad.reshape(tok, (g, g, cfg.dim))
            grid = ad.gelu(ad.conv3x3(grid, self.p["enc.conv1_w"],
                                      self.p["enc.conv1_b"], stride=2))
            grid = ad.gelu(ad.conv3x3(grid, self.p["enc.conv2_w"],
                                      self.p["enc.conv2_b"], stride=2))
            side = g // 4
            out.append(ad.reshape(grid, (side * side, cfg.dim)))
        return ad.concat(out, axis=0)

    # -------------------------------------------------------------- forward

    def _embed_sequence(self, ids, images, proprio):
        cfg = self.cfg
        n_img = cfg.n_image_tokens
        rows = [self.encode_views(images)]
        consumed = n_img
        if proprio is not None:
            prop = ad.affine(ad.tensor(np.asarray(proprio).reshape(1, -1)),
                             self.p["prop_w"], self.p["prop_b"])
            rows.append(prop)
            consumed += 1
        rows.append(ad.embedding(self.p["tok_emb"], np.asarray(ids[consumed:])))
        x = ad.concat(rows, axis=0)
        pos = ad.narrow(self.p["pos_emb"], 0, 0, len(ids))
        return ad.add(x, pos)

    def _block(self, i, x, prefix=None, position_offset=0):
        pre = f"blocks.{i}."
        h = ad.rmsnorm(x, self.p[pre + "ln1"], self.cfg.rms_eps)
        q = ad.affine(h, self.p[pre + "wq"], self.p[pre + "bq"])
        k = ad.affine(h, self.p[pre + "wk"], self.p[pre + "bk"])
        v = ad.affine(h, self.p[pre + "wv"], self.p[pre + "bv"])
        pk, pv = prefix if prefix is not None else (None, None)
        att = ad.attention(q, k, v, self.cfg.heads, causal=True,
                           prefix_k=pk, prefix_v=pv)
        x = ad.add(x, ad.affine(att, self.p[pre + "wo"], self.p[pre + "bo"]))
        h2 = ad.rmsnorm(x, self.p[pre + "ln2"], self.cfg.rms_eps)
        m = ad.affine(ad.gelu(ad.affine(h2, self.p[pre + "w1"], self.p[pre + "b1"])),
                      self.p[pre + "w2"], self.p[pre + "b2"])
        return ad.add(x, m), (k, v)

    def forward(self, ids, images, proprio=None, loss_mask=None):
        """Causal forward over an assembled sequence.

        Returns (logits, l_ar, cache): l_ar is the masked next-token loss, or
        None when no loss_mask is given; the cache holds every position's
        per-layer K/V.
        """
        ids = np.asarray(ids, dtype=np.int64)
        if len(ids) > self.cfg.max_seq:
            raise SequenceLengthError(
                f"sequence length {len(ids)} exceeds max {self.cfg.max_seq}")
        x = self._embed_sequence(ids, images, proprio)
        layers = []
        for i in range(self.cfg.layers):
            x, kv = self._block(i, x)
            layers.append(kv)
        x = ad.rmsnorm(x, self.p["ln_f"], self.cfg.rms_eps)
        logits = ad.matmul(x, self.p["head_w"])
        l_ar = None
        if loss_mask is not None:
            mask = np.asarray(loss_mask, dtype=np.float64)
            n = len(ids)
            l_ar = ad.softmax_ce(ad.narrow(logits, 0, 0, n - 1),
                                 ids[1:], mask[1:])
        return logits, l_ar, PrefixCache(layers)

    # ------------------------------------------------------------ decoding

    def step(self, token_id, position, cache):
        """One incremental decode step; returns (logits row, extended cache)."""
        if position >= self.cfg.max_seq:
            raise SequenceLengthError(f"position {position} exceeds max sequence")
        emb = ad.embedding(self.p["tok_emb"], np.asarray([token_id]))
        x = ad.add(emb, ad.narrow(self.p["pos_emb"], 0, position, 1))
        new_rows = []
        for i in range(self.cfg.layers):
            x, kv = self._block(i, x, prefix=cache.layers[i])
            new_rows.append(kv)
        x = ad.rmsnorm(x, self.p["ln_f"], self.cfg.rms_eps)
        logits = ad.matmul(x, self.p["head_w"])
        return logits, cache.appended(new_rows)

    def generate_text(self, ids, images, proprio, stop_ids, max_len,
                      decode="greedy", temperature=1.0, rng=None):
        """Autoregressive decode after a prompt prefix.

        Stops on a stop token (not appended to the cache) or at max_len
        (flagged truncated). Returns a GenerationResult whose cache covers
        prefix plus generated tokens, so downstream conditioning sees them.
        """
        with ad.no_grad():
            logits, _, cache = self.forward(ids, images, proprio)
            last = ad.narrow(logits, 0, len(ids) - 1, 1)
            generated = []
            logp_sum = 0.0
            truncated = False
            position = len(ids)
            while True:
                if len(generated) >= max_len:
                    truncated = True
                    break
                row = last.data[0]
                logp = row - row.max()
                logp = logp - np.log(np.exp(logp).sum())
                if decode == "greedy" or temperature <= 0:
                    tok = int(np.argmax(row))
                else:
                    scaled = row / temperature
                    scaled = scaled - scaled.max()
                    probs = np.exp(scaled)
                    probs = probs / probs.sum()
                    tok = int(rng.choice(len(probs), p=probs))
                if tok in stop_ids:
                    return GenerationResult(tuple(generated), float(logp_sum),
                                            cache, stop_token=tok, truncated=False)
                logp_sum += float(logp[tok])
                generated.append(tok)
                last, cache = self.step(tok, position, cache)
                position += 1
            return GenerationResult(tuple(generated), float(logp_sum), cache,
                                    stop_token=None, truncated=truncated)

    def teacher_forced_logprob(self, ids, images, proprio, continuation_ids):
        """Sum of log p(continuation_i | prefix, continuation_<i>) from one
        full forward; the AR factor of the joint over the generated text."""
        full = np.concatenate([np.asarray(ids, dtype=np.int64),
                               np.asarray(continuation_ids, dtype=np.int64)])
        with ad.no_grad():
            logits, _, _ = self.forward(full, images, proprio)
        total = 0.0
        base = len(ids)
        for j, tok in enumerate(continuation_ids):
            row = logits.data[base + j - 1]
            z = row - row.max()
            total += float(z[tok] - np.log(np.exp(z).sum()))
        return total


@dataclass
class GenerationResult:
    tokens: tuple
    logprob: float
    cache: PrefixCache
    stop_token: int | None
    truncated: bool
