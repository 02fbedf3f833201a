"""Self-contained verification battery behind the `verify` CLI command.

Runs the gradient checks (per-op and full stack), codec bounds, the flow
sampler's closed-form oracle, and the knowledge-insulation invariant, each
reporting one pass/fail line. Everything runs in float64.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import codec
from .backbone import Backbone, BackboneConfig
from .data import ConversationSample, build_token_sequence
from .expert import ActionExpert, ExpertConfig, integrate_flow
from .gradcheck import grad_check
from .scaffold import ScaffoldFields, assemble_scaffold
from .trainer import TrainConfig, Trainer
from .vocab import N_ACTION_BINS, Vocabulary

MICRO_BB = dict(dim=16, layers=2, heads=2, max_seq=128, view_px=16, patch=4,
                n_views=3, proprio_dim=4)
MICRO_EX = dict(width=16, layers=2, heads=2, horizon=4, action_dim=3,
                proprio_dim=4, vlm_dim=16, tau_features=8)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _micro_stack(seed):
    vocab = Vocabulary()
    bb = Backbone(BackboneConfig(**MICRO_BB), vocab,
                  rng=np.random.default_rng(np.random.SeedSequence((seed, 1))))
    ex = ActionExpert(ExpertConfig(**MICRO_EX),
                      rng=np.random.default_rng(np.random.SeedSequence((seed, 2))))
    return bb.astype(np.float64), ex.astype(np.float64), vocab


def _micro_sample(vocab, bb_cfg, ex_cfg, rng):
    tokens = vocab.action_base + rng.integers(
        0, N_ACTION_BINS, size=ex_cfg.horizon * ex_cfg.action_dim)
    assistant_ids, _ = assemble_scaffold(
        ScaffoldFields(action_tokens=tokens), vocab)
    ids, mask = build_token_sequence(
        vocab, bb_cfg.n_views * bb_cfg.tokens_per_view,
        vocab.encode_text("shift the block"), list(assistant_ids),
        with_proprio=True)
    return ConversationSample(
        token_ids=ids, loss_mask=mask,
        images=[rng.random((bb_cfg.view_px, bb_cfg.view_px, 3)) for _ in range(3)],
        pad_flags=[False] * 3,
        proprio=rng.random(bb_cfg.proprio_dim),
        chunk_norm=rng.uniform(-1, 1, size=(ex_cfg.horizon, ex_cfg.action_dim)),
        embodied=True,
        act_start=int(np.nonzero(ids == vocab.token_id("<act>"))[0][0]),
        provenance={"source": "verify"})


def check_op_gradients(seeds=20, tol=1e-4):
    """Every differentiable primitive on randomized small shapes."""
    t0 = time.time()
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        x = ad.param(rng.normal(size=(3, 8)), name="x")
        w = ad.param(rng.normal(size=(8, 8)) * 0.4, name="w")
        b = ad.param(rng.normal(size=(8,)), name="b")
        gn = ad.param(np.abs(rng.normal(size=(8,))) + 0.5, name="gain")
        tbl = ad.param(rng.normal(size=(6, 8)), name="tbl")
        cw = ad.param(rng.normal(size=(3, 3, 2, 3)) * 0.3, name="cw")
        cb = ad.param(rng.normal(size=(3,)), name="cb")
        img = ad.param(rng.normal(size=(4, 4, 2)), name="img")
        ids = rng.integers(0, 6, size=3)
        targets = rng.integers(0, 8, size=3)
        mask = rng.random(3)
        proj = rng.normal(size=(2, 2, 3))

        def f():
            e = ad.embedding(tbl, ids)
            h = ad.add(ad.affine(x, w, b), e)
            h = ad.gelu(ad.rmsnorm(h, gn))
            h = ad.attention(h, h, h, n_heads=2, causal=True)
            ce = ad.softmax_ce(h, targets, mask)
            conv = ad.conv3x3(img, cw, cb, stride=2)
            return ad.add(ad.add(ce, ad.mse(h, np.zeros_like(h.data))),
                          ad.sum_all(ad.mul(conv, ad.tensor(proj))))

        report = grad_check(f, [x, w, b, gn, tbl, cw, cb, img], tol=tol)
        worst = max(worst, report.max_rel_err)
        if not report.passed:
            return CheckResult("op-gradients", False,
                               f"seed {seed}: {report.summary()}",
                               time.time() - t0)
    return CheckResult("op-gradients", True,
                       f"{seeds} seeds, max rel err {worst:.2e}",
                       time.time() - t0)


def check_model_gradients(seeds=20, tol=1e-4, elements=3):
    """Full backbone+expert micro config, both losses, attached cache."""
    t0 = time.time()
    worst = 0.0
    for seed in range(seeds):
        bb, ex, vocab = _micro_stack(seed)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 3)))
        sample = _micro_sample(vocab, bb.cfg, ex.cfg, rng)
        eps = rng.standard_normal(sample.chunk_norm.shape)
        tau = float(rng.uniform(0.1, 0.9))
        noisy = tau * sample.chunk_norm + (1 - tau) * eps
        params = ([p for _, p in bb.named_params()]
                  + [p for _, p in ex.named_params()])

        def f():
            _, l_ar, cache = bb.forward(sample.token_ids, sample.images,
                                        sample.proprio, sample.loss_mask)
            prefix = cache.slice(sample.act_start)
            v_hat = ex.predict_velocity(noisy, tau, prefix, sample.proprio)
            l_fm = ex.fm_loss(v_hat, sample.chunk_norm, eps)
            return ad.add(l_ar, l_fm)

        report = grad_check(f, params, tol=tol,
                            max_elements_per_param=elements,
                            rng=np.random.default_rng(seed))
        worst = max(worst, report.max_rel_err)
        if not report.passed:
            return CheckResult("model-gradients", False,
                               f"seed {seed}: {report.summary()}",
                               time.time() - t0)
    return CheckResult("model-gradients", True,
                       f"{seeds} seeds, max rel err {worst:.2e}",
                       time.time() - t0)


def check_codec(n=100_000):
    t0 = time.time()
    vocab = Vocabulary()
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, size=(n, 1))
    err = np.abs(codec.dequantize(codec.quantize(x, vocab), vocab, 1) - x).max()
    if err > 1.0 / N_ACTION_BINS:
        return CheckResult("codec-bounds", False,
                           f"round-trip error {err:.3e} > 1/255",
                           time.time() - t0)
    centers = codec.dequantize(
        vocab.action_base + np.arange(N_ACTION_BINS), vocab, 1)
    fixed = codec.quantize(centers, vocab)
    if not np.array_equal(fixed, vocab.action_base + np.arange(N_ACTION_BINS)):
        return CheckResult("codec-bounds", False, "bins are not fixed points",
                           time.time() - t0)
    n_tokens = codec.quantize(np.zeros((50, 3)), vocab).size
    if n_tokens != 150:
        return CheckResult("codec-bounds", False,
                           f"H=50 D=3 emitted {n_tokens} tokens",
                           time.time() - t0)
    return CheckResult("codec-bounds", True,
                       f"max err {err:.3e} <= 1/255; bins fixed; 150 tokens",
                       time.time() - t0)


def check_flow_oracle(tol=1e-9):
    t0 = time.time()
    rng = np.random.default_rng(1)
    target = rng.uniform(-1, 1, size=(50, 3))
    noise = rng.standard_normal(target.shape)
    worst = 0.0
    for k in (1, 2, 10, 100):
        out = integrate_flow(lambda a, tau: (target - a) / (1.0 - tau),
                             noise, k)
        worst = max(worst, float(np.abs(out - target).max()))
    passed = worst <= tol
    return CheckResult("flow-oracle", passed,
                       f"max endpoint error {worst:.2e} over K in 1,2,10,100",
                       time.time() - t0)


def check_insulation(insulation=True, seeds=3):
    """lam=0 must leave the VLM untouched; lam=1 must equal AR-only."""
    t0 = time.time()
    for seed in range(seeds):
        bb, ex, vocab = _micro_stack(seed + 100)
        rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))
        batch = [_micro_sample(vocab, bb.cfg, ex.cfg, rng) for _ in range(2)]
        cfg = TrainConfig(insulation=insulation, seed=seed)
        trainer = Trainer(bb, ex, cfg)
        vlm, exp = trainer.inspect_gradients(batch, lam=0.0)
        vlm_zero = all(g is None or not np.any(g) for g in vlm.values())
        exp_nonzero = any(g is not None and np.any(g) for g in exp.values())
        if not vlm_zero:
            return CheckResult(
                "insulation", False,
                f"seed {seed}: VLM received flow gradients at lam=0 "
                f"(insulation={insulation})", time.time() - t0)
        if not exp_nonzero:
            return CheckResult("insulation", False,
                               f"seed {seed}: expert gradients all zero",
                               time.time() - t0)
        vlm_full, _ = trainer.inspect_gradients(batch, lam=1.0)
        vlm_ar, _ = trainer.inspect_gradients(batch, lam=1.0, ar_only=True)
        for name in vlm_full:
            a, b = vlm_full[name], vlm_ar[name]
            if a is None and b is None:
                continue
            diff = np.abs(a - b)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-300)
            rel = np.where(diff == 0, 0.0, diff / denom).max()
            if rel > 1e-10:
                return CheckResult(
                    "insulation", False,
                    f"seed {seed}: {name} deviates from AR-only by {rel:.2e}",
                    time.time() - t0)
    return CheckResult("insulation", True,
                       f"{seeds} seeds: lam=0 leaves the VLM untouched; "
                       "lam=1 equals AR-only within 1e-10", time.time() - t0)


def run_all(insulation=True, quick=False):
    seeds = 5 if quick else 20
    return [
        check_op_gradients(seeds=seeds),
        check_model_gradients(seeds=seeds),
        check_codec(),
        check_flow_oracle(),
        check_insulation(insulation=insulation),
    ]
