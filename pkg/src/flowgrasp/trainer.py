"""Hybrid multi-source training with knowledge insulation.

Embodied batches supervise the VLM with next-token cross entropy (reasoning
text plus discrete action tokens) and the expert with the flow-matching
loss; the expert reads a detached slice of the VLM's KV cache, so its
gradients never reach the backbone unless the insulation flag is lifted.
Non-embodied batches update the VLM alone. One decoupled-weight-decay Adam
instance owns the disjoint union of both parameter sets.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import save_stack
from .expert import make_flow_sample

log = logging.getLogger("flowgrasp.trainer")


class BatchSchemaError(ValueError):
    """A batch reached the wrong step kind for its targets."""


class NonFiniteLossError(ArithmeticError):
    """Training aborted on a non-finite loss; carries the last good checkpoint."""

    def __init__(self, msg, last_checkpoint=None):
        super().__init__(msg)
        self.last_checkpoint = last_checkpoint


@dataclass
class TrainConfig:
    lam: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.01
    # two linear-decay phases; defaults mirror the reference schedule shape
    lr_a: float = 5e-5
    lr_b: float = 1e-5
    lr_c: float = 6e-6
    phase1_steps: int = 1500
    phase2_steps: int = 500
    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    insulation: bool = True
    vl_warmup_steps: int = 0
    log_interval: int = 10
    ckpt_interval: int = 500
    euler_steps: int = 10
    tau_dist: str = "uniform"
    threads: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.phase1_steps + self.phase2_steps < self.steps:
            raise ValueError("lr phases must cover the configured steps")


def lr_at(step, cfg):
    """Piecewise-linear two-phase decay: lr_a -> lr_b over phase 1, then
    lr_b -> lr_c over phase 2, constant lr_c afterwards."""
    if step < 0:
        raise ValueError("negative step")
    if step <= cfg.phase1_steps:
        f = step / cfg.phase1_steps if cfg.phase1_steps else 1.0
        return cfg.lr_a + (cfg.lr_b - cfg.lr_a) * f
    s = step - cfg.phase1_steps
    if s <= cfg.phase2_steps:
        f = s / cfg.phase2_steps if cfg.phase2_steps else 1.0
        return cfg.lr_b + (cfg.lr_c - cfg.lr_b) * f
    return cfg.lr_c


class AdamW:
    """Decoupled-weight-decay Adam over named parameters.

    Moments and step counts are per-parameter, so parameters outside a step's
    graph (grad None) are left bitwise untouched, moments included.
    """

    def __init__(self, named_params, beta1=0.9, beta2=0.95, eps=1e-8,
                 weight_decay=0.01):
        self.params = list(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = {n: 0 for n, _ in self.params}

    def step(self, lr):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            mhat = self.m[name] / (1 - self.beta1 ** t)
            vhat = self.v[name] / (1 - self.beta2 ** t)
            update = mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def moments_blocks(self):
        return {n: (self.m[n], self.v[n]) for n, _ in self.params}

    def load_moments(self, moments, t_counts):
        for n, _ in self.params:
            if n in moments:
                self.m[n] = moments[n][0].copy()
                self.v[n] = moments[n][1].copy()
            self.t[n] = int(t_counts.get(n, 0))


@dataclass
class StepReport:
    step: int
    kind: str                    # "embodied" | "vl"
    l_ar: float
    l_fm: float | None
    l_total: float
    grad_norm_vlm: float
    grad_norm_expert: float
    lr: float
    sources: tuple = ()

    def to_json(self):
        return json.dumps({
            "step": self.step, "kind": self.kind, "l_ar": self.l_ar,
            "l_fm": self.l_fm, "l_total": self.l_total,
            "grad_norm_vlm": self.grad_norm_vlm,
            "grad_norm_expert": self.grad_norm_expert, "lr": self.lr,
            "sources": list(self.sources)}, sort_keys=True)


def _mean_loss(losses):
    total = losses[0]
    for term in losses[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(losses))


def _grad_norm(named_params):
    sq = 0.0
    for _, p in named_params:
        if p.grad is not None:
            sq += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(sq)


class Trainer:
    """Owns the optimizer, the sample stream, and the metrics/checkpoint IO."""

    def __init__(self, backbone, expert, cfg, sampler=None, out_dir=None):
        self.backbone = backbone
        self.expert = expert
        self.cfg = cfg
        self.sampler = sampler
        self.out_dir = out_dir
        named = ([(f"backbone.{k}", p) for k, p in backbone.named_params()]
                 + [(f"expert.{k}", p) for k, p in expert.named_params()])
        self.optimizer = AdamW(named, beta1=cfg.beta1, beta2=cfg.beta2,
                               eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.step_count = 0
        self.flow_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(cfg.seed, 3)))
        self.reports = []
        self.last_checkpoint = None

    # ------------------------------------------------------------- internals

    def _losses_for(self, sample, insulation=None):
        """Per-sample (l_ar, l_fm) tensors; l_fm None for non-embodied."""
        insulation = self.cfg.insulation if insulation is None else insulation
        _, l_ar, cache = self.backbone.forward(
            sample.token_ids, sample.images, sample.proprio, sample.loss_mask)
        l_fm = None
        if sample.embodied:
            fs = make_flow_sample(sample.chunk_norm, self.flow_rng,
                                  self.cfg.tau_dist)
            prefix = cache.slice(sample.act_start)
            if insulation:
                prefix = prefix.detach()
            v_hat = self.expert.predict_velocity(
                fs.noisy, fs.tau, prefix, sample.proprio)
            l_fm = self.expert.fm_loss(v_hat, fs.chunk, fs.eps)
        return l_ar, l_fm

    def _apply(self, l_total):
        if not np.isfinite(l_total.data):
            raise NonFiniteLossError(
                f"non-finite loss at step {self.step_count}",
                last_checkpoint=self.last_checkpoint)
        self.optimizer.zero_grad()
        ad.backward(l_total)
        gn_vlm = _grad_norm(self.backbone.named_params())
        gn_exp = _grad_norm(self.expert.named_params())
        lr = lr_at(self.step_count, self.cfg)
        self.optimizer.step(lr)
        self.optimizer.zero_grad()
        return gn_vlm, gn_exp, lr

    def inspect_gradients(self, batch, lam=None, insulation=None, ar_only=False):
        """Backward of the embodied objective without an optimizer update.

        Returns ({vlm name: grad or None}, {expert name: grad or None}).
        With ar_only the loss is lam * L_AR alone, the reference for the
        insulation identity.
        """
        lam = self.cfg.lam if lam is None else lam
        self.optimizer.zero_grad()
        ar_losses, fm_losses = [], []
        for s in batch:
            l_ar, l_fm = self._losses_for(s, insulation=insulation)
            ar_losses.append(l_ar)
            if l_fm is not None:
                fm_losses.append(l_fm)
        l_total = ad.scale(_mean_loss(ar_losses), lam)
        if not ar_only and fm_losses:
            l_total = ad.add(l_total, _mean_loss(fm_losses))
        ad.backward(l_total)
        vlm = {n: None if p.grad is None else p.grad.copy()
               for n, p in self.backbone.named_params()}
        exp = {n: None if p.grad is None else p.grad.copy()
               for n, p in self.expert.named_params()}
        self.optimizer.zero_grad()
        return vlm, exp

    # ------------------------------------------------------------ step kinds

    def train_step_embodied(self, batch):
        """L_total = lam * L_AR + L_FM over an all-embodied batch; the VLM
        sees only the AR gradient unless insulation is off."""
        for s in batch:
            if not s.embodied or s.chunk_norm is None:
                raise BatchSchemaError(
                    "embodied step needs continuous action targets on every sample")
        ar_losses, fm_losses = [], []
        for s in batch:
            l_ar, l_fm = self._losses_for(s)
            ar_losses.append(l_ar)
            fm_losses.append(l_fm)
        l_ar = _mean_loss(ar_losses)
        l_fm = _mean_loss(fm_losses)
        l_total = ad.add(ad.scale(l_ar, self.cfg.lam), l_fm)
        gn_vlm, gn_exp, lr = self._apply(l_total)
        report = StepReport(
            step=self.step_count, kind="embodied", l_ar=float(l_ar.data),
            l_fm=float(l_fm.data), l_total=float(l_total.data),
            grad_norm_vlm=gn_vlm, grad_norm_expert=gn_exp, lr=lr,
            sources=tuple(s.provenance.get("source", "?") for s in batch))
        self.step_count += 1
        return report

    def train_step_vl(self, batch):
        """Non-embodied step: L_total = lam * L_AR; the expert is untouched."""
        for s in batch:
            if s.embodied or s.chunk_norm is not None:
                raise BatchSchemaError(
                    "vl step received continuous targets; route it embodied")
        ar_losses = [self._losses_for(s)[0] for s in batch]
        l_ar = _mean_loss(ar_losses)
        l_total = ad.scale(l_ar, self.cfg.lam)
        gn_vlm, gn_exp, lr = self._apply(l_total)
        report = StepReport(
            step=self.step_count, kind="vl", l_ar=float(l_ar.data),
            l_fm=None, l_total=float(l_total.data),
            grad_norm_vlm=gn_vlm, grad_norm_expert=gn_exp, lr=lr,
            sources=tuple(s.provenance.get("source", "?") for s in batch))
        self.step_count += 1
        return report

    # ------------------------------------------------------------------ run

    def run(self, metrics_path=None, ckpt_path=None, progress=None):
        """Consume the mixture stream until cfg.steps optimizer updates.

        Each drawn group is partitioned by embodied flag and routed to the
        matching step kind. Deterministic for a fixed config and seed in
        single-threaded mode.
        """
        cfg = self.cfg
        metrics_fh = open(metrics_path, "w") if metrics_path else None
        try:
            while self.step_count < cfg.steps:
                if self.step_count < cfg.vl_warmup_steps:
                    group = [self.sampler.draw_kind(
                        ("vision-language", "embodied-reasoning"))
                        for _ in range(cfg.batch_size)]
                else:
                    group = [self.sampler.draw() for _ in range(cfg.batch_size)]
                embodied = [s for s in group if s.embodied]
                plain = [s for s in group if not s.embodied]
                for batch, fn in ((embodied, self.train_step_embodied),
                                  (plain, self.train_step_vl)):
                    if not batch or self.step_count >= cfg.steps:
                        continue
                    report = fn(batch)
                    self.reports.append(report)
                    if metrics_fh and report.step % cfg.log_interval == 0:
                        metrics_fh.write(report.to_json() + "\n")
                        metrics_fh.flush()
                    if progress and report.step % cfg.log_interval == 0:
                        progress(report)
                    if ckpt_path and cfg.ckpt_interval and \
                            report.step and report.step % cfg.ckpt_interval == 0:
                        self.save(ckpt_path)
            if ckpt_path:
                self.save(ckpt_path)
        finally:
            if metrics_fh:
                metrics_fh.close()
        return self.reports

    def save(self, path):
        extra = {"train_step": self.step_count,
                 "adam_t": self.optimizer.t}
        save_stack(path, self.backbone, self.expert, step=self.step_count,
                   extra=extra, moments=self.optimizer.moments_blocks())
        self.last_checkpoint = path
        return path

    def resume_from(self, payload):
        """Continue step numbering and optimizer state from a checkpoint."""
        self.step_count = int(payload["extra"].get("train_step", payload["step"]))
        self.optimizer.load_moments(payload["moments"],
                                    payload["extra"].get("adam_t", {}))
