"""Flow-matching action expert conditioned on the backbone's KV cache.

Training regresses the velocity target (A - eps) at a random flow time tau
along the interpolation a~ = tau*A + (1-tau)*eps; sampling integrates the
learned field from Gaussian noise with K Euler steps. The expert's layers
attend over [projected VLM prefix || expert tokens]; a detached cache is the
knowledge-insulation barrier.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class CacheMismatchError(ValueError):
    """Cache layer count differs from the expert's configuration."""


# The regression target satisfies A - eps = (A - a~)/(1 - tau), so the head
# predicts the denoised endpoint and the velocity is formed analytically;
# the divisor floor bounds the training loss near tau = 1 and makes the last
# Euler step of a K <= 1/TAU_FLOOR integration land on the endpoint exactly.
TAU_FLOOR = 0.1


@dataclass(frozen=True)
class ExpertConfig:
    width: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    horizon: int = 50
    action_dim: int = 3
    proprio_dim: int = 4
    vlm_dim: int = 128
    tau_features: int = 16
    rms_eps: float = 1e-5

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("width", "layers", "heads", "mlp_ratio", "horizon",
                 "action_dim", "proprio_dim", "vlm_dim", "tau_features",
                 "rms_eps")}


@dataclass
class FlowSample:
    """One flow-matching supervision point: a~ = tau*A + (1-tau)*eps."""

    chunk: np.ndarray
    eps: np.ndarray
    tau: float
    noisy: np.ndarray

    @property
    def velocity_target(self):
        return self.chunk - self.eps


def sample_tau(rng, dist="uniform"):
    """Flow-time draw. "balanced" has density proportional to
    max(1-tau, TAU_FLOOR)^2, cancelling the 1/(1-tau)^2 loss amplification of
    the endpoint-parameterized velocity so every noise level contributes
    equal endpoint-error weight."""
    if dist == "uniform":
        return float(rng.uniform(0.0, 1.0))
    if dist == "balanced":
        f = TAU_FLOOR
        z_body = (1.0 - f ** 3) / 3.0
        u = float(rng.uniform(0.0, 1.0)) * (z_body + f ** 2 * f)
        if u <= z_body:
            return 1.0 - (1.0 - 3.0 * u) ** (1.0 / 3.0)
        return (1.0 - f) + (u - z_body) / f ** 2
    raise ValueError(f"unsupported tau distribution {dist!r}")


def make_flow_sample(chunk, rng, tau_dist="uniform"):
    """Draw eps ~ N(0, I) and tau, and form the noisy interpolant exactly."""
    chunk = np.asarray(chunk, dtype=np.float64)
    eps = rng.standard_normal(chunk.shape)
    tau = sample_tau(rng, tau_dist)
    noisy = tau * chunk + (1.0 - tau) * eps
    return FlowSample(chunk=chunk, eps=eps, tau=tau, noisy=noisy)


def tau_embedding(tau, n_features):
    """Sinusoidal features of the flow time, geometric frequency ladder."""
    half = n_features // 2
    freqs = np.exp(np.linspace(0.0, math.log(1000.0), half))
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _init_params(cfg, rng):
    std = 0.02
    p = {}

    def normal(shape, scale=std):
        return rng.normal(0.0, scale, size=shape)

    p["act_in_w"] = normal((cfg.action_dim, cfg.width))
    p["act_in_b"] = np.zeros(cfg.width)
    p["tau_w"] = normal((cfg.tau_features, cfg.width))
    p["tau_b"] = np.zeros(cfg.width)
    p["prop_w"] = normal((cfg.proprio_dim, cfg.width))
    p["prop_b"] = np.zeros(cfg.width)
    p["pos_emb"] = normal((cfg.horizon + 2, cfg.width))
    res_scale = std / math.sqrt(2 * cfg.layers)
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        p[pre + "ln1"] = np.ones(cfg.width)
        for nm in ("wq", "wk", "wv"):
            p[pre + nm] = normal((cfg.width, cfg.width))
        p[pre + "wo"] = rng.normal(0.0, res_scale, size=(cfg.width, cfg.width))
        for nm in ("bq", "bk", "bv", "bo"):
            p[pre + nm] = np.zeros(cfg.width)
        p[pre + "pk"] = normal((cfg.vlm_dim, cfg.width))
        p[pre + "pv"] = normal((cfg.vlm_dim, cfg.width))
        p[pre + "ln2"] = np.ones(cfg.width)
        p[pre + "w1"] = normal((cfg.width, cfg.width * cfg.mlp_ratio))
        p[pre + "b1"] = np.zeros(cfg.width * cfg.mlp_ratio)
        p[pre + "w2"] = rng.normal(0.0, res_scale,
                                   size=(cfg.width * cfg.mlp_ratio, cfg.width))
        p[pre + "b2"] = np.zeros(cfg.width)
    p["ln_f"] = np.ones(cfg.width)
    p["out_w"] = normal((cfg.width, cfg.action_dim))
    p["out_b"] = np.zeros(cfg.action_dim)
    return {k: ad.param(v, name=f"expert.{k}") for k, v in p.items()}


class ActionExpert:
    """Velocity-field regressor over H action rows + tau + proprio tokens."""

    def __init__(self, cfg, rng=None, params=None):
        self.cfg = cfg
        if params is not None:
            self.p = params
        else:
            if rng is None:
                rng = np.random.default_rng(1)
            self.p = _init_params(cfg, rng)

    def named_params(self):
        return [(k, self.p[k]) for k in sorted(self.p)]

    def astype(self, dtype):
        cast = {k: ad.Tensor(v.data.astype(dtype), requires_grad=True, name=v.name)
                for k, v in self.p.items()}
        return ActionExpert(self.cfg, params=cast)

    def predict_velocity(self, noisy, tau, cache, proprio):
        """Expert forward: H x D noisy chunk + flow time + prefix -> v-hat.

        Every layer attends over the projected VLM prefix K/V followed by the
        expert's own tokens (non-causal within the chunk: the whole window is
        denoised jointly). The cache is read-only; pass a detached cache to
        block gradients into the VLM.
        """
        cfg = self.cfg
        if len(cache) == 0:
            raise CacheMismatchError("expert needs a non-empty prefix cache")
        if cache.n_layers != cfg.layers:
            raise CacheMismatchError(
                f"cache has {cache.n_layers} layers, expert expects {cfg.layers}")
        noisy = np.asarray(noisy)
        if noisy.shape != (cfg.horizon, cfg.action_dim):
            raise ad.DimensionError(
                f"noisy chunk shape {noisy.shape} != ({cfg.horizon}, {cfg.action_dim})")

        rows = ad.affine(ad.tensor(noisy), self.p["act_in_w"], self.p["act_in_b"])
        tau_feat = tau_embedding(float(tau), cfg.tau_features).reshape(1, -1)
        tau_tok = ad.affine(ad.tensor(tau_feat), self.p["tau_w"], self.p["tau_b"])
        prop_tok = ad.affine(ad.tensor(np.asarray(proprio).reshape(1, -1)),
                             self.p["prop_w"], self.p["prop_b"])
        x = ad.concat([rows, tau_tok, prop_tok], axis=0)
        x = ad.add(x, self.p["pos_emb"])

        for i in range(cfg.layers):
            pre = f"blocks.{i}."
            h = ad.rmsnorm(x, self.p[pre + "ln1"], cfg.rms_eps)
            q = ad.affine(h, self.p[pre + "wq"], self.p[pre + "bq"])
            k = ad.affine(h, self.p[pre + "wk"], self.p[pre + "bk"])
            v = ad.affine(h, self.p[pre + "wv"], self.p[pre + "bv"])
            ck, cv = cache.layers[i]
            pk = ad.matmul(ck, self.p[pre + "pk"])
            pv = ad.matmul(cv, self.p[pre + "pv"])
            att = ad.attention(q, k, v, cfg.heads, causal=False,
                               prefix_k=pk, prefix_v=pv)
            x = ad.add(x, ad.affine(att, self.p[pre + "wo"], self.p[pre + "bo"]))
            h2 = ad.rmsnorm(x, self.p[pre + "ln2"], cfg.rms_eps)
            m = ad.affine(ad.gelu(ad.affine(h2, self.p[pre + "w1"], self.p[pre + "b1"])),
                          self.p[pre + "w2"], self.p[pre + "b2"])
            x = ad.add(x, m)
        x = ad.rmsnorm(x, self.p["ln_f"], cfg.rms_eps)
        chunk_tokens = ad.narrow(x, 0, 0, cfg.horizon)
        endpoint = ad.affine(chunk_tokens, self.p["out_w"], self.p["out_b"])
        rate = 1.0 / max(1.0 - float(tau), TAU_FLOOR)
        return ad.scale(ad.sub(endpoint, ad.tensor(noisy)), rate)

    def fm_loss(self, v_hat, chunk, eps):
        """MSE between the predicted velocity and (A - eps)."""
        target = np.asarray(chunk) - np.asarray(eps)
        return ad.mse(v_hat, target.astype(v_hat.data.dtype))

    def sample_actions(self, cache, proprio, k_steps, rng):
        """Integrate the learned field from noise; clamp to codec range."""
        velocity = lambda a, tau: self.predict_velocity(a, tau, cache, proprio).data
        with ad.no_grad():
            noise = rng.standard_normal((self.cfg.horizon, self.cfg.action_dim))
            out = integrate_flow(velocity, noise, k_steps)
        return np.clip(out, -1.0, 1.0)


def integrate_flow(velocity_fn, noise, k_steps):
    """Euler integration a <- a + (1/K) v(a, k/K) from tau=0 to 1."""
    if k_steps < 1:
        raise ValueError("flow integration needs K >= 1")
    a = np.asarray(noise, dtype=np.float64).copy()
    for k in range(k_steps):
        a = a + velocity_fn(a, k / k_steps) / k_steps
    return a
