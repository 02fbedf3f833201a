"""Run configuration: a flat key-value file with a strict schema.

Files hold `key = value` lines ('#' comments allowed). Every key must appear
in the schema below; unknown keys are rejected before any work happens.
Precedence is CLI overrides > file > defaults.
"""

from dataclasses import dataclass

from .backbone import BackboneConfig
from .expert import ExpertConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or a schema violation in a run config."""


def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("true", "yes", "1", "on"):
        return True
    if s.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type converter, default)
SCHEMA = {
    "seed": (int, 0),
    "out": (str, "runs/latest"),
    "threads": (int, 1),

    "model.dim": (int, 128),
    "model.layers": (int, 4),
    "model.heads": (int, 4),
    "model.mlp_ratio": (int, 4),
    "model.max_seq": (int, 512),
    "model.view_px": (int, 64),
    "model.patch": (int, 8),
    "model.views": (int, 3),
    "model.proprio_dim": (int, 4),

    "expert.width": (int, 64),
    "expert.layers": (int, 4),
    "expert.heads": (int, 4),
    "expert.mlp_ratio": (int, 4),
    "expert.horizon": (int, 50),
    "expert.action_dim": (int, 3),
    "expert.tau_features": (int, 16),

    "data.manifest": (str, ""),
    "data.keyframe_delta": (float, 0.01),
    "data.augment": (_bool, True),
    "data.templates_per_signature": (int, 20),
    "data.max_episodes": (int, 0),

    "train.steps": (int, 2000),
    "train.batch_size": (int, 4),
    "train.lam": (float, 1.0),
    "train.lr_a": (float, 5e-5),
    "train.lr_b": (float, 1e-5),
    "train.lr_c": (float, 6e-6),
    "train.phase1_steps": (int, 1500),
    "train.phase2_steps": (int, 500),
    "train.weight_decay": (float, 0.01),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.95),
    "train.eps": (float, 1e-8),
    "train.insulation": (_bool, True),
    "train.vl_warmup_steps": (int, 0),
    "train.log_interval": (int, 10),
    "train.ckpt_interval": (int, 500),
    "train.tau_dist": (str, "uniform"),
    "train.resume": (str, ""),

    "env.episodes": (int, 500),
    "env.scaffold_fraction": (float, 0.5),
    "env.vl_samples": (int, 400),
    "env.er_samples": (int, 400),
    "env.robot_weight": (float, 0.6),
    "env.vl_weight": (float, 0.25),
    "env.er_weight": (float, 0.15),

    "eval.rollouts": (int, 100),
    "eval.execute_steps": (int, 10),
    "eval.euler_steps": (int, 10),
    "eval.max_reason_len": (int, 96),
    "eval.policy": (str, "model"),     # model | oracle | random

    "infer.checkpoint": (str, ""),
    "infer.norm_stats": (str, ""),
    "infer.mode": (str, "direct"),
}


@dataclass
class RunConfig:
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key):
        return self.values[key]

    def section(self, prefix):
        plen = len(prefix) + 1
        return {k[plen:]: v for k, v in self.values.items()
                if k.startswith(prefix + ".")}

    def backbone_config(self):
        m = self.section("model")
        return BackboneConfig(dim=m["dim"], layers=m["layers"], heads=m["heads"],
                              mlp_ratio=m["mlp_ratio"], max_seq=m["max_seq"],
                              view_px=m["view_px"], patch=m["patch"],
                              n_views=m["views"], proprio_dim=m["proprio_dim"])

    def expert_config(self):
        e = self.section("expert")
        return ExpertConfig(width=e["width"], layers=e["layers"],
                            heads=e["heads"], mlp_ratio=e["mlp_ratio"],
                            horizon=e["horizon"], action_dim=e["action_dim"],
                            tau_features=e["tau_features"],
                            proprio_dim=self["model.proprio_dim"],
                            vlm_dim=self["model.dim"])

    def train_config(self):
        t = self.section("train")
        try:
            return TrainConfig(
                lam=t["lam"], beta1=t["beta1"], beta2=t["beta2"], eps=t["eps"],
                weight_decay=t["weight_decay"], lr_a=t["lr_a"], lr_b=t["lr_b"],
                lr_c=t["lr_c"], phase1_steps=t["phase1_steps"],
                phase2_steps=t["phase2_steps"], steps=t["steps"],
                batch_size=t["batch_size"], seed=self["seed"],
                insulation=t["insulation"],
                vl_warmup_steps=t["vl_warmup_steps"],
                log_interval=t["log_interval"],
                ckpt_interval=t["ckpt_interval"], tau_dist=t["tau_dist"],
                threads=self["threads"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_value(key, raw):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    conv, _ = SCHEMA[key]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def load_config(path=None, overrides=None):
    """Defaults, overlaid by an optional file, overlaid by CLI overrides."""
    values = {k: d for k, (_, d) in SCHEMA.items()}
    if path:
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for lineno, line in enumerate(lines, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            values[key.strip()] = parse_value(key.strip(), raw.strip())
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        values[key.strip()] = parse_value(key.strip(), raw.strip())
    return RunConfig(values)
