"""Operator CLI: gen-data, train, eval, infer, tokenize, verify.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (non-finite loss), 1 verification failure or unexpected error.
Set FLOWGRASP_LOG=debug|info|warning to control verbosity.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import codec as codec_mod
from . import env as toyenv
from .checkpoint import CheckpointError, load_stack, new_stack
from .config import ConfigError, load_config
from .data import DataConfigError, EpisodeParseError, load_manifest
from .inference import InferenceConfigError, Policy, run_request_file
from .mixture import MixtureSampler
from .trainer import NonFiniteLossError, Trainer
from .vocab import Vocabulary

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("flowgrasp")


def _setup_logging():
    level = os.environ.get("FLOWGRASP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _thread_limit(n):
    """Single-threaded BLAS for bitwise-reproducible runs."""
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(int(n), 1))


def _add_common(sub):
    sub.add_argument("--config", default=None, help="key = value config file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE", help="override a config key")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--out", default=None, help="output directory")


def _resolve(args, extra=()):
    overrides = list(args.overrides) + list(extra)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    return load_config(args.config, overrides)


def _write_resolved_config(cfg, out_dir):
    # `out` is omitted so identical-seed runs byte-match across locations
    lines = [f"{k} = {cfg.values[k]}" for k in sorted(cfg.values) if k != "out"]
    with open(os.path.join(out_dir, "config_used.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args):
    cfg = _resolve(args)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    info = toyenv.generate_dataset(
        out, n_episodes=cfg["env.episodes"], seed=cfg["seed"],
        scaffold_fraction=cfg["env.scaffold_fraction"],
        n_vl=cfg["env.vl_samples"], n_er=cfg["env.er_samples"],
        px=cfg["model.view_px"],
        robot_weight=cfg["env.robot_weight"],
        vl_weight=cfg["env.vl_weight"], er_weight=cfg["env.er_weight"])
    _write_resolved_config(cfg, out)
    print(f"gen-data: {info['episodes']} episodes "
          f"({info['oracle_successes']} oracle successes, "
          f"{info['frames']} frames) -> {out}")
    return EXIT_OK


def _build_sampler(cfg, vocab, bb_cfg, ex_cfg, stats, manifest):
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(cfg["seed"], 11)))
    max_eps = cfg["data.max_episodes"] or None
    return MixtureSampler(
        manifest, vocab, stats, horizon=ex_cfg.horizon,
        n_image_tokens=bb_cfg.n_image_tokens, rng=rng,
        keyframe_delta=cfg["data.keyframe_delta"],
        augment=cfg["data.augment"],
        per_signature=cfg["data.templates_per_signature"],
        max_episodes=max_eps)


def cmd_train(args):
    cfg = _resolve(args)
    if not cfg["data.manifest"]:
        raise ConfigError("train needs data.manifest")
    manifest = load_manifest(cfg["data.manifest"])
    stats = codec_mod.NormStats.load(manifest.norm_stats_path)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_resolved_config(cfg, out)

    if cfg["train.resume"]:
        backbone, expert, vocab, payload = load_stack(cfg["train.resume"])
    else:
        backbone, expert, vocab = new_stack(
            cfg.backbone_config(), cfg.expert_config(), seed=cfg["seed"])
        payload = None
    sampler = _build_sampler(cfg, vocab, backbone.cfg, expert.cfg, stats,
                             manifest)
    trainer = Trainer(backbone, expert, cfg.train_config(), sampler=sampler,
                      out_dir=out)
    if payload is not None:
        trainer.resume_from(payload)

    metrics_path = os.path.join(out, "metrics.jsonl")
    ckpt_path = os.path.join(out, "checkpoint.fgck")

    def progress(report):
        log.info("step %d kind=%s l_total=%.4f lr=%.2e",
                 report.step, report.kind, report.l_total, report.lr)

    with _thread_limit(cfg["threads"]):
        trainer.run(metrics_path=metrics_path, ckpt_path=ckpt_path,
                    progress=progress)
    from .report import render_train_figures
    figures = render_train_figures(metrics_path, out)
    print(f"train: {trainer.step_count} steps -> {ckpt_path}")
    for f in figures:
        print(f"train: figure {f}")
    return EXIT_OK


def _eval_policy(cfg, mode):
    name = cfg["eval.policy"]
    if name == "oracle":
        return toyenv.oracle_chunk_policy(horizon=cfg["expert.horizon"]), "oracle"
    if name == "random":
        return toyenv.random_chunk_policy(horizon=cfg["expert.horizon"]), "random"
    if not cfg["infer.checkpoint"]:
        raise ConfigError("eval of the model needs infer.checkpoint")
    stats_path = cfg["infer.norm_stats"]
    if not stats_path and cfg["data.manifest"]:
        stats_path = load_manifest(cfg["data.manifest"]).norm_stats_path
    policy = Policy.from_checkpoint(cfg["infer.checkpoint"],
                                    stats_path or None)
    return policy.as_eval_policy(
        mode=mode, euler_steps=cfg["eval.euler_steps"],
        max_reason_len=cfg["eval.max_reason_len"]), f"model-{mode}"


def cmd_eval(args):
    extra = [f"infer.mode={args.mode}"] if args.mode else []
    cfg = _resolve(args, extra)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _write_resolved_config(cfg, out)
    modes = ["direct", "reasoned"] if (args.mode or "direct") == "both" \
        else [args.mode or cfg["infer.mode"]]
    reports = {}
    with _thread_limit(cfg["threads"]):
        for mode in modes:
            policy, label = _eval_policy(cfg, mode)
            rep = toyenv.evaluate(
                policy, n_rollouts=cfg["eval.rollouts"], seed=cfg["seed"],
                execute_steps=cfg["eval.execute_steps"],
                px=cfg["model.view_px"],
                log_path=os.path.join(out, f"episodes_{label}.jsonl"))
            rep["mode"] = mode
            rep["policy"] = label
            reports[label] = rep
            lo, hi = rep["interval_95"]
            print(f"eval[{label}]: success "
                  f"{rep['successes']}/{rep['rollouts']} = "
                  f"{rep['success_rate']:.2%} (95% CI {lo:.2%}..{hi:.2%})")
    slim = {k: {kk: vv for kk, vv in v.items() if kk != "episodes"}
            for k, v in reports.items()}
    with open(os.path.join(out, "eval_report.json"), "w") as fh:
        json.dump(slim, fh, sort_keys=True, indent=2)
    from .report import render_eval_figures
    for f in render_eval_figures(reports, out):
        print(f"eval: figure {f}")
    return EXIT_OK


def cmd_infer(args):
    cfg = _resolve(args, [f"infer.mode={args.mode}"] if args.mode else [])
    if not cfg["infer.checkpoint"]:
        raise ConfigError("infer needs infer.checkpoint")
    stats_path = cfg["infer.norm_stats"]
    if not stats_path and cfg["data.manifest"]:
        stats_path = load_manifest(cfg["data.manifest"]).norm_stats_path
    policy = Policy.from_checkpoint(cfg["infer.checkpoint"], stats_path or None)
    with _thread_limit(cfg["threads"]):
        n = run_request_file(policy, args.requests, args.responses,
                             base_dir=args.base_dir)
    print(f"infer: {n} responses -> {args.responses}")
    return EXIT_OK


def cmd_tokenize(args):
    cfg = _resolve(args)
    vocab = Vocabulary()
    if cfg["infer.norm_stats"]:
        stats = codec_mod.NormStats.load(cfg["infer.norm_stats"])
    else:
        dims = len(args.values.split(";")[0].split(","))
        stats = codec_mod.NormStats(q_lo=[-1.0] * dims, q_hi=[1.0] * dims)
    rows = [[float(v) for v in row.split(",")]
            for row in args.values.split(";")]
    raw = np.asarray(rows)
    norm = codec_mod.normalize(raw, stats)
    tokens = codec_mod.quantize(norm, vocab)
    back_norm = codec_mod.dequantize(tokens, vocab, raw.shape[1])
    back_raw = codec_mod.denormalize(back_norm, stats)
    print("raw          -> normalized  -> bin  -> token -> decoded (err)")
    k = 0
    for i in range(raw.shape[0]):
        for j in range(raw.shape[1]):
            tok = int(tokens[k])
            print(f"{raw[i, j]:+0.6f}   {norm[i, j]:+0.6f}   "
                  f"{tok - vocab.action_base:4d}   {tok:5d}   "
                  f"{back_raw[i, j]:+0.6f} ({abs(back_raw[i, j] - raw[i, j]):.2e})")
            k += 1
    return EXIT_OK


def cmd_verify(args):
    cfg = _resolve(args)
    from .verify import run_all
    ad.set_mode("test")
    try:
        with _thread_limit(cfg["threads"]):
            results = run_all(insulation=cfg["train.insulation"],
                              quick=args.quick)
    finally:
        ad.set_mode("train")
    ok = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name} "
              f"({r.seconds:.1f}s) - {r.detail}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_FAIL


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flowgrasp",
        description="desk-scale vision-language-action stack")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate the toy-env dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = subs.add_parser("train", help="run the hybrid training loop")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("eval", help="closed-loop evaluation")
    _add_common(p)
    p.add_argument("--mode", choices=["direct", "reasoned", "both"],
                   default=None)
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("infer", help="batch inference over a request file")
    _add_common(p)
    p.add_argument("--requests", required=True)
    p.add_argument("--responses", required=True)
    p.add_argument("--base-dir", default=".")
    p.add_argument("--mode", choices=["direct", "reasoned"], default=None)
    p.set_defaults(fn=cmd_infer)

    p = subs.add_parser("tokenize", help="inspect the action codec")
    _add_common(p)
    p.add_argument("--values", required=True,
                   help="rows 'a,b,c;d,e,f' of raw action values")
    p.set_defaults(fn=cmd_tokenize)

    p = subs.add_parser("verify", help="gradient/codec/insulation/flow checks")
    _add_common(p)
    p.add_argument("--quick", action="store_true",
                   help="5 seeds instead of 20")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataConfigError, EpisodeParseError, CheckpointError,
            InferenceConfigError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        ref = exc.last_checkpoint or "none"
        print(f"numeric failure: {exc} (last good checkpoint: {ref})",
              file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
