"""Self-describing checkpoint container and model-stack assembly.

Byte layout (little-endian, documented in docs/formats.md):

    bytes 0..7    magic  b"FGCK" + version u32 (currently 1)
    bytes 8..15   header length u64
    header        UTF-8 JSON: format_version, config, vocab, step, extra,
                  and a `blocks` index of {name, dtype, shape, offset, nbytes}
    data          raw C-order parameter blocks, offsets relative to data start

Identical inputs serialize to identical bytes: the header is dumped with
sorted keys and blocks are ordered by name.
"""

import json
import struct

import numpy as np

from .backbone import Backbone, BackboneConfig
from .expert import ActionExpert, ExpertConfig
from .vocab import Vocabulary

MAGIC = b"FGCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint file."""


def save_checkpoint(path, config, vocab_cfg, params, step=0, extra=None,
                    moments=None):
    """Write named arrays (plus optional optimizer moments) to `path`."""
    blocks = dict(params)
    if moments is not None:
        for name, (m, v) in moments.items():
            blocks[f"adam.m.{name}"] = m
            blocks[f"adam.v.{name}"] = v
    names = sorted(blocks)
    index = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(blocks[name])
        index.append({"name": name, "dtype": str(arr.dtype),
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "vocab": vocab_cfg,
        "step": int(step),
        "extra": extra or {},
        "blocks": index,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for name in names:
            fh.write(np.ascontiguousarray(blocks[name]).tobytes())


def load_checkpoint(path):
    """Read a checkpoint into {config, vocab, step, extra, params, moments}."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    params = {}
    moments = {}
    for blk in header["blocks"]:
        raw = data[blk["offset"]:blk["offset"] + blk["nbytes"]]
        arr = np.frombuffer(raw, dtype=blk["dtype"]).reshape(blk["shape"]).copy()
        if blk["name"].startswith("adam.m."):
            moments.setdefault(blk["name"][7:], [None, None])[0] = arr
        elif blk["name"].startswith("adam.v."):
            moments.setdefault(blk["name"][7:], [None, None])[1] = arr
        else:
            params[blk["name"]] = arr
    return {"config": header["config"], "vocab": header["vocab"],
            "step": header["step"], "extra": header["extra"],
            "params": params, "moments": {k: tuple(v) for k, v in moments.items()}}


# ------------------------------------------------------------- model stacks


def new_stack(backbone_cfg=None, expert_cfg=None, charset=None, seed=0):
    """Fresh backbone + expert + vocabulary with split init streams."""
    vocab = Vocabulary(**({"charset": charset} if charset else {}))
    bb_cfg = backbone_cfg or BackboneConfig()
    ex_cfg = expert_cfg or ExpertConfig(vlm_dim=bb_cfg.dim,
                                        proprio_dim=bb_cfg.proprio_dim)
    rb = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 1)))
    re = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 2)))
    return Backbone(bb_cfg, vocab, rng=rb), ActionExpert(ex_cfg, rng=re), vocab


def stack_params(backbone, expert):
    """Disjoint union of both components' parameters, name-prefixed."""
    out = {}
    for name, p in backbone.named_params():
        out[f"backbone.{name}"] = p
    for name, p in expert.named_params():
        out[f"expert.{name}"] = p
    return out


def save_stack(path, backbone, expert, step=0, extra=None, moments=None):
    config = {"backbone": backbone.cfg.to_dict(), "expert": expert.cfg.to_dict()}
    arrays = {k: t.data for k, t in stack_params(backbone, expert).items()}
    save_checkpoint(path, config, backbone.vocab.to_config(), arrays,
                    step=step, extra=extra, moments=moments)


def load_stack(path):
    """Rebuild (backbone, expert, vocab, payload) from a checkpoint."""
    payload = load_checkpoint(path)
    vocab = Vocabulary.from_config(payload["vocab"])
    bb_cfg = BackboneConfig(**payload["config"]["backbone"])
    ex_cfg = ExpertConfig(**payload["config"]["expert"])
    from . import autodiff as ad
    bb_params = {}
    ex_params = {}
    for name, arr in payload["params"].items():
        kind, _, rest = name.partition(".")
        if kind == "backbone":
            bb_params[rest] = ad.Tensor(arr, requires_grad=True, name=f"vlm.{rest}")
        elif kind == "expert":
            ex_params[rest] = ad.Tensor(arr, requires_grad=True, name=f"expert.{rest}")
        else:
            raise CheckpointError(f"unknown parameter namespace in {name!r}")
    backbone = Backbone(bb_cfg, vocab, params=bb_params)
    expert = ActionExpert(ex_cfg, params=ex_params)
    return backbone, expert, vocab, payload
