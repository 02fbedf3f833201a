"""Conversation templates: varied user phrasings over fixed supervision.

Robot templates pair a user phrasing with a scaffold field signature (which
optional segments the assistant target carries). A record can only be
rendered by templates whose required fields it actually has; among those the
choice is uniform. VL and reasoning data use their own small families.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import codec
from . import data as D
from . import env as E
from .codec import quantize
from .scaffold import ScaffoldFields, assemble_scaffold, encode_box, encode_point


class TemplateCompatibilityError(ValueError):
    """No template matches the record's field signature."""


@dataclass(frozen=True)
class Template:
    name: str
    required: frozenset      # scaffold fields the assistant target carries
    user_pattern: str        # format string over {instruction}


_USER_PATTERNS = (
    "{instruction}",
    "task: {instruction}",
    "{instruction}. what do you do?",
    "instruction: {instruction}",
    "you must {instruction}",
    "please {instruction}",
    "goal: {instruction}. respond with your plan and actions",
    "{instruction}. think, then act",
    "the operator says: {instruction}",
    "complete this task: {instruction}",
    "{instruction}. output your next moves",
    "robot, {instruction}",
    "current objective: {instruction}",
    "{instruction} now",
    "your job: {instruction}",
    "do the following: {instruction}",
    "{instruction}. proceed",
    "act on this instruction: {instruction}",
    "here is the task - {instruction}",
    "{instruction}. go",
)

_OPTIONAL = ("subtask", "goal_box", "trace")


def build_robot_pool(per_signature=20):
    """One template per (field signature, phrasing) pair; 8 signatures."""
    pool = []
    signatures = []
    for r in range(len(_OPTIONAL) + 1):
        signatures.extend(combinations(_OPTIONAL, r))
    for sig in signatures:
        for i in range(per_signature):
            pattern = _USER_PATTERNS[i % len(_USER_PATTERNS)]
            pool.append(Template(
                name=f"robot/{'+'.join(sig) or 'actions'}/{i}",
                required=frozenset(sig), user_pattern=pattern))
    return tuple(pool)


_VL_PATTERNS = (
    "{question}",
    "question: {question}",
    "please answer: {question}",
    "look at the scene. {question}",
    "answer briefly: {question}",
)

_ER_PATTERNS = (
    "{instruction}. {question}",
    "task: {instruction}. {question}",
    "given the goal '{instruction}', {question}",
)


def compatible_templates(pool, present_fields):
    present = frozenset(present_fields)
    return [t for t in pool if t.required <= present]


def present_fields(record, t):
    out = []
    if record.subtask[t] is not None:
        out.append("subtask")
    if record.goal_box[t] is not None:
        out.append("goal_box")
    if record.trace[t] is not None:
        out.append("trace")
    return tuple(out)


def render_conversation(record, t, template_pool, rng, vocab, loader, stats,
                        horizon, n_image_tokens, view_priority=E.VIEW_NAMES,
                        augment=True, source_name="robot"):
    """Robot record at original timestep index `t` -> ConversationSample.

    The template is drawn uniformly among those whose required fields the
    record carries at t; the assistant target is the template's scaffold
    segments followed by the quantized action window; the expert's
    continuous chunk target comes from the same window.
    """
    fields = present_fields(record, t)
    candidates = compatible_templates(template_pool, fields)
    if not candidates:
        raise TemplateCompatibilityError(
            f"no template for field signature {fields!r}")
    tpl = candidates[int(rng.integers(0, len(candidates)))]

    chunk_raw = codec.window(record.derived_actions(), t, horizon)
    chunk_norm = codec.normalize(chunk_raw, stats)
    action_tokens = quantize(chunk_norm, vocab)

    sf = ScaffoldFields(action_tokens=action_tokens)
    if "subtask" in tpl.required:
        sf.subtask = record.subtask[t]
    if "goal_box" in tpl.required:
        sf.goal_box = encode_box(record.goal_box[t])
    if "trace" in tpl.required:
        sf.trace = tuple(encode_point(pt) for pt in record.trace[t])
    assistant_ids, seg_labels = assemble_scaffold(sf, vocab)

    user_ids = vocab.encode_text(tpl.user_pattern.format(instruction=record.instruction))
    ids, mask = D.build_token_sequence(vocab, n_image_tokens, user_ids,
                                       list(assistant_ids), with_proprio=True)
    act_start = int(np.nonzero(ids == vocab.token_id("<act>"))[0][0])

    imgs, names, flags = D.pad_views(loader.views_at(record.view_refs[t]),
                                     view_priority)
    if augment:
        imgs = D.jitter_views(imgs, flags, rng)
    return D.ConversationSample(
        token_ids=ids, loss_mask=mask, images=imgs, pad_flags=flags,
        proprio=record.states[t], chunk_norm=chunk_norm, embodied=True,
        act_start=act_start,
        provenance={"source": source_name, "episode": record.name, "t": t,
                    "template": tpl.name},
        segment_labels=seg_labels)


def render_vl(rec, rng, vocab, loader, n_image_tokens,
              view_priority=E.VIEW_NAMES, augment=True, source_name="vl"):
    """Vision-language QA line -> non-embodied ConversationSample."""
    pattern = _VL_PATTERNS[int(rng.integers(0, len(_VL_PATTERNS)))]
    user_ids = vocab.encode_text(pattern.format(question=rec["question"]))
    assistant_ids = D.encode_rich(rec["answer"], vocab)
    ids, mask = D.build_token_sequence(vocab, n_image_tokens, user_ids,
                                       assistant_ids, with_proprio=False)
    imgs, _, flags = D.pad_views(loader.views_at(rec["views"]), view_priority)
    if augment:
        imgs = D.jitter_views(imgs, flags, rng)
    return D.ConversationSample(
        token_ids=ids, loss_mask=mask, images=imgs, pad_flags=flags,
        proprio=None, chunk_norm=None, embodied=False, act_start=None,
        provenance={"source": source_name, "question": rec["question"]})


def render_er(rec, rng, vocab, loader, n_image_tokens,
              view_priority=E.VIEW_NAMES, augment=True, source_name="er"):
    """Embodied-reasoning line (subtask prediction) -> ConversationSample."""
    pattern = _ER_PATTERNS[int(rng.integers(0, len(_ER_PATTERNS)))]
    user_ids = vocab.encode_text(pattern.format(
        instruction=rec["instruction"], question=rec["question"]))
    assistant_ids = vocab.encode_text(rec["subtask"])
    ids, mask = D.build_token_sequence(vocab, n_image_tokens, user_ids,
                                       assistant_ids, with_proprio=False)
    imgs, _, flags = D.pad_views(loader.views_at(rec["views"]), view_priority)
    if augment:
        imgs = D.jitter_views(imgs, flags, rng)
    return D.ConversationSample(
        token_ids=ids, loss_mask=mask, images=imgs, pad_flags=flags,
        proprio=None, chunk_norm=None, embodied=False, act_start=None,
        provenance={"source": source_name})
