"""Token vocabulary: control tokens, character-level text, 255 action bins.

Layout is [controls][text chars][action bins], so the action bins always form
one contiguous block of exactly 255 ids and never overlap the other ranges.
"""

import string

N_ACTION_BINS = 255

PAD = "<pad>"
EOS = "<eos>"
IMG = "<img>"
PROP = "<prop>"
USR = "<usr>"
ASST = "<asst>"
SUB_OPEN, SUB_CLOSE = "<sub>", "</sub>"
BOX_OPEN, BOX_CLOSE = "<box>", "</box>"
TRACE_OPEN, TRACE_CLOSE = "<trace>", "</trace>"
ACT_OPEN, ACT_CLOSE = "<act>", "</act>"

CONTROL_TOKENS = (
    PAD, EOS, IMG, PROP, USR, ASST,
    SUB_OPEN, SUB_CLOSE, BOX_OPEN, BOX_CLOSE,
    TRACE_OPEN, TRACE_CLOSE, ACT_OPEN, ACT_CLOSE,
)

DEFAULT_CHARSET = string.ascii_lowercase + string.digits + " .,!?'-:;()"


class Vocabulary:
    """Bidirectional id mapping over controls, chars, and action bins."""

    def __init__(self, charset=DEFAULT_CHARSET):
        if len(set(charset)) != len(charset):
            raise ValueError("charset contains duplicate characters")
        self.charset = charset
        self._id = {}
        for tok in CONTROL_TOKENS:
            self._id[tok] = len(self._id)
        self.text_base = len(self._id)
        for ch in charset:
            self._id[ch] = len(self._id)
        self.action_base = len(self._id)
        self.size = self.action_base + N_ACTION_BINS
        self._tok = [None] * self.size
        for tok, i in self._id.items():
            self._tok[i] = tok
        for b in range(N_ACTION_BINS):
            self._tok[self.action_base + b] = f"<a{b}>"

    def __len__(self):
        return self.size

    def token_id(self, tok):
        return self._id[tok]

    def encode_text(self, text):
        try:
            return [self._id[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} outside vocabulary charset") from exc

    def action_token(self, bin_index):
        if not 0 <= bin_index < N_ACTION_BINS:
            raise ValueError(f"action bin {bin_index} outside [0, {N_ACTION_BINS})")
        return self.action_base + int(bin_index)

    def action_bin(self, token_id):
        if not self.is_action(token_id):
            raise ValueError(f"token {token_id} is not inside the action block")
        return int(token_id) - self.action_base

    def is_action(self, token_id):
        return self.action_base <= token_id < self.action_base + N_ACTION_BINS

    def is_control(self, token_id):
        return 0 <= token_id < self.text_base

    def is_text(self, token_id):
        return self.text_base <= token_id < self.action_base

    def decode(self, ids):
        """Human-readable rendering; control/action tokens shown symbolically."""
        return "".join(self._tok[int(i)] for i in ids)

    def to_config(self):
        return {"charset": self.charset}

    @classmethod
    def from_config(cls, cfg):
        return cls(charset=cfg["charset"])
