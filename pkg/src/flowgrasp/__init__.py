"""flowgrasp: a desk-scale vision-language-action stack.

Tiny decoder-only VLM over multi-view images, text, and discrete action
tokens; a flow-matching expert that turns the VLM's KV cache into continuous
action chunks; a data pipeline over episodic JSONL; and a deterministic 2D
pick-and-place environment that closes the loop.
"""

__version__ = "0.1.0"
