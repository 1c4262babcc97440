"""Tool-boundary fence that replays or forks calls re-issued after an agent restore."""

from .classifier import Verdict, VerdictKind, classify
from .effectlog import EffectLog, EffectRecord, Outcome
from .fence import Fence, FenceOutcome, OutcomeKind
from .policy import PolicySet, ToolPolicy, load_policies
from .protocol import Message, ToolCall, decode_message, encode_message

__version__ = "0.1.0"

__all__ = [
    "EffectLog",
    "EffectRecord",
    "Fence",
    "FenceOutcome",
    "Message",
    "Outcome",
    "OutcomeKind",
    "PolicySet",
    "ToolCall",
    "ToolPolicy",
    "Verdict",
    "VerdictKind",
    "classify",
    "decode_message",
    "encode_message",
    "load_policies",
]
