"""JSON-RPC 2.0 codec for the MCP tool protocol and tool-call extraction.

Only ``tools/call`` requests are interesting to the fence; everything else
is decoded just far enough to be forwarded untouched.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any, Protocol

from .errors import MalformedFrame, MissingToolName, ProtocolViolation

JSONRPC_VERSION = "2.0"
TOOLS_CALL = "tools/call"

_KNOWN_KEYS = frozenset({"jsonrpc", "id", "method", "params", "result", "error"})


class _Absent:
    """Marker for a key missing from the frame (distinct from JSON null)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False

    def __reduce__(self):
        return (_Absent, ())


ABSENT: Any = _Absent()


class MessageKind(str, enum.Enum):
    REQUEST = "Request"
    RESPONSE = "Response"
    NOTIFICATION = "Notification"


@dataclass
class Message:
    kind: MessageKind
    id: Any = ABSENT
    method: Any = ABSENT
    params: Any = ABSENT
    result: Any = ABSENT
    error: Any = ABSENT
    jsonrpc: Any = JSONRPC_VERSION
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def request(cls, id: Any, method: str, params: Any = ABSENT) -> "Message":
        return cls(MessageKind.REQUEST, id=id, method=method, params=params)

    @classmethod
    def notification(cls, method: str, params: Any = ABSENT) -> "Message":
        return cls(MessageKind.NOTIFICATION, method=method, params=params)

    @classmethod
    def response(cls, id: Any, result: Any) -> "Message":
        return cls(MessageKind.RESPONSE, id=id, result=result)

    @classmethod
    def error_response(cls, id: Any, code: int, message: str, data: Any = ABSENT) -> "Message":
        err: dict[str, Any] = {"code": code, "message": message}
        if data is not ABSENT:
            err["data"] = data
        return cls(MessageKind.RESPONSE, id=id, error=err)

    @property
    def is_error(self) -> bool:
        return self.kind is MessageKind.RESPONSE and self.error is not ABSENT

    def validate(self) -> None:
        if self.kind in (MessageKind.REQUEST, MessageKind.NOTIFICATION):
            if not isinstance(self.method, str):
                raise ProtocolViolation(f"{self.kind.value} requires a string method")
            if self.result is not ABSENT or self.error is not ABSENT:
                raise ProtocolViolation(f"{self.kind.value} must not carry result or error")
        if self.kind is MessageKind.NOTIFICATION and self.id is not ABSENT:
            raise ProtocolViolation("Notification must not carry an id")
        if self.kind is MessageKind.REQUEST:
            if self.id is ABSENT:
                raise ProtocolViolation("Request requires an id")
            _check_id(self.id)
        if self.kind is MessageKind.RESPONSE:
            if self.id is ABSENT:
                raise ProtocolViolation("Response requires an id")
            if self.method is not ABSENT or self.params is not ABSENT:
                raise ProtocolViolation("Response must not carry method or params")
            if (self.result is ABSENT) == (self.error is ABSENT):
                raise ProtocolViolation("Response must carry exactly one of result/error")
            if self.error is not ABSENT:
                _check_error(self.error)
        if self.params is not ABSENT and not isinstance(self.params, (dict, list)):
            raise ProtocolViolation("params must be an object or array")


def _check_id(value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (str, int, float, type(None))):
        raise ProtocolViolation(f"invalid id {value!r}")


def _check_error(err: Any) -> None:
    if not isinstance(err, dict):
        raise ProtocolViolation("error must be an object")
    code = err.get("code")
    if isinstance(code, bool) or not isinstance(code, int):
        raise ProtocolViolation("error.code must be an integer")
    if not isinstance(err.get("message"), str):
        raise ProtocolViolation("error.message must be a string")


def _reject_duplicates(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise ProtocolViolation(f"duplicate key {key!r}")
        out[key] = value
    return out


def _reject_constant(name: str) -> Any:
    raise MalformedFrame(f"non-finite number {name} is not valid JSON")


def canonical_json(value: Any) -> bytes:
    """Serialize with sorted keys and no insignificant whitespace."""
    return json.dumps(
        value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def parse_json(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedFrame(f"frame is not valid UTF-8: {exc}") from None
    try:
        return json.loads(
            data, object_pairs_hook=_reject_duplicates, parse_constant=_reject_constant
        )
    except json.JSONDecodeError as exc:
        raise MalformedFrame(f"frame is not valid JSON: {exc}") from None


def decode_message(data: bytes | str) -> Message:
    doc = parse_json(data)
    if isinstance(doc, list):
        raise ProtocolViolation("batch frames are not supported")
    if not isinstance(doc, dict):
        raise ProtocolViolation("frame must be a JSON object")

    extra = {k: v for k, v in doc.items() if k not in _KNOWN_KEYS}
    fields = {k: doc[k] if k in doc else ABSENT for k in ("id", "method", "params", "result", "error")}
    if "method" in doc:
        kind = MessageKind.REQUEST if "id" in doc else MessageKind.NOTIFICATION
    else:
        kind = MessageKind.RESPONSE
    msg = Message(kind, jsonrpc=doc.get("jsonrpc", ABSENT), extra=extra, **fields)
    msg.validate()
    return msg


def message_to_dict(msg: Message) -> dict[str, Any]:
    doc: dict[str, Any] = dict(msg.extra)
    if msg.jsonrpc is not ABSENT:
        doc["jsonrpc"] = msg.jsonrpc
    for key in ("id", "method", "params", "result", "error"):
        value = getattr(msg, key)
        if value is not ABSENT:
            doc[key] = value
    return doc


def encode_message(msg: Message) -> bytes:
    return canonical_json(message_to_dict(msg))


# -- tool calls ---------------------------------------------------------------


class SessionCounter(Protocol):
    session_id: str
    current_branch_id: str
    next_seq_index: int


@dataclass(frozen=True)
class ToolCall:
    session_id: str
    branch_id: str
    seq_index: int
    tool_name: str
    arguments: dict[str, Any]
    wire_id: Any


def extract_tool_call(msg: Message, session: SessionCounter) -> ToolCall | None:
    """Return the tool call carried by ``msg``, or None for pass-through traffic.

    Advances ``session.next_seq_index`` when a call is extracted.
    """
    if msg.kind is not MessageKind.REQUEST or msg.method != TOOLS_CALL:
        return None
    params = msg.params if isinstance(msg.params, dict) else {}
    name = params.get("name")
    if not isinstance(name, str) or not name:
        raise MissingToolName("tools/call params lack a tool name")
    arguments = params.get("arguments", {})
    if arguments is None:
        arguments = {}
    if not isinstance(arguments, dict):
        raise ProtocolViolation("tools/call arguments must be an object")
    call = ToolCall(
        session_id=session.session_id,
        branch_id=session.current_branch_id,
        seq_index=session.next_seq_index,
        tool_name=name,
        arguments=arguments,
        wire_id=msg.id,
    )
    session.next_seq_index += 1
    return call


def tool_call_request(id: Any, name: str, arguments: dict[str, Any]) -> Message:
    return Message.request(id, TOOLS_CALL, {"name": name, "arguments": arguments})


def tool_result(structured: Any, *, is_error: bool = False) -> dict[str, Any]:
    """Build an MCP tool result carrying both text and structured content."""
    text = canonical_json(structured).decode("utf-8")
    result: dict[str, Any] = {
        "content": [{"type": "text", "text": text}],
        "structuredContent": structured,
    }
    if is_error:
        result["isError"] = True
    return result


def result_is_error(result: Any) -> bool:
    return isinstance(result, dict) and result.get("isError") is True
