"""Scripted stand-in for an LLM agent.

The agent walks a fixed list of tool-call steps. Argument templates are
re-rendered every time a step runs, and rendering is where LLM
nondeterminism is modeled: reference ids are always fresh, free text may be
re-phrased, and after a restore an insider may redirect one intent field.
"""

from __future__ import annotations

import copy
import json
import logging
import random
import urllib.request
import uuid
from dataclasses import dataclass, field
from typing import Any, Callable, Protocol

from .. import paths
from ..errors import ScenarioMalformed
from ..fence import CREDENTIAL_REUSE, FORK_REQUIRED, SIDE_CHANNEL, Fence
from ..protocol import ABSENT, Message, canonical_json, decode_message, encode_message, tool_call_request

logger = logging.getLogger(__name__)

SYNONYMS: dict[str, list[str]] = {
    "payment": ["payment", "remittance", "settlement"],
    "invoice": ["invoice", "bill", "statement"],
    "for": ["for", "covering", "re"],
    "monthly": ["monthly", "recurring"],
    "deletion": ["deletion", "erasure", "removal"],
    "request": ["request", "petition", "ask"],
    "customer": ["customer", "client"],
}


@dataclass
class ResynthesisModel:
    """How a re-generated call differs from the previous generation of the same step."""

    fresh_reference_ids: bool = True
    text_jitter: float = 0.0
    intent_mutation: dict[str, Any] | None = None
    seed: int = 0
    _rng: random.Random = field(init=False, repr=False)
    _issued: set[str] = field(init=False, repr=False, default_factory=set)
    _sticky: dict[str, str] = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)
        if self.intent_mutation is not None and "path" not in self.intent_mutation:
            raise ScenarioMalformed("intent_mutation needs a 'path'")

    @classmethod
    def from_dict(cls, doc: dict[str, Any] | None, seed: int) -> "ResynthesisModel":
        doc = dict(doc or {})
        return cls(
            fresh_reference_ids=bool(doc.get("fresh_reference_ids", True)),
            text_jitter=float(doc.get("text_jitter", 0.0)),
            intent_mutation=doc.get("intent_mutation"),
            seed=seed,
        )

    def reference_id(self, slot: str) -> str:
        if not self.fresh_reference_ids and slot in self._sticky:
            return self._sticky[slot]
        while True:
            ref = str(uuid.UUID(int=self._rng.getrandbits(128), version=4))
            if ref not in self._issued:
                break
        self._issued.add(ref)
        self._sticky[slot] = ref
        return ref

    def rephrase(self, text: str) -> str:
        words = []
        for word in text.split(" "):
            options = SYNONYMS.get(word.lower())
            if options and self._rng.random() < self.text_jitter:
                word = self._rng.choice(options)
            words.append(word)
        return " ".join(words)

    def render(self, tool: str, template: Any, variables: dict[str, Any], post_restore: bool) -> Any:
        args = self._render(template, variables)
        mut = self.intent_mutation
        if post_restore and mut and mut.get("tool", tool) == tool and "value" in mut:
            args = paths.set_path(args, mut["path"], mut["value"])
        return args

    def _render(self, node: Any, variables: dict[str, Any]) -> Any:
        if isinstance(node, dict):
            if len(node) == 1:
                (key, value), = node.items()
                if key == "$uuid":
                    return self.reference_id(str(value))
                if key == "$text":
                    return self.rephrase(str(value))
                if key == "$var":
                    name, _, rest = str(value).partition(".")
                    if name not in variables:
                        raise ScenarioMalformed(f"step refers to unbound variable {name!r}")
                    return paths.get(variables[name], rest) if rest else variables[name]
            return {k: self._render(v, variables) for k, v in node.items()}
        if isinstance(node, list):
            return [self._render(v, variables) for v in node]
        return node


@dataclass
class Step:
    tool: str
    upstream: str
    args: dict[str, Any]
    bind: str | None = None

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "Step":
        try:
            return cls(doc["tool"], doc["upstream"], dict(doc.get("args", {})), doc.get("bind"))
        except (KeyError, TypeError) as exc:
            raise ScenarioMalformed(f"bad step {doc!r}: {exc}") from None


# -- channels ----------------------------------------------------------------------


class Channel(Protocol):
    def send(self, upstream: str, msg: Message) -> Message: ...


class DirectChannel:
    """No fence: frames go straight to the mock servers."""

    def __init__(self, servers: dict[str, Any]):
        self.servers = servers

    def send(self, upstream: str, msg: Message) -> Message:
        return decode_message(self.servers[upstream].handle(encode_message(msg)))


class FenceChannel:
    def __init__(self, fence: Fence, session_id: str):
        self.fence = fence
        self.session_id = session_id

    def send(self, upstream: str, msg: Message) -> Message:
        return decode_message(self.fence.handle_message(self.session_id, encode_message(msg), upstream=upstream))


class HttpChannel:
    """Agent side of the proxy's HTTP data path."""

    def __init__(self, base_url: str, session_id: str, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.session_id = session_id
        self.timeout = timeout

    def send(self, upstream: str, msg: Message) -> Message:
        req = urllib.request.Request(
            f"{self.base_url}/{upstream}",
            data=encode_message(msg),
            method="POST",
            headers={"Content-Type": "application/json", "Mcp-Session-Id": self.session_id},
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return decode_message(resp.read())


class Control(Protocol):
    def register_restore(self, session_id: str, checkpoint_seq: int) -> Any: ...

    def approve_fork(self, session_id: str, fork_token: str, new_branch_id: str) -> Any: ...


# -- agent ------------------------------------------------------------------------


class AgentCrash(Exception):
    """The agent could not make sense of a tool reply."""


@dataclass
class AgentState:
    step: int = 0
    tool_calls: int = 0
    wire_id: int = 0
    variables: dict[str, Any] = field(default_factory=dict)


@dataclass
class Transcript:
    session_id: str
    events: list[dict[str, Any]] = field(default_factory=list)
    status: str = "running"
    restores: int = 0
    rollbacks: int = 0
    forks: int = 0

    def add(self, **event: Any) -> None:
        self.events.append(event)

    def outcomes(self) -> list[str]:
        return [e["outcome"] for e in self.events if e.get("kind") == "call"]


def parse_tool_result(result: Any) -> Any:
    """Structured content of a tool result; AgentCrash when there is none to be had."""
    if not isinstance(result, dict):
        raise AgentCrash(f"tool result is not an object: {result!r}")
    if "structuredContent" in result:
        return result["structuredContent"]
    try:
        text = result["content"][0]["text"]
        return json.loads(text)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise AgentCrash(f"unparseable tool result: {exc}") from None


ForkHandler = Callable[[str, str, dict[str, Any]], "str | None"]


class ScriptedAgent:
    def __init__(
        self,
        steps: list[Step],
        channel: Channel,
        resynth: ResynthesisModel,
        *,
        session_id: str,
        control: Control | None = None,
        checkpoint_step: int | None = None,
        crash_restore: bool = True,
        signal_restore: bool = True,
        rollback: dict[str, Any] | None = None,
        on_fork: str | ForkHandler = "abort",
        max_restores: int = 50,
    ):
        self.steps = steps
        self.channel = channel
        self.resynth = resynth
        self.session_id = session_id
        self.control = control
        self.checkpoint_step = checkpoint_step
        self.crash_restore = crash_restore
        self.signal_restore = signal_restore
        self.rollback = rollback
        self.on_fork = on_fork
        self.max_restores = max_restores

    def _restore(self, checkpoint: AgentState) -> AgentState:
        state = copy.deepcopy(checkpoint)
        if self.control is not None and self.signal_restore:
            self.control.register_restore(self.session_id, state.tool_calls)
        return state

    def run(self) -> Transcript:
        tr = Transcript(self.session_id)
        state = AgentState()
        checkpoint: AgentState | None = None
        post_restore = False
        while state.step < len(self.steps):
            if self.checkpoint_step is not None and state.step == self.checkpoint_step and checkpoint is None:
                checkpoint = copy.deepcopy(state)
                tr.add(kind="checkpoint", step=state.step, seq=state.tool_calls)
            step = self.steps[state.step]
            args = self.resynth.render(step.tool, step.args, state.variables, post_restore)
            state.wire_id += 1
            reply = self.channel.send(step.upstream, tool_call_request(state.wire_id, step.tool, args))
            event = {"kind": "call", "step": state.step, "seq": state.tool_calls, "tool": step.tool, "args": args}

            if reply.error is not ABSENT:
                code = reply.error.get("code")
                data = (reply.error.get("data") or {}).get(SIDE_CHANNEL, {})
                if code == FORK_REQUIRED:
                    tr.add(**event, outcome="BlockedForkRequired", detail=data)
                    new_branch = self._fork(tr, data)
                    if new_branch is None:
                        tr.status = "aborted:fork-required"
                        return tr
                    continue
                if code == CREDENTIAL_REUSE:
                    tr.add(**event, outcome="BlockedCredentialReuse", detail=data)
                    tr.status = "aborted:credential-reuse"
                    return tr
                tr.add(**event, outcome="Error", detail=reply.error)
                tr.status = "aborted:error"
                return tr

            side = reply.extra.get(SIDE_CHANNEL, {})
            outcome = side.get("outcome", "Forwarded")
            if outcome == "Replayed":
                event["received"] = canonical_json({"result": reply.result}).decode("utf-8")
            state.tool_calls += 1
            if isinstance(reply.result, dict) and reply.result.get("isError"):
                tr.add(**event, outcome=outcome, tool_error=reply.result.get("structuredContent"))
                tr.status = "aborted:tool-error"
                return tr
            try:
                value = parse_tool_result(reply.result)
            except AgentCrash as exc:
                tr.add(**event, outcome=outcome, crash=str(exc))
                if not self.crash_restore or checkpoint is None or tr.restores >= self.max_restores:
                    tr.status = "crashed"
                    return tr
                state = self._restore(checkpoint)
                tr.restores += 1
                post_restore = True
                tr.add(kind="restore", reason="crash", seq=state.tool_calls)
                continue
            tr.add(**event, outcome=outcome, result=value, record_id=side.get("record_id"))
            if step.bind:
                state.variables[step.bind] = value
            finished = state.step
            state.step += 1

            rb = self.rollback
            if rb and finished == rb.get("after_step") and tr.rollbacks < int(rb.get("count", 1)):
                if checkpoint is None:
                    raise ScenarioMalformed("deliberate rollback needs a checkpoint")
                state = self._restore(checkpoint)
                tr.rollbacks += 1
                post_restore = True
                tr.add(kind="restore", reason="rollback", seq=state.tool_calls)
        tr.status = "completed"
        return tr

    def _fork(self, tr: Transcript, data: dict[str, Any]) -> str | None:
        token = data.get("fork_token")
        if token is None or self.on_fork == "abort":
            return None
        tr.forks += 1
        branch = f"{self.session_id}/fork-{tr.forks}"
        if callable(self.on_fork):
            branch = self.on_fork(self.session_id, token, data)
            if branch is None:
                return None
        elif self.on_fork == "approve":
            if self.control is None:
                return None
            self.control.approve_fork(self.session_id, token, branch)
        else:
            raise ScenarioMalformed(f"unknown on_fork policy {self.on_fork!r}")
        tr.add(kind="fork", branch=branch)
        return branch
