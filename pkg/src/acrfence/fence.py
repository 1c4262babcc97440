"""Session-aware enforcement at the tool boundary.

Irreversible calls are journaled before they are forwarded. After a restore,
every irreversible call up to the restore frontier is matched against the
journal: equivalent calls get the recorded response back without touching
the upstream, divergent ones are held until an operator approves a fork, and
calls presenting an already-consumed credential are refused outright.
"""

from __future__ import annotations

import enum
import hmac
import logging
import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable

from .classifier import AnalyzerEndpoint, Verdict, VerdictKind, analyze_external, classify
from .effectlog import EffectLog, EffectRecord, Outcome
from .errors import (
    AcrFenceError,
    BranchIdInUse,
    FutureCheckpoint,
    MalformedFrame,
    MissingToolName,
    NoPendingFork,
    PolicyMissing,
    ProtocolViolation,
    StorageFailure,
    TokenMismatch,
    UnknownSession,
    UpstreamFailure,
)
from .policy import PolicySet, ToolPolicy, extract_credentials
from .protocol import (
    ABSENT,
    TOOLS_CALL,
    Message,
    MessageKind,
    ToolCall,
    canonical_json,
    decode_message,
    encode_message,
    extract_tool_call,
    message_to_dict,
)
from .transport import Upstream

logger = logging.getLogger(__name__)

# JSON-RPC error codes for fence refusals (implementation-defined range).
FORK_REQUIRED = -32040
CREDENTIAL_REUSE = -32041
JOURNAL_FAILURE = -32042
UPSTREAM_FAILURE = -32043
INVALID_REQUEST = -32600
PARSE_ERROR = -32700

SIDE_CHANNEL = "acrfence"


class OutcomeKind(str, enum.Enum):
    FORWARDED = "Forwarded"
    REPLAYED = "Replayed"
    BLOCKED_FORK_REQUIRED = "BlockedForkRequired"
    BLOCKED_CREDENTIAL_REUSE = "BlockedCredentialReuse"
    ERRORED = "Errored"


@dataclass
class FenceOutcome:
    kind: OutcomeKind
    response: Message
    record_id: int | None = None
    verdict: Verdict | None = None
    seq_index: int | None = None
    tool_name: str | None = None
    raw: bytes | None = None

    @property
    def blocked(self) -> bool:
        return self.kind in (OutcomeKind.BLOCKED_FORK_REQUIRED, OutcomeKind.BLOCKED_CREDENTIAL_REUSE)

    def frame(self) -> bytes:
        return self.raw if self.raw is not None else encode_message(self.response)


@dataclass(frozen=True)
class BranchLink:
    branch_id: str
    parent: str | None
    forked_from_seq: int

    def to_dict(self) -> dict[str, Any]:
        return {"branch_id": self.branch_id, "parent": self.parent, "forked_from_seq": self.forked_from_seq}


@dataclass
class PendingFork:
    token: str
    call: ToolCall
    verdict: Verdict | None
    prior: EffectRecord | None
    rationale: str


@dataclass
class SessionState:
    session_id: str
    current_branch_id: str
    branch_lineage: list[BranchLink]
    next_seq_index: int = 0
    restore_frontier: int | None = None
    pending_fork: PendingFork | None = None
    high_water: int = 0
    wire_seq: dict[Any, int] = field(default_factory=dict)
    last_wire_id: int | None = None
    outcomes: list[dict[str, Any]] = field(default_factory=list)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def link(self, branch_id: str) -> BranchLink:
        for link in self.branch_lineage:
            if link.branch_id == branch_id:
                return link
        raise KeyError(branch_id)

    def chain(self) -> list[BranchLink]:
        """Current branch back to the root."""
        out = []
        link: BranchLink | None = self.link(self.current_branch_id)
        while link is not None:
            out.append(link)
            link = self.link(link.parent) if link.parent is not None else None
        return out

    def ancestry_for(self, seq_index: int) -> list[str]:
        """Branches that own position ``seq_index`` on the current lineage, most derived first."""
        out = []
        for link in self.chain():
            out.append(link.branch_id)
            if seq_index >= link.forked_from_seq:
                break
        return out

    def describe(self) -> dict[str, Any]:
        pending = None
        if self.pending_fork is not None:
            pf = self.pending_fork
            pending = {
                "seq_index": pf.call.seq_index,
                "tool_name": pf.call.tool_name,
                "rationale": pf.rationale,
                "verdict": pf.verdict.to_dict() if pf.verdict else None,
                "prior_record": pf.prior.record_id if pf.prior else None,
            }
        return {
            "session_id": self.session_id,
            "current_branch_id": self.current_branch_id,
            "branch_lineage": [link.to_dict() for link in self.branch_lineage],
            "next_seq_index": self.next_seq_index,
            "restore_frontier": self.restore_frontier,
            "pending_fork": pending,
        }


def record_summary(record: EffectRecord, policy: ToolPolicy | None = None) -> dict[str, Any]:
    """Prior-call summary embedded in refusals: id, tool, and the intent-bearing arguments."""
    args = record.arguments
    if policy is not None:
        args = {k: v for k, v in args.items() if policy.treats_as_intent(k)}
    return {
        "record_id": record.record_id,
        "tool_name": record.tool_name,
        "branch_id": record.branch_id,
        "seq_index": record.seq_index,
        "outcome": record.outcome.value,
        "intent": args,
    }


def response_payload(msg: Message) -> dict[str, Any]:
    """The part of a response that gets journaled and replayed: ``{"result": ..}`` or ``{"error": ..}``."""
    if msg.error is not ABSENT:
        return {"error": msg.error}
    return {"result": msg.result}


class Fence:
    def __init__(
        self,
        log: EffectLog,
        policies: PolicySet,
        upstreams: dict[str, Upstream],
        *,
        analyzer: AnalyzerEndpoint | None = None,
        analyzer_post: Callable | None = None,
        clock: Callable[[], float] = time.time,
        host_id: str | None = None,
        replay_enabled: bool = True,
        detect_implicit_restore: bool = True,
        initial_branch: str = "b0",
    ):
        self.log = log
        self.policies = policies
        self.upstreams = dict(upstreams)
        self.analyzer = analyzer
        self.analyzer_post = analyzer_post
        self.clock = clock
        self.host_id = host_id or socket.gethostname()
        self.replay_enabled = replay_enabled
        self.detect_implicit_restore = detect_implicit_restore
        self.initial_branch = initial_branch
        self._sessions: dict[str, SessionState] = {}
        self._sessions_lock = threading.Lock()

    # -- sessions ---------------------------------------------------------------

    def open_session(self, session_id: str) -> SessionState:
        with self._sessions_lock:
            session = self._sessions.get(session_id)
            if session is None:
                session = self._rebuild(session_id)
                self._sessions[session_id] = session
            return session

    def session(self, session_id: str) -> SessionState:
        """A live session, or one the journal knows about (e.g. after a restart)."""
        session = self._sessions.get(session_id)
        if session is not None:
            return session
        if self.log.records(session_id) or self.log.forks(session_id):
            return self.open_session(session_id)
        raise UnknownSession(f"unknown session {session_id!r}")

    def _rebuild(self, session_id: str) -> SessionState:
        """Recover lineage for a session the journal already knows about (proxy restart)."""
        records = self.log.records(session_id)
        forks = self.log.forks(session_id)
        root = records[0].branch_id if records else self.initial_branch
        if forks:
            root = forks[0].parent_branch_id
        lineage = [BranchLink(root, None, 0)]
        for f in forks:
            lineage.append(BranchLink(f.branch_id, f.parent_branch_id, f.forked_from_seq))
        current = lineage[-1].branch_id
        session = SessionState(session_id, current, lineage)
        top = self._max_journaled(session)
        if top is not None:
            session.next_seq_index = session.high_water = top + 1
            logger.info("session %s rebuilt from journal: branch %s, next seq %d", session_id, current, top + 1)
        return session

    def _max_journaled(self, session: SessionState) -> int | None:
        best = None
        limit = None
        for link in session.chain():
            for rec in self.log.records(session.session_id, branch_id=link.branch_id):
                if limit is None or rec.seq_index < limit:
                    best = rec.seq_index if best is None else max(best, rec.seq_index)
            limit = link.forked_from_seq if limit is None else min(limit, link.forked_from_seq)
        return best

    # -- control surface ----------------------------------------------------------

    def register_restore(self, session_id: str, checkpoint_seq: int) -> None:
        session = self.session(session_id)
        with session.lock:
            self._restore(session, checkpoint_seq)

    def _restore(self, session: SessionState, checkpoint_seq: int) -> None:
        if checkpoint_seq < 0:
            raise FutureCheckpoint("checkpoint position must be non-negative")
        reached = max(session.high_water, session.next_seq_index)
        if checkpoint_seq > reached:
            raise FutureCheckpoint(
                f"checkpoint {checkpoint_seq} is beyond anything session {session.session_id!r} reached ({reached})"
            )
        top = self._max_journaled(session)
        session.high_water = reached
        session.next_seq_index = checkpoint_seq
        session.restore_frontier = top if top is not None and top >= checkpoint_seq else None
        session.pending_fork = None
        session.wire_seq = {w: s for w, s in session.wire_seq.items() if s < checkpoint_seq}
        ints = [w for w in session.wire_seq if isinstance(w, int) and not isinstance(w, bool)]
        session.last_wire_id = max(ints) if ints else None
        logger.info(
            "session %s restored to seq %d (frontier %s)", session.session_id, checkpoint_seq, session.restore_frontier
        )

    def approve_fork(self, session_id: str, fork_token: str, new_branch_id: str) -> list[dict[str, Any]]:
        session = self.session(session_id)
        with session.lock:
            pending = session.pending_fork
            if pending is None:
                raise NoPendingFork(f"session {session_id!r} has no blocked call awaiting a fork")
            if not hmac.compare_digest(pending.token.encode(), str(fork_token).encode()):
                raise TokenMismatch("fork token does not match the blocked call")
            used = {link.branch_id for link in session.branch_lineage}
            used |= {r.branch_id for r in self.log.records(session_id)}
            if not new_branch_id or new_branch_id in used:
                raise BranchIdInUse(f"branch id {new_branch_id!r} is already used in session {session_id!r}")
            fork_seq = session.next_seq_index
            self.log.record_fork(session_id, new_branch_id, session.current_branch_id, fork_seq)
            session.branch_lineage.append(BranchLink(new_branch_id, session.current_branch_id, fork_seq))
            session.current_branch_id = new_branch_id
            session.restore_frontier = None
            session.pending_fork = None
            logger.info("session %s forked to %s at seq %d", session_id, new_branch_id, fork_seq)
            return [link.to_dict() for link in session.branch_lineage]

    def query_log(self, session_id: str | None = None, branch_id: str | None = None, tool_name: str | None = None):
        return [r.to_dict() for r in self.log.records(session_id, branch_id, tool_name)]

    def control(self, doc: dict[str, Any]) -> dict[str, Any]:
        """Dispatch one control-surface document; errors come back as ``ok: false``."""
        op = doc.get("op") if isinstance(doc, dict) else None
        try:
            if op == "register_restore":
                self.register_restore(str(doc["session_id"]), int(doc["checkpoint_seq"]))
                return {"ok": True, "session": self.session(str(doc["session_id"])).describe()}
            if op == "approve_fork":
                lineage = self.approve_fork(str(doc["session_id"]), str(doc["fork_token"]), str(doc["new_branch_id"]))
                return {"ok": True, "lineage": lineage}
            if op == "query_log":
                return {
                    "ok": True,
                    "records": self.query_log(doc.get("session_id"), doc.get("branch_id"), doc.get("tool_name")),
                }
            if op == "describe_session":
                return {"ok": True, "session": self.session(str(doc["session_id"])).describe()}
            return {"ok": False, "error": "UnknownOp", "message": f"unknown op {op!r}"}
        except KeyError as exc:
            return {"ok": False, "error": "BadRequest", "message": f"missing field {exc}"}
        except (ValueError, TypeError) as exc:
            return {"ok": False, "error": "BadRequest", "message": str(exc)}
        except AcrFenceError as exc:
            return {"ok": False, "error": type(exc).__name__, "message": str(exc)}

    # -- data path ----------------------------------------------------------------

    def _upstream(self, name: str | None) -> Upstream:
        if name is None:
            if len(self.upstreams) != 1:
                raise UpstreamFailure("several upstreams configured; the request must name one")
            return next(iter(self.upstreams.values()))
        try:
            return self.upstreams[name]
        except KeyError:
            raise UpstreamFailure(f"no upstream named {name!r}") from None

    def handle_message(self, session_id: str, frame: bytes, upstream: str | None = None) -> bytes | None:
        """Process one agent frame and return the frame to send back (None for notifications)."""
        try:
            msg = decode_message(frame)
        except MalformedFrame as exc:
            return encode_message(Message.error_response(None, PARSE_ERROR, str(exc)))
        except ProtocolViolation as exc:
            return encode_message(Message.error_response(None, INVALID_REQUEST, str(exc)))
        self.open_session(session_id)
        if msg.kind is MessageKind.REQUEST and msg.method == TOOLS_CALL:
            try:
                return self.handle_call(session_id, msg, upstream=upstream, raw=frame).frame()
            except MissingToolName as exc:
                return encode_message(Message.error_response(msg.id, -32602, str(exc)))
            except ProtocolViolation as exc:
                return encode_message(Message.error_response(msg.id, -32602, str(exc)))
        # Pass-through: bytes go upstream untouched and the reply comes back untouched.
        try:
            return self._upstream(upstream).send(frame)
        except UpstreamFailure as exc:
            if msg.kind is not MessageKind.REQUEST:
                logger.warning("dropping %s notification: %s", msg.method, exc)
                return None
            return encode_message(Message.error_response(msg.id, UPSTREAM_FAILURE, str(exc)))

    def handle_call(
        self, session_id: str, msg: Message, upstream: str | None = None, raw: bytes | None = None
    ) -> FenceOutcome:
        session = self.open_session(session_id)
        with session.lock:
            self._maybe_implicit_restore(session, msg)
            call = extract_tool_call(msg, session)
            if call is None:
                raise ProtocolViolation("handle_call expects a tools/call request")
            outcome = self._decide(session, call, msg, upstream, raw)
            if outcome.blocked or (outcome.kind is OutcomeKind.ERRORED and outcome.record_id is None):
                # Refused calls do not occupy a position; the agent re-issues at the same seq.
                session.next_seq_index = call.seq_index
            else:
                session.high_water = max(session.high_water, session.next_seq_index)
                if isinstance(msg.id, int) and not isinstance(msg.id, bool):
                    session.wire_seq[msg.id] = call.seq_index
                    session.last_wire_id = msg.id
            session.outcomes.append(
                {
                    "kind": outcome.kind.value,
                    "seq_index": call.seq_index,
                    "branch_id": call.branch_id,
                    "tool_name": call.tool_name,
                    "record_id": outcome.record_id,
                }
            )
            outcome.seq_index = call.seq_index
            outcome.tool_name = call.tool_name
            return outcome

    def _maybe_implicit_restore(self, session: SessionState, msg: Message) -> None:
        wid = msg.id
        if not self.detect_implicit_restore or not isinstance(wid, int) or isinstance(wid, bool):
            return
        if session.last_wire_id is None or wid > session.last_wire_id or wid not in session.wire_seq:
            return
        target = session.wire_seq[wid]
        logger.warning(
            "session %s: request id %d regressed (last %d); treating as restore to seq %d",
            session.session_id, wid, session.last_wire_id, target,
        )
        self._restore(session, target)

    def _decide(
        self, session: SessionState, call: ToolCall, msg: Message, upstream: str | None, raw: bytes | None
    ) -> FenceOutcome:
        if session.pending_fork is not None:
            pf = session.pending_fork
            return self._block_fork(
                session, call, msg, pf.verdict, pf.prior, None,
                f"session has a blocked call at seq {pf.call.seq_index} awaiting fork approval",
                reuse_pending=True,
            )
        try:
            policy = self.policies.get(call.tool_name)
        except PolicyMissing as exc:
            return self._block_fork(session, call, msg, None, None, None, f"{exc}; failing closed", mint=False)

        consumed = []
        for path, token in extract_credentials(call.arguments, policy):
            hit = self.log.consumption(token)
            if hit is not None:
                consumed.append((path, hit))
        if consumed:
            return self._block_credential(session, call, msg, policy, consumed)

        if not policy.irreversible:
            outcome = self._forward_reversible(call, msg, upstream, raw)
            self._advance_frontier(session, call.seq_index)
            return outcome

        frontier = session.restore_frontier
        if frontier is not None and call.seq_index <= frontier:
            if not self.replay_enabled:
                return self._block_fork(
                    session, call, msg, None, None, policy,
                    f"replay disabled; irreversible call at seq {call.seq_index} inside the restored region",
                )
            return self._restore_path(session, call, msg, policy)
        session.restore_frontier = None
        return self._forward_irreversible(session, call, msg, policy, upstream, raw)

    def _advance_frontier(self, session: SessionState, seq_index: int) -> None:
        if session.restore_frontier is not None and seq_index >= session.restore_frontier:
            session.restore_frontier = None

    def _restore_path(self, session: SessionState, call: ToolCall, msg: Message, policy: ToolPolicy) -> FenceOutcome:
        ancestry = session.ancestry_for(call.seq_index)
        prior = self.log.find_candidate(call.session_id, ancestry, call.seq_index, call.tool_name)
        if prior is None:
            prior = self.log.find_at_position(call.session_id, ancestry, call.seq_index)
        if self.analyzer is not None and prior is not None:
            kwargs = {"post": self.analyzer_post} if self.analyzer_post is not None else {}
            verdict = analyze_external(call, prior, policy, self.analyzer, self.log.is_consumed, **kwargs)
        else:
            verdict = classify(call, prior, policy, self.log.is_consumed)

        if verdict.kind is VerdictKind.REPLAY_EQUIVALENT and prior is not None:
            if verdict.fallback:
                return self._block_fork(session, call, msg, verdict, prior, policy, "classifier fell back; failing closed")
            if prior.outcome is Outcome.UNKNOWN:
                return self._block_fork(
                    session, call, msg, verdict, prior, policy,
                    f"journaled call {prior.record_id} has unknown outcome; operator must resolve",
                )
            self._advance_frontier(session, call.seq_index)
            return self._replay(call, msg, prior, verdict)
        if verdict.kind is VerdictKind.FRESH_CALL:
            return self._block_fork(
                session, call, msg, verdict, None, policy,
                f"new irreversible call at seq {call.seq_index}, inside the restored region (frontier {session.restore_frontier})",
            )
        if verdict.kind is VerdictKind.CREDENTIAL_REUSE:
            hits = []
            for path, token in extract_credentials(call.arguments, policy):
                hit = self.log.consumption(token)
                if hit is not None:
                    hits.append((path, hit))
            return self._block_credential(session, call, msg, policy, hits)
        return self._block_fork(session, call, msg, verdict, prior, policy, verdict.rationale)

    def _replay(self, call: ToolCall, msg: Message, prior: EffectRecord, verdict: Verdict) -> FenceOutcome:
        payload = prior.response or {}
        reply = Message(MessageKind.RESPONSE, id=msg.id)
        if "error" in payload:
            reply.error = payload["error"]
        else:
            reply.result = payload.get("result")
        reply.extra[SIDE_CHANNEL] = {
            "outcome": OutcomeKind.REPLAYED.value,
            "record_id": prior.record_id,
            "recorded_at": prior.env_context.get("timestamp"),
            "stale": True,
        }
        logger.info("replayed record %d for %s seq %d", prior.record_id, call.tool_name, call.seq_index)
        return FenceOutcome(OutcomeKind.REPLAYED, reply, record_id=prior.record_id, verdict=verdict)

    def _block_fork(
        self,
        session: SessionState,
        call: ToolCall,
        msg: Message,
        verdict: Verdict | None,
        prior: EffectRecord | None,
        policy: ToolPolicy | None,
        rationale: str,
        *,
        mint: bool = True,
        reuse_pending: bool = False,
    ) -> FenceOutcome:
        token = None
        if reuse_pending:
            token = session.pending_fork.token
        elif mint:
            token = secrets.token_hex(16)
            session.pending_fork = PendingFork(token, call, verdict, prior, rationale)
        data = {
            "outcome": OutcomeKind.BLOCKED_FORK_REQUIRED.value,
            "verdict": verdict.to_dict() if verdict else None,
            "prior_record": record_summary(prior, policy) if prior else None,
            "fork_token": token,
            "seq_index": call.seq_index,
            "rationale": rationale,
        }
        if not reuse_pending:
            self.log.record_blocked(
                outcome=OutcomeKind.BLOCKED_FORK_REQUIRED.value,
                session_id=call.session_id,
                branch_id=call.branch_id,
                seq_index=call.seq_index,
                tool_name=call.tool_name,
                prior_record=prior.record_id if prior else None,
                reused_digests=[],
                rationale=rationale,
            )
        logger.warning("blocked %s seq %d: %s", call.tool_name, call.seq_index, rationale)
        reply = Message.error_response(msg.id, FORK_REQUIRED, f"fork required: {rationale}", {SIDE_CHANNEL: data})
        return FenceOutcome(OutcomeKind.BLOCKED_FORK_REQUIRED, reply, verdict=verdict)

    def _block_credential(
        self, session: SessionState, call: ToolCall, msg: Message, policy: ToolPolicy, hits: list
    ) -> FenceOutcome:
        fields = [path for path, _ in hits]
        verdict = Verdict(
            VerdictKind.CREDENTIAL_REUSE,
            reused_tokens=fields,
            rationale=f"consumed credential presented in {', '.join(fields)}",
        )
        consumers = []
        for path, hit in hits:
            entry = {"source_field": path, "digest": hit.digest, "consumed_by": hit.consumed_by}
            try:
                entry["record"] = record_summary(self.log.get(hit.consumed_by), self.policies.policies.get(
                    self.log.get(hit.consumed_by).tool_name))
            except AcrFenceError:
                pass
            consumers.append(entry)
        self.log.record_blocked(
            outcome=OutcomeKind.BLOCKED_CREDENTIAL_REUSE.value,
            session_id=call.session_id,
            branch_id=call.branch_id,
            seq_index=call.seq_index,
            tool_name=call.tool_name,
            prior_record=hits[0][1].consumed_by,
            reused_digests=[hit.digest for _, hit in hits],
            arguments=_intent_view(call.arguments, policy),
            rationale=verdict.rationale,
        )
        data = {
            "outcome": OutcomeKind.BLOCKED_CREDENTIAL_REUSE.value,
            "verdict": verdict.to_dict(),
            "consumed_by": consumers,
            "seq_index": call.seq_index,
        }
        logger.warning("blocked %s seq %d: credential reuse (%s)", call.tool_name, call.seq_index, fields)
        reply = Message.error_response(
            msg.id,
            CREDENTIAL_REUSE,
            f"credential already consumed by record {hits[0][1].consumed_by}; call not attempted",
            {SIDE_CHANNEL: data},
        )
        return FenceOutcome(OutcomeKind.BLOCKED_CREDENTIAL_REUSE, reply, verdict=verdict)

    def _send(self, msg: Message, upstream: str | None, raw: bytes | None) -> tuple[Message, bytes]:
        frame = raw if raw is not None else encode_message(msg)
        reply_raw = self._upstream(upstream).send(frame)
        if reply_raw is None:
            raise UpstreamFailure("upstream sent no reply to a request")
        try:
            reply = decode_message(reply_raw)
        except (MalformedFrame, ProtocolViolation) as exc:
            raise UpstreamFailure(f"upstream reply unreadable: {exc}") from None
        if reply.kind is not MessageKind.RESPONSE:
            raise UpstreamFailure("upstream replied with a non-response")
        return reply, reply_raw

    def _forward_reversible(self, call: ToolCall, msg: Message, upstream: str | None, raw: bytes | None) -> FenceOutcome:
        try:
            reply, reply_raw = self._send(msg, upstream, raw)
        except UpstreamFailure as exc:
            err = Message.error_response(msg.id, UPSTREAM_FAILURE, str(exc))
            return FenceOutcome(OutcomeKind.ERRORED, err)
        return FenceOutcome(OutcomeKind.FORWARDED, reply, raw=reply_raw)

    def _forward_irreversible(
        self,
        session: SessionState,
        call: ToolCall,
        msg: Message,
        policy: ToolPolicy,
        upstream: str | None,
        raw: bytes | None,
    ) -> FenceOutcome:
        up_name = upstream if upstream is not None else (next(iter(self.upstreams)) if len(self.upstreams) == 1 else None)
        env = {"timestamp": self.clock(), "proxy_host": self.host_id, "upstream": up_name}
        link = session.link(session.current_branch_id)
        try:
            record_id = self.log.append_pending(call, policy, env, parent_branch_id=link.parent)
            creds = extract_credentials(call.arguments, policy)
            if creds:
                # Consumed before forwarding: a crash after the server accepts the
                # token must still leave it marked.
                self.log.mark_consumed([t for _, t in creds], record_id, [p for p, _ in creds])
        except StorageFailure as exc:
            logger.error("journal failure, not forwarding %s: %s", call.tool_name, exc)
            err = Message.error_response(msg.id, JOURNAL_FAILURE, f"effect journal unavailable: {exc}")
            return FenceOutcome(OutcomeKind.ERRORED, err)

        try:
            reply, reply_raw = self._send(msg, upstream, raw)
        except UpstreamFailure as exc:
            logger.error("upstream failure on record %d; outcome stays Unknown: %s", record_id, exc)
            err = Message.error_response(
                msg.id,
                UPSTREAM_FAILURE,
                f"upstream failed after journaling record {record_id}; outcome unknown, not retried: {exc}",
                {SIDE_CHANNEL: {"record_id": record_id, "outcome": Outcome.UNKNOWN.value}},
            )
            return FenceOutcome(OutcomeKind.ERRORED, err, record_id=record_id)

        failed = reply.error is not ABSENT or (isinstance(reply.result, dict) and reply.result.get("isError") is True)
        try:
            self.log.finalize(record_id, response_payload(reply), Outcome.FAILED if failed else Outcome.SUCCEEDED)
        except StorageFailure as exc:
            logger.error("could not finalize record %d: %s", record_id, exc)
        return FenceOutcome(OutcomeKind.FORWARDED, reply, record_id=record_id, raw=reply_raw)


def _intent_view(arguments: dict[str, Any], policy: ToolPolicy) -> dict[str, Any]:
    return {k: v for k, v in arguments.items() if policy.treats_as_intent(k) and not policy.is_credential(k)}


def replay_matches_journal(reply: Message, record: EffectRecord) -> bool:
    """True when a Replayed reply carries exactly the journaled response bytes."""
    doc = message_to_dict(reply)
    payload = {k: doc[k] for k in ("result", "error") if k in doc}
    return canonical_json(payload) == canonical_json(record.response)
