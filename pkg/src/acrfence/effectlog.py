"""Append-only journal of irreversible tool effects and consumed credentials.

The journal is a UTF-8 file with one canonical JSON document per line. Each
line has an ``entry`` discriminator:

``effect``
    a new EffectRecord, written (and fsynced) before the call is forwarded.
``finalize``
    the response and outcome for a record that was pending.
``consume``
    a credential digest attributed to the record that used it.
``fork``
    a branch created from an approved fork; lets a restarted proxy rebuild lineage.
``blocked``
    an attempt the fence refused, kept for the audit cross-reference.

Lines are never rewritten. The in-memory view folds ``finalize`` and
``consume`` lines into the record they reference.
"""

from __future__ import annotations

import enum
import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable

from .errors import AlreadyFinalized, DuplicateKey, NotFound, StorageFailure
from .policy import ToolPolicy, digest, redact
from .protocol import ToolCall, canonical_json, parse_json

logger = logging.getLogger(__name__)


class Outcome(str, enum.Enum):
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class EffectRecord:
    record_id: int
    session_id: str
    branch_id: str
    parent_branch_id: str | None
    seq_index: int
    tool_name: str
    arguments: dict[str, Any]
    env_context: dict[str, Any]
    response: Any = None
    outcome: Outcome = Outcome.UNKNOWN
    consumed_credentials: tuple[str, ...] = ()
    irreversible: bool = True

    @property
    def key(self) -> tuple[str, str, int]:
        return (self.session_id, self.branch_id, self.seq_index)

    def to_dict(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "session_id": self.session_id,
            "branch_id": self.branch_id,
            "parent_branch_id": self.parent_branch_id,
            "seq_index": self.seq_index,
            "tool_name": self.tool_name,
            "arguments": self.arguments,
            "env_context": self.env_context,
            "response": self.response,
            "outcome": self.outcome.value,
            "consumed_credentials": list(self.consumed_credentials),
            "irreversible": self.irreversible,
        }


@dataclass(frozen=True)
class CredentialDigest:
    digest: str
    source_field: str
    consumed_by: int
    consumed_at: float


@dataclass(frozen=True)
class ForkEntry:
    session_id: str
    branch_id: str
    parent_branch_id: str
    forked_from_seq: int


@dataclass
class _State:
    records: dict[int, EffectRecord] = field(default_factory=dict)
    by_key: dict[tuple[str, str, int], int] = field(default_factory=dict)
    consumed: dict[str, CredentialDigest] = field(default_factory=dict)
    forks: list[ForkEntry] = field(default_factory=list)
    blocked: list[dict[str, Any]] = field(default_factory=list)
    last_id: int = 0


class EffectLog:
    """Durable effect journal. ``path=None`` keeps everything in memory."""

    def __init__(
        self,
        path: str | Path | None = None,
        *,
        fsync: bool = True,
        clock: Callable[[], float] = time.time,
        readonly: bool = False,
    ):
        self.path = Path(path) if path is not None else None
        self.fsync = fsync
        self.clock = clock
        self.readonly = readonly
        self._lock = threading.RLock()
        self._state = _State()
        self._fh = None
        if self.path is not None:
            if readonly and not self.path.is_file():
                raise StorageFailure(f"journal {self.path} does not exist")
            self._load()
            if readonly:
                return
            try:
                self._fh = open(self.path, "ab")
            except OSError as exc:
                raise StorageFailure(f"cannot open journal {self.path}: {exc}") from None

    # -- persistence ------------------------------------------------------------

    def _load(self) -> None:
        assert self.path is not None
        if not self.path.exists():
            return
        try:
            raw = self.path.read_bytes()
        except OSError as exc:
            raise StorageFailure(f"cannot read journal {self.path}: {exc}") from None
        good_end = 0
        offset = 0
        lines = raw.split(b"\n")
        for i, line in enumerate(lines):
            is_last = i == len(lines) - 1
            end = offset + len(line) + (0 if is_last else 1)
            if line.strip():
                try:
                    doc = parse_json(line)
                except Exception:
                    if is_last:
                        # Torn write from a crash mid-append; drop it.
                        logger.warning("dropping torn journal tail in %s (%d bytes)", self.path, len(line))
                        break
                    raise StorageFailure(f"corrupt journal line {i + 1} in {self.path}") from None
                if is_last:
                    logger.warning("journal %s lacks a final newline; dropping last line", self.path)
                    break
                self._apply(doc)
            good_end = end
            offset = end
        if good_end < len(raw) and not self.readonly:
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)

    def _apply(self, doc: dict[str, Any]) -> None:
        st = self._state
        entry = doc.get("entry")
        if entry == "effect":
            rec = EffectRecord(
                record_id=doc["record_id"],
                session_id=doc["session_id"],
                branch_id=doc["branch_id"],
                parent_branch_id=doc.get("parent_branch_id"),
                seq_index=doc["seq_index"],
                tool_name=doc["tool_name"],
                arguments=doc["arguments"],
                env_context=doc.get("env_context", {}),
                response=doc.get("response"),
                outcome=Outcome(doc.get("outcome", "Unknown")),
                consumed_credentials=tuple(doc.get("consumed_credentials", ())),
                irreversible=doc.get("irreversible", True),
            )
            if rec.key in st.by_key:
                raise StorageFailure(f"journal repeats identity {rec.key}")
            st.records[rec.record_id] = rec
            st.by_key[rec.key] = rec.record_id
            st.last_id = max(st.last_id, rec.record_id)
        elif entry == "finalize":
            rec = st.records[doc["record_id"]]
            st.records[rec.record_id] = replace(rec, response=doc["response"], outcome=Outcome(doc["outcome"]))
        elif entry == "consume":
            cd = CredentialDigest(doc["digest"], doc["source_field"], doc["consumed_by"], doc["consumed_at"])
            st.consumed.setdefault(cd.digest, cd)
            rec = st.records.get(cd.consumed_by)
            if rec is not None and cd.digest not in rec.consumed_credentials:
                st.records[rec.record_id] = replace(
                    rec, consumed_credentials=rec.consumed_credentials + (cd.digest,)
                )
        elif entry == "fork":
            st.forks.append(
                ForkEntry(doc["session_id"], doc["branch_id"], doc["parent_branch_id"], doc["forked_from_seq"])
            )
        elif entry == "blocked":
            st.blocked.append({k: v for k, v in doc.items() if k != "entry"})
        else:
            raise StorageFailure(f"unknown journal entry type {entry!r}")

    def _write(self, doc: dict[str, Any]) -> None:
        """Persist one line durably, then fold it into the in-memory view."""
        if self.readonly:
            raise StorageFailure("journal opened read-only")
        if self._fh is not None:
            pos = self._fh.tell()
            try:
                self._write_line(canonical_json(doc) + b"\n")
            except OSError as exc:
                try:
                    self._fh.truncate(pos)
                except OSError:
                    pass
                raise StorageFailure(f"journal write failed: {exc}") from None
        self._apply(doc)

    def _write_line(self, line: bytes) -> None:
        self._fh.write(line)
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __enter__(self) -> "EffectLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- operations -------------------------------------------------------------

    def append_pending(
        self,
        call: ToolCall,
        policy: ToolPolicy,
        env: dict[str, Any],
        parent_branch_id: str | None = None,
    ) -> int:
        if not policy.irreversible:
            raise ValueError(f"{call.tool_name!r} is reversible; only irreversible calls are journaled")
        with self._lock:
            key = (call.session_id, call.branch_id, call.seq_index)
            if key in self._state.by_key:
                raise DuplicateKey(f"identity {key} already journaled as record {self._state.by_key[key]}")
            record_id = self._state.last_id + 1
            self._write(
                {
                    "entry": "effect",
                    "record_id": record_id,
                    "session_id": call.session_id,
                    "branch_id": call.branch_id,
                    "parent_branch_id": parent_branch_id,
                    "seq_index": call.seq_index,
                    "tool_name": call.tool_name,
                    "arguments": redact(call.arguments, policy),
                    "env_context": dict(env),
                    "response": None,
                    "outcome": Outcome.UNKNOWN.value,
                    "consumed_credentials": [],
                    "irreversible": True,
                }
            )
            return record_id

    def finalize(self, record_id: int, response: Any, outcome: Outcome | str) -> None:
        outcome = Outcome(outcome)
        if outcome is Outcome.UNKNOWN:
            raise ValueError("cannot finalize to Unknown")
        with self._lock:
            rec = self._state.records.get(record_id)
            if rec is None:
                raise NotFound(f"no record {record_id}")
            if rec.outcome is not Outcome.UNKNOWN:
                raise AlreadyFinalized(f"record {record_id} is already {rec.outcome.value}")
            self._write(
                {
                    "entry": "finalize",
                    "record_id": record_id,
                    "response": response,
                    "outcome": outcome.value,
                    "finalized_at": self.clock(),
                }
            )

    def mark_consumed(self, tokens: Iterable[str], record_id: int, source_fields: Iterable[str] | None = None) -> None:
        tokens = list(tokens)
        fields = list(source_fields) if source_fields is not None else [""] * len(tokens)
        with self._lock:
            if record_id not in self._state.records:
                raise NotFound(f"no record {record_id}")
            for token, source in zip(tokens, fields):
                if not token:
                    continue
                d = digest(token)
                existing = self._state.consumed.get(d)
                if existing is not None:
                    if existing.consumed_by != record_id:
                        logger.warning("digest %s already consumed by record %d", d, existing.consumed_by)
                    continue
                self._write(
                    {
                        "entry": "consume",
                        "digest": d,
                        "source_field": source,
                        "consumed_by": record_id,
                        "consumed_at": self.clock(),
                    }
                )

    def is_consumed(self, token: str) -> bool:
        if not token:
            return False
        return digest(token) in self._state.consumed

    def consumption(self, token: str) -> CredentialDigest | None:
        if not token:
            return None
        return self._state.consumed.get(digest(token))

    def find_at_position(self, session_id: str, branch_ancestry: list[str], seq_index: int) -> EffectRecord | None:
        """Record journaled at ``seq_index`` on the nearest ancestor branch, whatever its tool."""
        with self._lock:
            for branch in branch_ancestry:
                rid = self._state.by_key.get((session_id, branch, seq_index))
                if rid is not None:
                    return self._state.records[rid]
        return None

    def find_candidate(
        self, session_id: str, branch_ancestry: list[str], seq_index: int, tool_name: str
    ) -> EffectRecord | None:
        rec = self.find_at_position(session_id, branch_ancestry, seq_index)
        if rec is None or rec.tool_name != tool_name:
            return None
        return rec

    def record_fork(self, session_id: str, branch_id: str, parent_branch_id: str, forked_from_seq: int) -> None:
        with self._lock:
            self._write(
                {
                    "entry": "fork",
                    "session_id": session_id,
                    "branch_id": branch_id,
                    "parent_branch_id": parent_branch_id,
                    "forked_from_seq": forked_from_seq,
                    "at": self.clock(),
                }
            )

    def record_blocked(self, **fields: Any) -> None:
        with self._lock:
            self._write({"entry": "blocked", "at": self.clock(), **fields})

    # -- queries ----------------------------------------------------------------

    def get(self, record_id: int) -> EffectRecord:
        try:
            return self._state.records[record_id]
        except KeyError:
            raise NotFound(f"no record {record_id}") from None

    def records(
        self, session_id: str | None = None, branch_id: str | None = None, tool_name: str | None = None
    ) -> list[EffectRecord]:
        with self._lock:
            recs = sorted(self._state.records.values(), key=lambda r: r.record_id)
        return [
            r
            for r in recs
            if (session_id is None or r.session_id == session_id)
            and (branch_id is None or r.branch_id == branch_id)
            and (tool_name is None or r.tool_name == tool_name)
        ]

    def consumed(self) -> list[CredentialDigest]:
        with self._lock:
            return list(self._state.consumed.values())

    def forks(self, session_id: str | None = None) -> list[ForkEntry]:
        with self._lock:
            return [f for f in self._state.forks if session_id is None or f.session_id == session_id]

    def blocked(self) -> list[dict[str, Any]]:
        with self._lock:
            return list(self._state.blocked)

    def max_seq(self, session_id: str, branches: Iterable[str]) -> int | None:
        wanted = set(branches)
        seqs = [r.seq_index for r in self.records(session_id) if r.branch_id in wanted]
        return max(seqs) if seqs else None

    def __len__(self) -> int:
        return len(self._state.records)
