"""Post-restore call classification.

The rule engine compares a new call against the journaled call at the same
position, leaf by leaf, using the tool's policy to tell intent fields
(amount, recipient) from volatile ones (request ids, timestamps). An
external analyzer can be plugged in; anything it says that cannot be mapped
onto exactly one verdict falls back to the rules.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable

from . import paths
from .effectlog import EffectRecord
from .errors import AnalyzerMalformed, AnalyzerUnreachable, PolicyMissing
from .policy import ToolPolicy, extract_credentials, redact
from .protocol import ToolCall, canonical_json

logger = logging.getLogger(__name__)


class VerdictKind(str, enum.Enum):
    REPLAY_EQUIVALENT = "ReplayEquivalent"
    DIVERGENT = "Divergent"
    CREDENTIAL_REUSE = "CredentialReuse"
    FRESH_CALL = "FreshCall"


@dataclass
class FieldDiff:
    equal_intent: list[str] = field(default_factory=list)
    changed_intent: list[dict[str, Any]] = field(default_factory=list)
    changed_volatile: list[str] = field(default_factory=list)
    added: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)

    @property
    def changed_intent_paths(self) -> list[str]:
        return [c["path"] for c in self.changed_intent]

    def all_paths(self) -> list[str]:
        return self.equal_intent + self.changed_intent_paths + self.changed_volatile + self.added + self.removed

    def to_dict(self) -> dict[str, Any]:
        return {
            "equal_intent": list(self.equal_intent),
            "changed_intent": [dict(c) for c in self.changed_intent],
            "changed_volatile": list(self.changed_volatile),
            "added": list(self.added),
            "removed": list(self.removed),
        }


@dataclass
class Verdict:
    kind: VerdictKind
    candidate: int | None = None
    diff: FieldDiff | None = None
    reused_tokens: list[str] | None = None
    rationale: str = ""
    fallback: bool = False

    def check(self) -> None:
        """Raise ValueError if the verdict breaks its own invariants."""
        k = self.kind
        if k is VerdictKind.REPLAY_EQUIVALENT:
            if self.candidate is None or (self.diff is not None and self.diff.changed_intent):
                raise ValueError("ReplayEquivalent needs a candidate and no intent change")
        elif k is VerdictKind.DIVERGENT:
            has_change = self.diff is not None and (self.diff.changed_intent or self.diff.added or self.diff.removed)
            if not has_change and "tool" not in self.rationale:
                raise ValueError("Divergent needs an intent change or a noted tool mismatch")
        elif k is VerdictKind.CREDENTIAL_REUSE:
            if not self.reused_tokens:
                raise ValueError("CredentialReuse needs reused tokens")
        elif k is VerdictKind.FRESH_CALL:
            if self.candidate is not None:
                raise ValueError("FreshCall must not have a candidate")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "candidate": self.candidate,
            "diff": self.diff.to_dict() if self.diff is not None else None,
            "reused_tokens": list(self.reused_tokens) if self.reused_tokens is not None else None,
            "rationale": self.rationale,
            "fallback": self.fallback,
        }


def scalars_equal(a: Any, b: Any) -> bool:
    # bool is an int subclass in Python; True must not equal 1 here.
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        return a == b
    if type(a) is not type(b):
        return False
    return a == b


def diff_arguments(old: Any, new: Any, policy: ToolPolicy) -> FieldDiff:
    old_leaves = paths.leaves(old)
    new_leaves = paths.leaves(new)
    diff = FieldDiff()
    for path in sorted(set(old_leaves) | set(new_leaves)):
        if path not in new_leaves:
            diff.removed.append(path)
        elif path not in old_leaves:
            diff.added.append(path)
        elif not policy.treats_as_intent(path):
            diff.changed_volatile.append(path)
        elif scalars_equal(old_leaves[path], new_leaves[path]):
            diff.equal_intent.append(path)
        else:
            diff.changed_intent.append({"path": path, "old": old_leaves[path], "new": new_leaves[path]})
    return diff


def _structural_intent(policy: ToolPolicy, path: str, value: Any) -> bool:
    """Whether adding or removing this leaf changes intent.

    An empty object left behind when the last volatile field under it goes
    away is not an intent change.
    """
    if value in ({}, []) and any(v.startswith(path + ".") for v in policy.volatile_fields):
        return False
    return policy.treats_as_intent(path)


def classify(
    call: ToolCall,
    candidate: EffectRecord | None,
    policy: ToolPolicy | None,
    consumed_check: Callable[[str], bool],
) -> Verdict:
    if policy is None:
        raise PolicyMissing(f"no policy for tool {call.tool_name!r}")
    cand_id = candidate.record_id if candidate is not None else None

    reused = [path for path, token in extract_credentials(call.arguments, policy) if consumed_check(token)]
    if reused:
        return Verdict(
            VerdictKind.CREDENTIAL_REUSE,
            candidate=cand_id,
            reused_tokens=reused,
            rationale=f"consumed credential presented in {', '.join(reused)}",
        )
    if candidate is None:
        return Verdict(VerdictKind.FRESH_CALL, rationale="no journaled call at this position")

    diff = diff_arguments(candidate.arguments, redact(call.arguments, policy), policy)
    if candidate.tool_name != call.tool_name:
        return Verdict(
            VerdictKind.DIVERGENT,
            candidate=cand_id,
            diff=diff,
            rationale=f"tool mismatch: journaled {candidate.tool_name!r}, got {call.tool_name!r}",
        )
    old_leaves = paths.leaves(candidate.arguments)
    new_leaves = paths.leaves(redact(call.arguments, policy))
    structural = [
        p for p in diff.added + diff.removed
        if _structural_intent(policy, p, new_leaves.get(p, old_leaves.get(p)))
    ]
    if diff.changed_intent or structural:
        parts = [f"{c['path']}: {c['old']!r} -> {c['new']!r}" for c in diff.changed_intent]
        parts += [f"{p}: added/removed" for p in structural]
        return Verdict(
            VerdictKind.DIVERGENT, candidate=cand_id, diff=diff, rationale="intent changed: " + "; ".join(parts)
        )
    rationale = "intent fields unchanged"
    if diff.changed_volatile:
        rationale += f"; volatile fields ignored: {', '.join(diff.changed_volatile)}"
    return Verdict(VerdictKind.REPLAY_EQUIVALENT, candidate=cand_id, diff=diff, rationale=rationale)


# -- external analyzer -----------------------------------------------------------


@dataclass(frozen=True)
class AnalyzerEndpoint:
    url: str
    timeout_ms: int = 5000
    auth_header: str | None = None
    auth_env: str | None = None

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "AnalyzerEndpoint":
        return cls(
            url=doc["url"],
            timeout_ms=int(doc.get("timeout_ms", 5000)),
            auth_header=doc.get("auth_header"),
            auth_env=doc.get("auth_env"),
        )

    def headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.auth_header and self.auth_env:
            value = os.environ.get(self.auth_env)
            if value:
                headers[self.auth_header] = value
        return headers


def comparison_request(call: ToolCall, candidate: EffectRecord, policy: ToolPolicy) -> dict[str, Any]:
    return {
        "tool_name": call.tool_name,
        "journaled_tool_name": candidate.tool_name,
        "journaled_arguments": candidate.arguments,
        "new_arguments": redact(call.arguments, policy),
        "policy_hints": {
            "intent_fields": list(policy.intent_fields),
            "volatile_fields": list(policy.volatile_fields),
        },
        "allowed_kinds": [VerdictKind.REPLAY_EQUIVALENT.value, VerdictKind.DIVERGENT.value],
    }


def _post(endpoint: AnalyzerEndpoint, body: bytes) -> bytes:
    req = urllib.request.Request(endpoint.url, data=body, method="POST", headers=endpoint.headers())
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout_ms / 1000.0) as resp:
            return resp.read()
    except urllib.error.HTTPError as exc:
        raise AnalyzerMalformed(f"analyzer answered HTTP {exc.code}") from None
    except (urllib.error.URLError, OSError) as exc:
        raise AnalyzerUnreachable(f"analyzer at {endpoint.url}: {exc}") from None


def parse_analyzer_reply(body: bytes, candidate: EffectRecord) -> Verdict:
    try:
        doc = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise AnalyzerMalformed("reply is not a JSON document") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("kind"), str):
        raise AnalyzerMalformed("reply lacks a string 'kind'")
    try:
        kind = VerdictKind(doc["kind"])
    except ValueError:
        raise AnalyzerMalformed(f"unknown verdict kind {doc['kind']!r}") from None
    rationale = doc.get("rationale", "")
    if not isinstance(rationale, str):
        raise AnalyzerMalformed("rationale must be a string")
    # With a journaled candidate in hand only these two answers are meaningful;
    # credential reuse is decided by the rule engine before the analyzer is asked.
    if kind not in (VerdictKind.REPLAY_EQUIVALENT, VerdictKind.DIVERGENT):
        raise AnalyzerMalformed(f"verdict kind {kind.value} is not allowed for a journaled candidate")
    return Verdict(kind, candidate=candidate.record_id, rationale=rationale)


def analyze_external(
    call: ToolCall,
    candidate: EffectRecord,
    policy: ToolPolicy,
    endpoint: AnalyzerEndpoint,
    consumed_check: Callable[[str], bool] = lambda token: False,
    post: Callable[[AnalyzerEndpoint, bytes], bytes] = _post,
) -> Verdict:
    """Ask the external analyzer; fall back to the rule engine on any failure."""
    rule_verdict = classify(call, candidate, policy, consumed_check)
    if rule_verdict.kind is VerdictKind.CREDENTIAL_REUSE:
        return rule_verdict
    try:
        body = post(endpoint, canonical_json(comparison_request(call, candidate, policy)))
        verdict = parse_analyzer_reply(body, candidate)
    except (AnalyzerUnreachable, AnalyzerMalformed) as exc:
        logger.warning("analyzer fallback for %s seq %d: %s", call.tool_name, call.seq_index, exc)
        rule_verdict.fallback = True
        rule_verdict.rationale = f"analyzer fallback ({type(exc).__name__}: {exc}); rule engine: {rule_verdict.rationale}"
        return rule_verdict
    if verdict.kind is VerdictKind.DIVERGENT:
        verdict.diff = rule_verdict.diff
    return verdict
