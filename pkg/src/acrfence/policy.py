"""Per-tool policies: which tools are irreversible and how their arguments are read."""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import paths
from .errors import ConfigError, PolicyMissing

DIGEST_PREFIX = "sha256:"


class FieldTreatment(str, enum.Enum):
    AS_INTENT = "AsIntent"
    AS_VOLATILE = "AsVolatile"


@dataclass(frozen=True)
class ToolPolicy:
    tool_name: str
    irreversible: bool = True
    intent_fields: tuple[str, ...] = ()
    volatile_fields: tuple[str, ...] = ()
    credential_fields: tuple[str, ...] = ()
    unknown_field_treatment: FieldTreatment = FieldTreatment.AS_INTENT

    def __post_init__(self) -> None:
        overlap = set(self.intent_fields) & set(self.volatile_fields)
        if overlap:
            raise ConfigError(
                f"policy {self.tool_name!r}: fields both intent and volatile: {sorted(overlap)}"
            )

    @classmethod
    def from_dict(cls, doc: dict[str, Any], tool_name: str | None = None) -> "ToolPolicy":
        known = {
            "tool_name", "irreversible", "intent_fields", "volatile_fields",
            "credential_fields", "unknown_field_treatment",
        }
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown policy keys: {sorted(unknown)}")
        name = doc.get("tool_name", tool_name)
        if not isinstance(name, str) or not name:
            raise ConfigError("policy needs a tool_name")
        try:
            treatment = FieldTreatment(doc.get("unknown_field_treatment", "AsIntent"))
        except ValueError:
            raise ConfigError(
                f"policy {name!r}: unknown_field_treatment must be AsIntent or AsVolatile"
            ) from None
        lists = {}
        for key in ("intent_fields", "volatile_fields", "credential_fields"):
            value = doc.get(key, [])
            if not isinstance(value, list) or not all(isinstance(p, str) and p for p in value):
                raise ConfigError(f"policy {name!r}: {key} must be a list of paths")
            lists[key] = tuple(value)
        irreversible = doc.get("irreversible", True)
        if not isinstance(irreversible, bool):
            raise ConfigError(f"policy {name!r}: irreversible must be a boolean")
        return cls(name, irreversible, unknown_field_treatment=treatment, **lists)

    def to_dict(self) -> dict[str, Any]:
        return {
            "tool_name": self.tool_name,
            "irreversible": self.irreversible,
            "intent_fields": list(self.intent_fields),
            "volatile_fields": list(self.volatile_fields),
            "credential_fields": list(self.credential_fields),
            "unknown_field_treatment": self.unknown_field_treatment.value,
        }

    def treats_as_intent(self, path: str) -> bool:
        if paths.matches_any(list(self.volatile_fields), path):
            return False
        if paths.matches_any(list(self.intent_fields), path):
            return True
        return self.unknown_field_treatment is FieldTreatment.AS_INTENT

    def is_credential(self, path: str) -> bool:
        return paths.matches_any(list(self.credential_fields), path)


@dataclass
class PolicySet:
    policies: dict[str, ToolPolicy] = field(default_factory=dict)
    default: ToolPolicy | None = None

    def get(self, tool_name: str) -> ToolPolicy:
        policy = self.policies.get(tool_name)
        if policy is not None:
            return policy
        if self.default is not None:
            return ToolPolicy(
                tool_name,
                self.default.irreversible,
                self.default.intent_fields,
                self.default.volatile_fields,
                self.default.credential_fields,
                self.default.unknown_field_treatment,
            )
        raise PolicyMissing(f"no policy configured for tool {tool_name!r}")

    def add(self, policy: ToolPolicy) -> None:
        self.policies[policy.tool_name] = policy

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "PolicySet":
        if not isinstance(doc, dict):
            raise ConfigError("policy document must be an object")
        tools = doc.get("tools", [])
        if isinstance(tools, dict):
            tools = [dict(v, tool_name=k) for k, v in tools.items()]
        out = cls()
        for entry in tools:
            policy = ToolPolicy.from_dict(entry)
            if policy.tool_name in out.policies:
                raise ConfigError(f"duplicate policy for {policy.tool_name!r}")
            out.add(policy)
        default = doc.get("default")
        if default is not None:
            out.default = ToolPolicy.from_dict(default, tool_name="*")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "tools": [p.to_dict() for p in self.policies.values()],
            "default": self.default.to_dict() if self.default else None,
        }


def load_policies(path: str | Path) -> PolicySet:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read policy file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"policy file {path} is not valid JSON: {exc}") from None
    return PolicySet.from_dict(doc)


# -- credentials -----------------------------------------------------------------


def digest(token: str) -> str:
    return DIGEST_PREFIX + hashlib.sha256(token.encode("utf-8")).hexdigest()


def extract_credentials(arguments: Any, policy: ToolPolicy) -> list[tuple[str, str]]:
    """Return ``(path, token)`` for every non-empty string leaf under a credential field."""
    if not policy.credential_fields:
        return []
    return [
        (path, value)
        for path, value in paths.iter_leaves(arguments)
        if isinstance(value, str) and value and policy.is_credential(path)
    ]


def redact(arguments: Any, policy: ToolPolicy) -> Any:
    """Replace credential strings with their digests so raw tokens never hit disk."""
    if not policy.credential_fields:
        return arguments

    def fn(path: str, value: Any) -> Any:
        if isinstance(value, str) and value and policy.is_credential(path):
            return digest(value)
        return value

    return paths.map_leaves(arguments, fn)
