"""Seeded random inputs for classifier properties, shared by the unit and acceptance suites."""

import copy
import random

from acrfence.effectlog import EffectRecord
from acrfence.policy import ToolPolicy, redact
from acrfence.protocol import ToolCall

INTENT = ("amount", "recipient", "source", "meta.owner")
VOLATILE = ("reference_id", "memo", "meta.trace")
POLICY = ToolPolicy("op", True, INTENT, VOLATILE, ("token",))
UNKNOWN = ("extra", "nested.deep")


def scalar(rng: random.Random):
    kind = rng.randrange(6)
    if kind == 0:
        return rng.randrange(-5, 100000)
    if kind == 1:
        return rng.choice([0.5, 1.0, 2.25, -3.0, 1e6])
    if kind == 2:
        return rng.choice(["Bob", "Carol", "Dave", "", "Ω"])
    if kind == 3:
        return rng.choice([True, False])
    if kind == 4:
        return None
    return rng.choice([[], {}, [1, 2]])


def set_path(doc, path, value):
    node = doc
    parts = path.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def args(rng: random.Random, fields=INTENT + VOLATILE + UNKNOWN, token=None):
    doc: dict = {}
    for f in fields:
        if rng.random() < 0.6:
            set_path(doc, f, scalar(rng))
    if token is not None:
        doc["token"] = token
    return doc


def different(rng: random.Random, value):
    from acrfence.classifier import scalars_equal

    while True:
        other = scalar(rng)
        if isinstance(other, (list, dict)):
            continue
        if not (type(value) in (list, dict) and value == other) and not scalars_equal(value, other):
            return other


def record(arguments, tool="op", record_id=1, policy=POLICY):
    return EffectRecord(record_id, "s", "b0", None, 1, tool, redact(copy.deepcopy(arguments), policy), {})


def tool_call(arguments, tool="op"):
    return ToolCall("s", "b0", 1, tool, arguments, 1)


def volatile_variant(rng: random.Random, old):
    new = copy.deepcopy(old)
    for f in VOLATILE:
        roll = rng.random()
        if roll < 0.4:
            set_path(new, f, scalar(rng))
        elif roll < 0.6:
            node = new
            parts = f.split(".")
            for p in parts[:-1]:
                node = node.get(p) if isinstance(node, dict) else None
            if isinstance(node, dict):
                node.pop(parts[-1], None)
    return new


def intent_variant(rng: random.Random, old):
    """Change one intent field that is a scalar leaf in ``old``; None if there is none."""
    from acrfence.paths import leaves

    present = [p for p, v in leaves(old).items() if p in INTENT and not isinstance(v, (list, dict))]
    if not present:
        return None, None
    path = rng.choice(present)
    new = copy.deepcopy(old)
    set_path(new, path, different(rng, leaves(old)[path]))
    return new, path
