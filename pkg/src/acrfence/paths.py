"""Dot-separated paths over JSON-like argument trees.

``a.b.0.c`` addresses ``tree["a"]["b"][0]["c"]``. Policy patterns may use
``*`` for any single segment and match every leaf underneath them.
"""

from __future__ import annotations

from typing import Any, Iterator


def iter_leaves(tree: Any, prefix: str = "") -> Iterator[tuple[str, Any]]:
    """Yield ``(path, value)`` for each leaf. Empty containers count as leaves."""
    if isinstance(tree, dict) and tree:
        for key, value in tree.items():
            yield from iter_leaves(value, f"{prefix}.{key}" if prefix else str(key))
    elif isinstance(tree, list) and tree:
        for i, value in enumerate(tree):
            yield from iter_leaves(value, f"{prefix}.{i}" if prefix else str(i))
    elif prefix:
        yield prefix, tree


def leaves(tree: Any) -> dict[str, Any]:
    return dict(iter_leaves(tree))


def split(path: str) -> list[str]:
    return path.split(".") if path else []


def matches(pattern: str, path: str) -> bool:
    """True when ``pattern`` names ``path`` or one of its ancestors."""
    pat = split(pattern)
    parts = split(path)
    if len(pat) > len(parts):
        return False
    return all(p == "*" or p == s for p, s in zip(pat, parts))


def matches_any(patterns: list[str], path: str) -> bool:
    return any(matches(p, path) for p in patterns)


def map_leaves(tree: Any, fn, prefix: str = "") -> Any:
    """Return a copy of ``tree`` with ``fn(path, value)`` applied to every leaf."""
    if isinstance(tree, dict) and tree:
        return {
            k: map_leaves(v, fn, f"{prefix}.{k}" if prefix else str(k)) for k, v in tree.items()
        }
    if isinstance(tree, list) and tree:
        return [map_leaves(v, fn, f"{prefix}.{i}" if prefix else str(i)) for i, v in enumerate(tree)]
    if prefix:
        return fn(prefix, tree)
    return tree


def get(tree: Any, path: str, default: Any = None) -> Any:
    node = tree
    for part in split(path):
        if isinstance(node, dict) and part in node:
            node = node[part]
        elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
            node = node[int(part)]
        else:
            return default
    return node


def set_path(tree: Any, path: str, value: Any) -> Any:
    """Return a copy of ``tree`` with ``path`` set to ``value`` (dict parents are created)."""
    parts = split(path)
    if not parts:
        return value
    head, rest = parts[0], ".".join(parts[1:])
    if isinstance(tree, list) and head.isdigit() and int(head) < len(tree):
        out = list(tree)
        out[int(head)] = set_path(out[int(head)], rest, value)
        return out
    out = dict(tree) if isinstance(tree, dict) else {}
    out[head] = set_path(out.get(head), rest, value)
    return out
