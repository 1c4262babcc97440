"""Long-running proxy: data listener, control listener, and their clients.

Data path (HTTP): ``POST /mcp/<upstream>`` with one JSON-RPC message per body;
the ``Mcp-Session-Id`` header selects the session. With a single upstream,
``POST /mcp`` also works. Data path (stdio): one session, one upstream.

Control path: ``POST /`` on a separate loopback listener with documents such
as ``{"op": "approve_fork", "session_id": .., "fork_token": .., "new_branch_id": ..}``.
"""

from __future__ import annotations

import json
import logging
import sys
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Any, Callable

from . import errors
from .classifier import AnalyzerEndpoint
from .effectlog import EffectLog
from .errors import BindFailure, ConfigError, UpstreamUnreachable
from .fence import Fence
from .policy import load_policies
from .transport import JsonHttpServer, Upstream, ping, serve_stdio, upstream_from_config

logger = logging.getLogger(__name__)

SESSION_HEADER = "mcp-session-id"
DEFAULT_SESSION = "default"


@dataclass
class FenceConfig:
    upstreams: dict[str, dict[str, Any]]
    journal_path: Path
    policy_path: Path
    listen: dict[str, Any] = field(default_factory=lambda: {"transport": "http", "host": "127.0.0.1", "port": 8765})
    control: dict[str, Any] = field(default_factory=lambda: {"host": "127.0.0.1", "port": 8766})
    analyzer: AnalyzerEndpoint | None = None
    fsync: bool = True
    detect_implicit_restore: bool = True
    host_id: str | None = None

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir: Path | None = None) -> "FenceConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        base = base_dir or Path.cwd()
        for key in ("upstreams", "journal_path", "policy_path"):
            if key not in doc:
                raise ConfigError(f"config lacks required key {key!r}")
        upstreams = doc["upstreams"]
        if not isinstance(upstreams, dict) or not upstreams:
            raise ConfigError("upstreams must be a non-empty object of name -> {url|command}")
        for name, spec in upstreams.items():
            if not isinstance(spec, dict) or not ({"url", "command"} & set(spec)):
                raise ConfigError(f"upstream {name!r} needs a 'url' or 'command'")

        def resolve(p: str) -> Path:
            path = Path(p)
            return path if path.is_absolute() else base / path

        journal = resolve(doc["journal_path"])
        if not journal.parent.is_dir():
            raise ConfigError(f"journal directory does not exist: {journal.parent}")
        policy = resolve(doc["policy_path"])
        if not policy.is_file():
            raise ConfigError(f"policy file not found: {policy}")
        listen = dict(doc.get("listen", {"transport": "http", "host": "127.0.0.1", "port": 8765}))
        if listen.get("transport", "http") not in ("http", "stdio"):
            raise ConfigError("listen.transport must be 'http' or 'stdio'")
        analyzer = doc.get("analyzer")
        return cls(
            upstreams=upstreams,
            journal_path=journal,
            policy_path=policy,
            listen=listen,
            control=dict(doc.get("control", {"host": "127.0.0.1", "port": 8766})),
            analyzer=AnalyzerEndpoint.from_dict(analyzer) if analyzer else None,
            fsync=bool(doc.get("fsync", True)),
            detect_implicit_restore=bool(doc.get("detect_implicit_restore", True)),
            host_id=doc.get("host_id"),
        )


def apply_overrides(doc: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """Apply ``a.b=value`` overrides; values are parsed as JSON when they parse."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} walks through a non-object")
        node[parts[-1]] = value
    return doc


def load_config(path: str | Path, overrides: list[str] | None = None) -> FenceConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if overrides:
        doc = apply_overrides(doc, overrides)
    return FenceConfig.from_dict(doc, base_dir=path.parent)


def data_route(fence: Fence) -> Callable[[str, dict[str, str], bytes], tuple[int, bytes]]:
    def route(path: str, headers: dict[str, str], body: bytes) -> tuple[int, bytes]:
        parts = [p for p in path.split("?")[0].split("/") if p]
        if not parts or parts[0] != "mcp" or len(parts) > 2:
            return 404, json.dumps({"error": f"unknown path {path}"}).encode()
        upstream = parts[1] if len(parts) == 2 else None
        if upstream is not None and upstream not in fence.upstreams:
            return 404, json.dumps({"error": f"unknown upstream {upstream}"}).encode()
        session_id = headers.get(SESSION_HEADER, DEFAULT_SESSION)
        reply = fence.handle_message(session_id, body, upstream=upstream)
        if reply is None:
            return 202, b""
        return 200, reply

    return route


def control_route(fence: Fence) -> Callable[[str, dict[str, str], bytes], tuple[int, bytes]]:
    def route(path: str, headers: dict[str, str], body: bytes) -> tuple[int, bytes]:
        try:
            doc = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return 400, json.dumps({"ok": False, "error": "BadRequest", "message": "body is not JSON"}).encode()
        return 200, json.dumps(fence.control(doc), sort_keys=True).encode()

    return route


class ProxyServer:
    """Owns the fence plus its listeners. ``start()`` fails closed on unreachable upstreams."""

    def __init__(self, config: FenceConfig):
        self.config = config
        self.fence: Fence | None = None
        self.log: EffectLog | None = None
        self.upstreams: dict[str, Upstream] = {}
        self.data_server: JsonHttpServer | None = None
        self.control_server: JsonHttpServer | None = None

    def start(self) -> None:
        cfg = self.config
        policies = load_policies(cfg.policy_path)
        try:
            for name, spec in cfg.upstreams.items():
                up = upstream_from_config(name, spec)
                self.upstreams[name] = up
                ping(up)
        except UpstreamUnreachable:
            self._close_upstreams()
            raise
        self.log = EffectLog(cfg.journal_path, fsync=cfg.fsync)
        self.fence = Fence(
            self.log,
            policies,
            self.upstreams,
            analyzer=cfg.analyzer,
            host_id=cfg.host_id,
            detect_implicit_restore=cfg.detect_implicit_restore,
        )
        try:
            self.control_server = JsonHttpServer(
                (cfg.control.get("host", "127.0.0.1"), int(cfg.control.get("port", 0))), control_route(self.fence)
            )
            if cfg.listen.get("transport", "http") == "http":
                self.data_server = JsonHttpServer(
                    (cfg.listen.get("host", "127.0.0.1"), int(cfg.listen.get("port", 0))), data_route(self.fence)
                )
        except OSError as exc:
            self.stop()
            raise BindFailure(f"cannot bind listener: {exc}") from None
        self.control_server.start_background()
        if self.data_server is not None:
            self.data_server.start_background()

    @property
    def data_url(self) -> str | None:
        return self.data_server.url + "/mcp" if self.data_server else None

    @property
    def control_url(self) -> str | None:
        return self.control_server.url if self.control_server else None

    def banner(self) -> str:
        ups = ", ".join(
            f"{n} -> {s.get('url') or ' '.join(s.get('command', []))}" for n, s in self.config.upstreams.items()
        )
        data = self.data_url or "stdio"
        return (
            f"acrfence listening: data={data} control={self.control_url} "
            f"upstreams=[{ups}] journal={self.config.journal_path}"
        )

    def serve_stdio(self, stdin: IO[bytes], stdout: IO[bytes]) -> None:
        upstream = self.config.listen.get("upstream")
        session_id = self.config.listen.get("session_id", DEFAULT_SESSION)
        assert self.fence is not None
        serve_stdio(lambda frame: self.fence.handle_message(session_id, frame, upstream=upstream), stdin, stdout)

    def stop(self) -> None:
        for server in (self.data_server, self.control_server):
            if server is not None:
                try:
                    server.stop()
                except Exception:  # pragma: no cover
                    pass
        self.data_server = self.control_server = None
        self._close_upstreams()
        if self.log is not None:
            self.log.close()

    def _close_upstreams(self) -> None:
        for up in self.upstreams.values():
            up.close()


def run_proxy(config: FenceConfig, on_ready: Callable[[ProxyServer], None] | None = None) -> None:
    """Start the proxy and block until interrupted (or stdin EOF in stdio mode)."""
    server = ProxyServer(config)
    server.start()
    if on_ready is not None:
        on_ready(server)
    stop = threading.Event()
    try:
        if server.data_server is None:
            server.serve_stdio(sys.stdin.buffer, sys.stdout.buffer)
        else:
            stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


# -- control client ----------------------------------------------------------------


class ControlClient:
    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def call(self, doc: dict[str, Any]) -> dict[str, Any]:
        req = urllib.request.Request(
            self.url, data=json.dumps(doc).encode(), method="POST", headers={"Content-Type": "application/json"}
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                reply = json.loads(resp.read())
        except urllib.error.HTTPError as exc:
            reply = json.loads(exc.read() or b"{}")
        except (urllib.error.URLError, OSError) as exc:
            raise UpstreamUnreachable(f"control surface at {self.url}: {exc}") from None
        if not reply.get("ok"):
            cls = getattr(errors, str(reply.get("error")), None)
            if not (isinstance(cls, type) and issubclass(cls, errors.AcrFenceError)):
                cls = errors.AcrFenceError
            raise cls(reply.get("message", "control request failed"))
        return reply

    def register_restore(self, session_id: str, checkpoint_seq: int) -> dict[str, Any]:
        return self.call({"op": "register_restore", "session_id": session_id, "checkpoint_seq": checkpoint_seq})

    def approve_fork(self, session_id: str, fork_token: str, new_branch_id: str) -> list[dict[str, Any]]:
        return self.call(
            {"op": "approve_fork", "session_id": session_id, "fork_token": fork_token, "new_branch_id": new_branch_id}
        )["lineage"]

    def query_log(self, **filters: str) -> list[dict[str, Any]]:
        return self.call({"op": "query_log", **filters})["records"]

    def describe_session(self, session_id: str) -> dict[str, Any]:
        return self.call({"op": "describe_session", "session_id": session_id})["session"]


class LocalControl:
    """Same surface as ControlClient, bound directly to an in-process fence."""

    def __init__(self, fence: Fence):
        self.fence = fence

    def register_restore(self, session_id: str, checkpoint_seq: int) -> dict[str, Any]:
        self.fence.register_restore(session_id, checkpoint_seq)
        return {"ok": True}

    def approve_fork(self, session_id: str, fork_token: str, new_branch_id: str) -> list[dict[str, Any]]:
        return self.fence.approve_fork(session_id, fork_token, new_branch_id)

    def query_log(self, **filters: str) -> list[dict[str, Any]]:
        return self.fence.query_log(**filters)

    def describe_session(self, session_id: str) -> dict[str, Any]:
        return self.fence.session(session_id).describe()
