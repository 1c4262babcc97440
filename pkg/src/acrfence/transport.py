"""Frame transports: newline-delimited stdio and one-message-per-POST HTTP.

Upstreams are anything with ``send(frame) -> frame | None``; ``None`` is
returned for notifications, which have no reply.
"""

from __future__ import annotations

import json
import logging
import subprocess
import threading
import urllib.error
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import IO, Callable, Protocol

from .errors import MalformedFrame, UpstreamFailure, UpstreamUnreachable
from .protocol import Message, MessageKind, decode_message, encode_message

logger = logging.getLogger(__name__)

FrameHandler = Callable[[bytes], "bytes | None"]


# -- stdio framing --------------------------------------------------------------


def read_frame(stream: IO[bytes]) -> bytes | None:
    """Read one newline-terminated frame; None at EOF. Blank lines are skipped."""
    while True:
        line = stream.readline()
        if not line:
            return None
        line = line.rstrip(b"\r\n")
        if line.strip():
            return line


def write_frame(stream: IO[bytes], frame: bytes) -> None:
    if b"\n" in frame:
        raise MalformedFrame("stdio frames must not contain raw newlines")
    stream.write(frame + b"\n")
    stream.flush()


def serve_stdio(handler: FrameHandler, stdin: IO[bytes], stdout: IO[bytes]) -> None:
    """Pump frames from ``stdin`` through ``handler`` until EOF."""
    while True:
        frame = read_frame(stdin)
        if frame is None:
            return
        reply = handler(frame)
        if reply is not None:
            write_frame(stdout, reply)


# -- upstream clients -------------------------------------------------------------


class Upstream(Protocol):
    name: str

    def send(self, frame: bytes) -> bytes | None: ...

    def close(self) -> None: ...


class LocalUpstream:
    """In-process upstream that hands frames straight to a handler."""

    def __init__(self, name: str, handler: FrameHandler):
        self.name = name
        self._handler = handler

    def send(self, frame: bytes) -> bytes | None:
        return self._handler(frame)

    def close(self) -> None:
        pass


class HttpUpstream:
    def __init__(self, name: str, url: str, timeout: float = 10.0, headers: dict[str, str] | None = None):
        self.name = name
        self.url = url
        self.timeout = timeout
        self.headers = dict(headers or {})

    def send(self, frame: bytes) -> bytes | None:
        req = urllib.request.Request(
            self.url,
            data=frame,
            method="POST",
            headers={"Content-Type": "application/json", **self.headers},
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except urllib.error.HTTPError as exc:
            body = exc.read()
            if not body:
                raise UpstreamFailure(f"{self.name}: HTTP {exc.code}") from None
        except (urllib.error.URLError, OSError) as exc:
            raise UpstreamUnreachable(f"{self.name} at {self.url}: {exc}") from None
        return body or None

    def close(self) -> None:
        pass


class StdioUpstream:
    """Upstream tool server run as a child process speaking line-delimited JSON-RPC."""

    def __init__(self, name: str, command: list[str]):
        self.name = name
        self.command = list(command)
        self._lock = threading.Lock()
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL
            )
        except OSError as exc:
            raise UpstreamUnreachable(f"{name}: cannot start {command!r}: {exc}") from None

    def send(self, frame: bytes) -> bytes | None:
        msg = decode_message(frame)
        with self._lock:
            if self._proc.poll() is not None:
                raise UpstreamUnreachable(f"{self.name}: process exited with {self._proc.returncode}")
            try:
                write_frame(self._proc.stdin, frame)
            except OSError as exc:
                raise UpstreamFailure(f"{self.name}: write failed: {exc}") from None
            if msg.kind is not MessageKind.REQUEST:
                return None
            # Server-initiated notifications are dropped; we wait for our id.
            while True:
                line = read_frame(self._proc.stdout)
                if line is None:
                    raise UpstreamFailure(f"{self.name}: closed stdout before replying")
                try:
                    reply = decode_message(line)
                except Exception:
                    return line
                if reply.kind is MessageKind.RESPONSE and reply.id == msg.id:
                    return line

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=2)
            except subprocess.TimeoutExpired:
                self._proc.kill()


def upstream_from_config(name: str, spec: dict) -> Upstream:
    timeout = float(spec.get("timeout_ms", 10000)) / 1000.0
    if "url" in spec:
        return HttpUpstream(name, spec["url"], timeout=timeout)
    if "command" in spec:
        return StdioUpstream(name, spec["command"])
    raise ValueError(f"upstream {name!r} needs a 'url' or 'command'")


def ping(upstream: Upstream) -> None:
    """Round-trip a ping; raises UpstreamUnreachable when the server is not there."""
    try:
        reply = upstream.send(encode_message(Message.request("acrfence-ping", "ping", {})))
    except UpstreamFailure as exc:
        raise UpstreamUnreachable(str(exc)) from None
    if reply is None:
        raise UpstreamUnreachable(f"{upstream.name}: no reply to ping")
    decode_message(reply)


# -- HTTP serving ----------------------------------------------------------------


class JsonHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], route: Callable[[str, dict[str, str], bytes], "tuple[int, bytes]"]):
        self.route = route
        super().__init__(address, _Handler)

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name=f"http-{self.server_address[1]}", daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class _Handler(BaseHTTPRequestHandler):
    server: JsonHttpServer
    protocol_version = "HTTP/1.1"

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length)
        headers = {k.lower(): v for k, v in self.headers.items()}
        try:
            status, payload = self.server.route(self.path, headers, body)
        except Exception:  # pragma: no cover - last-resort guard
            logger.exception("unhandled error serving %s", self.path)
            status, payload = 500, json.dumps({"error": "internal error"}).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format: str, *args) -> None:
        logger.debug("%s - %s", self.address_string(), format % args)


def jsonrpc_http_route(handler: FrameHandler) -> Callable[[str, dict[str, str], bytes], tuple[int, bytes]]:
    """Adapt a frame handler to the HTTP transport (202 + empty body for notifications)."""

    def route(path: str, headers: dict[str, str], body: bytes) -> tuple[int, bytes]:
        reply = handler(body)
        if reply is None:
            return 202, b""
        return 200, reply

    return route
