import json
import os
import re
import signal
import socket
import subprocess
import sys
import threading
import time
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import pytest

from acrfence.effectlog import EffectLog, Outcome
from acrfence.errors import ConfigError, NoPendingFork, TokenMismatch
from acrfence.fence import FORK_REQUIRED, SIDE_CHANNEL
from acrfence.protocol import Message, decode_message, encode_message, tool_call_request
from acrfence.proxy import ControlClient, FenceConfig, ProxyServer, apply_overrides, load_config
from acrfence.simlab.agent import HttpChannel
from acrfence.simlab.scenarios import default_policies
from acrfence.simlab.servers import BankServer
from acrfence.transport import JsonHttpServer, jsonrpc_http_route

from conftest import transfer_args


@pytest.fixture
def bank_http():
    bank = BankServer()
    http = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(bank.handle))
    http.start_background()
    yield bank, http
    http.stop()


def write_config(tmp_path, upstreams, **extra):
    policy = tmp_path / "policies.json"
    policy.write_text(json.dumps(default_policies().to_dict()))
    doc = {
        "upstreams": upstreams,
        "journal_path": "journal.log",
        "policy_path": "policies.json",
        "listen": {"transport": "http", "host": "127.0.0.1", "port": 0},
        "control": {"host": "127.0.0.1", "port": 0},
        "fsync": True,
        **extra,
    }
    path = tmp_path / "fence.json"
    path.write_text(json.dumps(doc))
    return path


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.fixture
def proxy(tmp_path, bank_http):
    bank, http = bank_http
    cfg = load_config(write_config(tmp_path, {"bank": {"url": http.url + "/mcp"}}))
    server = ProxyServer(cfg)
    server.start()
    yield server, bank
    server.stop()


def post(url, msg, session="s"):
    return HttpChannel(url, session).send("bank", msg)


def test_config_validation(tmp_path):
    path = write_config(tmp_path, {"bank": {"url": "http://x"}})
    cfg = load_config(path, ["fsync=false", "listen.port=9999", "host_id=h1"])
    assert cfg.fsync is False and cfg.listen["port"] == 9999 and cfg.host_id == "h1"
    assert cfg.journal_path == tmp_path / "journal.log"
    with pytest.raises(ConfigError, match="journal directory"):
        load_config(path, ["journal_path=missing/dir/j.log"])
    with pytest.raises(ConfigError):
        load_config(path, ["upstreams={}"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])
    with pytest.raises(ConfigError):
        FenceConfig.from_dict({"upstreams": {"a": {}}, "journal_path": "j", "policy_path": "p"})


def test_http_end_to_end(proxy):
    server, bank = proxy
    url = server.data_url
    r = post(url, tool_call_request(1, "get_balance", {"account": "Alice"}))
    assert r.result["structuredContent"]["balance"] == 1_000_000
    r = post(url, tool_call_request(2, "transfer", transfer_args()))
    assert r.result["structuredContent"]["status"] == "ok"
    control = ControlClient(server.control_url)
    control.register_restore("s", 1)
    r = post(url, tool_call_request(3, "transfer", transfer_args(ref="new")))
    assert r.extra[SIDE_CHANNEL]["outcome"] == "Replayed"
    assert bank.counters["transfer"] == 1
    r = post(url, tool_call_request(4, "transfer", transfer_args("Carol", ref="new2")))
    # Past the frontier: a new call, forwarded.
    assert "error" not in r.extra and r.result["structuredContent"]["recipient"] == "Carol"
    assert [x["tool_name"] for x in control.query_log(session_id="s")] == ["transfer", "transfer"]
    assert control.describe_session("s")["next_seq_index"] == 3


def test_http_fork_via_control_client(proxy):
    server, bank = proxy
    url = server.data_url
    post(url, tool_call_request(1, "transfer", transfer_args("Bob")))
    control = ControlClient(server.control_url)
    control.register_restore("s", 0)
    r = post(url, tool_call_request(2, "transfer", transfer_args("Carol", ref="c")))
    assert r.error["code"] == FORK_REQUIRED
    token = r.error["data"][SIDE_CHANNEL]["fork_token"]
    with pytest.raises(TokenMismatch):
        control.approve_fork("s", "f" * 32, "b1")
    lineage = control.approve_fork("s", token, "b1")
    assert lineage[-1] == {"branch_id": "b1", "parent": "b0", "forked_from_seq": 0}
    with pytest.raises(NoPendingFork):
        control.approve_fork("s", token, "b2")
    post(url, tool_call_request(3, "transfer", transfer_args("Carol", ref="c")))
    assert sorted(t["recipient"] for t in bank.state.transactions) == ["Bob", "Carol"]


def test_notifications_and_pass_through_over_http(proxy):
    server, bank = proxy
    req = urllib.request.Request(
        server.data_url + "/bank",
        data=encode_message(Message.notification("notifications/initialized")),
        method="POST",
        headers={"Content-Type": "application/json"},
    )
    with urllib.request.urlopen(req) as resp:
        assert resp.status == 202 and resp.read() == b""
    r = post(server.data_url, Message.request(7, "tools/list", {}))
    assert {t["name"] for t in r.result["tools"]} >= {"transfer", "get_balance"}


def test_concurrent_sessions_are_isolated(proxy):
    server, bank = proxy
    url = server.data_url

    def agent(i):
        sid = f"agent-{i}"
        for n in range(5):
            post(url, tool_call_request(n, "transfer", transfer_args(f"Bob", amount=1, ref=f"{sid}-{n}")), session=sid)
        return sid

    with ThreadPoolExecutor(8) as pool:
        sids = list(pool.map(agent, range(8)))
    log = server.fence.log
    assert len(log) == 40 and bank.counters["transfer"] == 40
    for sid in sids:
        assert [r.seq_index for r in log.records(sid)] == [0, 1, 2, 3, 4]


def test_unreachable_upstream_fails_closed(tmp_path):
    cfg = load_config(write_config(tmp_path, {"bank": {"url": f"http://127.0.0.1:{free_port()}/mcp", "timeout_ms": 500}}))
    from acrfence.errors import UpstreamUnreachable

    with pytest.raises(UpstreamUnreachable):
        ProxyServer(cfg).start()


def test_stdio_upstream(tmp_path):
    cmd = [sys.executable, "-m", "acrfence.simlab.servers", "bank"]
    cfg = load_config(write_config(tmp_path, {"bank": {"command": cmd}}))
    server = ProxyServer(cfg)
    server.start()
    try:
        r = post(server.data_url, tool_call_request(1, "transfer", transfer_args()))
        assert r.result["structuredContent"]["status"] == "ok"
        assert server.fence.log.records()[0].outcome is Outcome.SUCCEEDED
    finally:
        server.stop()


# -- the real CLI process ------------------------------------------------------------------


def start_serve(config, env=None):
    proc = subprocess.Popen(
        [sys.executable, "-m", "acrfence", "serve", "--config", str(config)],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        env={**os.environ, **(env or {})},
    )
    line = proc.stdout.readline().decode()
    m = re.search(r"data=(\S+) control=(\S+)", line)
    if m is None:
        proc.kill()
        raise AssertionError(f"no banner: {line!r} {proc.stderr.read().decode()!r}")
    return proc, m.group(1), m.group(2)


def test_serve_exit_codes(tmp_path):
    bad = write_config(tmp_path, {"bank": {"url": "http://x"}}, journal_path="nope/j.log")
    r = subprocess.run([sys.executable, "-m", "acrfence", "serve", "--config", str(bad)], capture_output=True, timeout=60)
    assert r.returncode == 2 and b"journal directory" in r.stderr
    down = write_config(tmp_path, {"bank": {"url": f"http://127.0.0.1:{free_port()}/mcp", "timeout_ms": 500}})
    r = subprocess.run([sys.executable, "-m", "acrfence", "serve", "--config", str(down)], capture_output=True, timeout=60)
    assert r.returncode == 3
    r = subprocess.run([sys.executable, "-m", "acrfence", "serve"], capture_output=True, timeout=60,
                       env={k: v for k, v in os.environ.items() if k != "ACRFENCE_CONFIG"})
    assert r.returncode == 2


def test_serve_bind_failure_exits_3(tmp_path, bank_http):
    bank, http = bank_http
    with socket.socket() as taken:
        taken.bind(("127.0.0.1", 0))
        taken.listen()
        port = taken.getsockname()[1]
        cfg = write_config(tmp_path, {"bank": {"url": http.url + "/mcp"}}, control={"host": "127.0.0.1", "port": port})
        r = subprocess.run([sys.executable, "-m", "acrfence", "serve", "--config", str(cfg)], capture_output=True, timeout=60)
    assert r.returncode == 3 and b"bind" in r.stderr


def test_serve_reads_config_from_env_and_stops_on_sigterm(tmp_path, bank_http):
    bank, http = bank_http
    cfg = write_config(tmp_path, {"bank": {"url": http.url + "/mcp"}})
    proc = subprocess.Popen(
        [sys.executable, "-m", "acrfence", "serve"], stdout=subprocess.PIPE, stderr=subprocess.PIPE,
        env={**os.environ, "ACRFENCE_CONFIG": str(cfg)},
    )
    assert b"acrfence listening" in proc.stdout.readline()
    proc.send_signal(signal.SIGTERM)
    assert proc.wait(timeout=10) == 0


def test_proxy_killed_mid_call_leaves_unknown_record(tmp_path):
    arrived = threading.Event()
    release = threading.Event()
    bank = BankServer()

    def slow(frame):
        msg = decode_message(frame)
        if msg.method == "tools/call" and msg.params["name"] == "transfer":
            arrived.set()
            release.wait(20)
        return bank.handle(frame)

    http = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(slow))
    http.start_background()
    try:
        cfg = write_config(tmp_path, {"bank": {"url": http.url + "/mcp"}})
        proc, data_url, control_url = start_serve(cfg)
        caller = threading.Thread(
            target=lambda: _swallow(lambda: post(data_url, tool_call_request(1, "transfer", transfer_args()))), daemon=True
        )
        caller.start()
        assert arrived.wait(20)
        proc.kill()
        proc.wait(10)
        release.set()

        log = EffectLog(tmp_path / "journal.log", readonly=True)
        rec = log.find_at_position("s", ["b0"], 0)
        assert rec is not None and rec.outcome is Outcome.UNKNOWN

        # A restarted proxy refuses to replay or re-send the unresolved call.
        proc, data_url, control_url = start_serve(cfg)
        try:
            ControlClient(control_url).register_restore("s", 0)
            r = post(data_url, tool_call_request(1, "transfer", transfer_args(ref="retry")))
            assert r.error["code"] == FORK_REQUIRED
            assert "unknown outcome" in r.error["data"][SIDE_CHANNEL]["rationale"]
        finally:
            proc.terminate()
            proc.wait(10)
        assert bank.counters["transfer"] == 1
    finally:
        release.set()
        http.stop()


def _swallow(fn):
    try:
        fn()
    except Exception:
        pass


def test_consumed_credential_survives_proxy_restart(tmp_path):
    from acrfence.simlab.servers import ApprovalServer

    approval = ApprovalServer()
    http = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(approval.handle))
    http.start_background()
    try:
        cfg = write_config(tmp_path, {"approval": {"url": http.url + "/mcp"}})
        proc, data_url, control_url = start_serve(cfg)
        ch = HttpChannel(data_url, "s")
        grant = ch.send("approval", tool_call_request(1, "grant_token", {"action": "delete_data", "target": "Alice", "approver": "m"}))
        token = grant.result["structuredContent"]["token"]
        ch.send("approval", tool_call_request(2, "delete_data", {"target": "Alice", "token": token, "request_id": "r1"}))
        proc.terminate()
        proc.wait(10)

        proc, data_url, control_url = start_serve(cfg)
        try:
            r = HttpChannel(data_url, "other").send(
                "approval", tool_call_request(1, "delete_data", {"target": "Bob", "token": token, "request_id": "r2"})
            )
            assert r.error["data"][SIDE_CHANNEL]["outcome"] == "BlockedCredentialReuse"
        finally:
            proc.terminate()
            proc.wait(10)
        assert approval.counters["delete_data"] == 1
        assert token not in (tmp_path / "journal.log").read_text()
    finally:
        http.stop()


def test_stdio_listen_mode(tmp_path):
    cmd = [sys.executable, "-m", "acrfence.simlab.servers", "bank"]
    cfg = write_config(tmp_path, {"bank": {"command": cmd}}, listen={"transport": "stdio", "upstream": "bank"})
    frames = b"".join(
        encode_message(m) + b"\n"
        for m in [tool_call_request(1, "get_balance", {"account": "Alice"}), tool_call_request(2, "transfer", transfer_args())]
    )
    r = subprocess.run([sys.executable, "-m", "acrfence", "serve", "--config", str(cfg)], input=frames,
                       capture_output=True, timeout=60)
    assert r.returncode == 0, r.stderr
    replies = [decode_message(line) for line in r.stdout.splitlines()]
    assert [x.id for x in replies] == [1, 2]
    assert replies[1].result["structuredContent"]["status"] == "ok"
    assert b"acrfence listening" in r.stderr
