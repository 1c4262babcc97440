"""One test per acceptance criterion; each prints a single PASS/FAIL line."""

import json
import random
import re
import subprocess
import sys
import threading
import time

import pytest

import generators as g
from acrfence.classifier import VerdictKind, classify, diff_arguments
from acrfence.cli import main as cli_main
from acrfence.effectlog import EffectLog, Outcome
from acrfence.errors import DuplicateKey
from acrfence.fence import SIDE_CHANNEL
from acrfence.paths import leaves
from acrfence.policy import ToolPolicy
from acrfence.protocol import ToolCall, canonical_json, decode_message, tool_call_request
from acrfence.proxy import ControlClient, FenceConfig, ProxyServer
from acrfence.simlab.agent import DirectChannel, FenceChannel, HttpChannel, ResynthesisModel, ScriptedAgent, Step
from acrfence.simlab.scenarios import (
    ACTION_REPLAY,
    ACTION_REPLAY_CHECKPOINT,
    PRESETS,
    ScenarioConfig,
    default_policies,
    make_testbed,
    random_script,
    run_scenario,
)
from acrfence.simlab.servers import ApprovalServer, BankServer
from acrfence.transport import JsonHttpServer, jsonrpc_http_route

from conftest import ACCEPTANCE_LINES


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def preset(name):
    for suite in PRESETS.values():
        for doc in suite:
            if doc["name"] == name:
                return ScenarioConfig.from_dict(doc)
    raise KeyError(name)


def run_with_results(cfg):
    results = []
    rep = run_scenario(cfg, keep_results=results)
    return rep, results


def test_criterion_1_action_replay_reproduction():
    start = time.monotonic()
    rep, results = run_with_results(preset("A/no-fence"))
    elapsed = time.monotonic() - start
    txns = [len(r.testbed.bank.state.transactions) for r in results]
    ok = rep.trials == 10 and txns == [2] * 10 and rep.trials_with_duplicates == 10 and elapsed < 30
    report(1, ok, f"fence off: {rep.trials_with_duplicates}/10 trials duplicated (transactions {txns}), {elapsed:.2f}s")


def test_criterion_2_no_checkpoint_baseline():
    rep, results = run_with_results(preset("A/baseline"))
    # Also with checkpointing on but nothing to recover from.
    crashless = ScenarioConfig.from_dict(dict(PRESETS["paper-repro"][0], name="A/no-crash", crash_cycles=0))
    rep2, results2 = run_with_results(crashless)
    txns = [len(r.testbed.bank.state.transactions) for r in results + results2]
    ok = rep.trials == 10 and rep.trials_with_duplicates == 0 and rep2.trials_with_duplicates == 0 and txns == [1] * 20
    report(2, ok, f"baseline: {rep.trials_with_duplicates}/10 duplicated; crash-free with checkpoints: {rep2.trials_with_duplicates}/10")


def test_criterion_3_fence_prevents_action_replay():
    rep, results = run_with_results(preset("A/fence"))
    per_trial_transfers = [r.testbed.bank.counters["transfer"] for r in results]
    replays = 0
    faithful = True
    for r in results:
        for e in r.transcript.events:
            if e.get("kind") == "call" and e.get("outcome") == "Replayed":
                replays += 1
                journaled = canonical_json(r.fence.log.get(e["record_id"]).response)
                faithful &= e["received"].encode("utf-8") == journaled
    retried = sum(1 for r in results for e in r.transcript.events if e.get("kind") == "call" and e["tool"] == "transfer") - 10
    ok = (
        rep.trials_with_duplicates == 0
        and per_trial_transfers == [1] * 10
        and replays == retried == 10
        and faithful
        and all(r.transcript.status == "completed" for r in results)
    )
    report(3, ok, f"fence on: 0/10 duplicated={rep.trials_with_duplicates == 0}, bank transfer requests {per_trial_transfers}, "
                  f"{replays}/{retried} retries replayed byte-identical={faithful}")


def test_criterion_4_chainability():
    rows = []
    ok = True
    for k in range(6):
        off = run_with_results(preset(f"A/k={k}/no-fence"))[1]
        on = run_with_results(preset(f"A/k={k}/fence"))[1]
        t_off = {len(r.testbed.bank.state.transactions) for r in off}
        t_on = {len(r.testbed.bank.state.transactions) for r in on}
        ok &= t_off == {k + 1} and t_on == {1}
        rows.append(f"k={k}: off={sorted(t_off)} on={sorted(t_on)}")
    report(4, ok, "; ".join(rows))


def test_criterion_5_authority_resurrection_reproduction():
    stateless = run_with_results(preset("B/stateless/no-fence"))
    stateful = run_with_results(preset("B/stateful/no-fence"))
    cross = [
        sum(1 for d in r.testbed.approval.state.deletions if d["target"] != d["granted_target"]) for r in stateless[1]
    ]
    ok = stateless[0].token_reuse_successes == 2 and cross == [1, 1] and stateful[0].token_reuse_successes == 0
    report(5, ok, f"stateless: {stateless[0].token_reuse_successes}/2 cross-target deletions succeeded; "
                  f"stateful: {stateful[0].token_reuse_successes}/2")


def test_criterion_6_credential_reuse_blocked_before_upstream():
    rep, results = run_with_results(preset("B/stateless/fence"))
    counters = [r.testbed.approval.counters["delete_data"] for r in results]
    blocks = [r.transcript.outcomes().count("BlockedCredentialReuse") for r in results]
    # Each trial makes one legitimate delete; the blocked retry must not reach the server.
    ok = rep.token_reuse_successes == 0 and counters == [1, 1] and blocks == [1, 1]
    report(6, ok, f"fence on: {rep.token_reuse_successes}/2 reuse, delete_data requests per trial {counters}, blocks {blocks}")


def test_criterion_7_divergence_forces_fork(tmp_path, capsys):
    testbed = make_testbed(42, crash_cycles=1)
    servers = {}
    for name, s in testbed.servers.items():
        servers[name] = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(s.handle))
        servers[name].start_background()
    policy_path = tmp_path / "policies.json"
    policy_path.write_text(json.dumps(default_policies().to_dict()))
    proxy = ProxyServer(
        FenceConfig(
            upstreams={n: {"url": h.url + "/mcp"} for n, h in servers.items()},
            journal_path=tmp_path / "journal",
            policy_path=policy_path,
            listen={"transport": "http", "host": "127.0.0.1", "port": 0},
            control={"host": "127.0.0.1", "port": 0},
        )
    )
    proxy.start()
    fork_exit = []

    def operator(session, token, data):
        code = cli_main(["fork", "--control", proxy.control_url, "--session", session, "--token", token, "--branch", "approved"])
        fork_exit.append(code)
        return "approved" if code == 0 else None

    try:
        agent = ScriptedAgent(
            [Step.from_dict(s) for s in ACTION_REPLAY],
            HttpChannel(proxy.data_url, "div"),
            ResynthesisModel(intent_mutation={"tool": "transfer", "path": "recipient", "value": "Carol"}, seed=42),
            session_id="div",
            control=ControlClient(proxy.control_url),
            checkpoint_step=ACTION_REPLAY_CHECKPOINT,
            on_fork=operator,
        )
        tr = agent.run()
        lineage = capsys.readouterr().out
    finally:
        proxy.stop()
        for h in servers.values():
            h.stop()
    recipients = sorted(t["recipient"] for t in testbed.bank.state.transactions)
    outcomes = tr.outcomes()
    ok = (
        "BlockedForkRequired" in outcomes
        and fork_exit == [0]
        and "approved\tparent=b0" in lineage
        and recipients == ["Bob", "Carol"]
        and tr.status == "completed"
    )
    report(7, ok, f"outcomes {outcomes}; fork CLI exit {fork_exit}; transfers to {recipients}")


CRASH_PROXY = """
import sys
from acrfence.cli import main
sys.exit(main(["serve", "--config", sys.argv[1]]))
"""


def test_criterion_8_durability(tmp_path):
    # (a) proxy killed while the upstream holds an irreversible call.
    arrived, release = threading.Event(), threading.Event()
    bank = BankServer()

    def slow(frame):
        msg = decode_message(frame)
        if msg.method == "tools/call":
            arrived.set()
            release.wait(20)
        return bank.handle(frame)

    approval = ApprovalServer()
    up_bank = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(slow))
    up_appr = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(approval.handle))
    for h in (up_bank, up_appr):
        h.start_background()
    (tmp_path / "p.json").write_text(json.dumps(default_policies().to_dict()))
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({
        "upstreams": {"bank": {"url": up_bank.url + "/mcp"}, "approval": {"url": up_appr.url + "/mcp"}},
        "journal_path": "journal", "policy_path": "p.json", "listen": {"port": 0}, "control": {"port": 0},
    }))

    def start():
        proc = subprocess.Popen([sys.executable, "-c", CRASH_PROXY, str(cfg)], stdout=subprocess.PIPE, stderr=subprocess.DEVNULL)
        m = re.search(r"data=(\S+) control=(\S+)", proc.stdout.readline().decode())
        return proc, m.group(1), m.group(2)

    try:
        proc, data, _ = start()
        ch = HttpChannel(data, "s")
        token = ch.send("approval", tool_call_request(1, "grant_token", {"action": "delete_data", "target": "Alice", "approver": "m"})).result["structuredContent"]["token"]
        ch.send("approval", tool_call_request(2, "delete_data", {"target": "Alice", "token": token}))
        t = threading.Thread(target=lambda: _quiet(ch.send, "bank", tool_call_request(3, "transfer", {"amount": 1, "recipient": "Bob", "reference_id": "r"})), daemon=True)
        t.start()
        assert arrived.wait(20)
        proc.kill()
        proc.wait(10)
        release.set()
        log = EffectLog(tmp_path / "journal", readonly=True)
        pending = log.find_at_position("s", ["b0"], 2)
        a_ok = pending is not None and pending.outcome is Outcome.UNKNOWN

        # (b) consumption survives the restart, enforced by the new process.
        proc, data, _ = start()
        try:
            r = HttpChannel(data, "s2").send("approval", tool_call_request(1, "delete_data", {"target": "Bob", "token": token}))
        finally:
            proc.terminate()
            proc.wait(10)
        b_ok = (
            EffectLog(tmp_path / "journal", readonly=True).is_consumed(token)
            and r.error is not None and r.error["data"][SIDE_CHANNEL]["outcome"] == "BlockedCredentialReuse"
            and approval.counters["delete_data"] == 1
        )
    finally:
        release.set()
        up_bank.stop()
        up_appr.stop()

    # (c) identity uniqueness over 10,000 randomized appends.
    rng = random.Random(8)
    path = tmp_path / "uniq"
    ulog = EffectLog(path, fsync=False)
    pol = ToolPolicy("op")
    accepted, dup_ok = set(), True
    for i in range(10_000):
        key = (rng.choice("xyz"), rng.choice(["b0", "b1"]), rng.randrange(2500))
        try:
            ulog.append_pending(ToolCall(*key, "op", {"i": i}, i), pol, {})
            dup_ok &= key not in accepted
            accepted.add(key)
        except DuplicateKey:
            dup_ok &= key in accepted
    ulog.close()
    keys = [r.key for r in EffectLog(path).records()]
    c_ok = dup_ok and len(keys) == len(set(keys)) == len(accepted) and 0 < len(accepted) < 10_000

    report(8, a_ok and b_ok and c_ok,
           f"(a) Unknown record after kill={a_ok} (b) consumption after restart={b_ok} "
           f"(c) {len(accepted)} unique identities over 10000 appends={c_ok}")


def _quiet(fn, *a):
    try:
        fn(*a)
    except Exception:
        pass


def test_criterion_9_classifier_properties():
    start = time.monotonic()
    rng = random.Random(99)
    never = lambda t: False  # noqa: E731
    n = 1000
    counts = dict.fromkeys(["determinism", "volatile", "intent", "credential", "partition"], 0)

    old, new = g.args(rng), g.args(rng)
    want = classify(g.tool_call(new), g.record(old), g.POLICY, never).to_dict()
    repeats_ok = all(classify(g.tool_call(new), g.record(old), g.POLICY, never).to_dict() == want for _ in range(1000))

    for _ in range(n):
        old, new = g.args(rng), g.args(rng)
        cand = g.record(old)
        shuffled = json.loads(json.dumps(new), object_pairs_hook=lambda kv: dict(reversed(kv)))
        if classify(g.tool_call(new), cand, g.POLICY, never).to_dict() == classify(g.tool_call(shuffled), cand, g.POLICY, never).to_dict():
            counts["determinism"] += 1

        old = g.args(rng)
        if classify(g.tool_call(g.volatile_variant(rng, old)), g.record(old), g.POLICY, never).kind is VerdictKind.REPLAY_EQUIVALENT:
            counts["volatile"] += 1

        old = g.args(rng)
        old["amount"] = rng.randrange(1, 1000)
        changed, path = g.intent_variant(rng, g.volatile_variant(rng, old))
        v = classify(g.tool_call(changed), g.record(old), g.POLICY, never)
        if v.kind is VerdictKind.DIVERGENT and path in v.diff.changed_intent_paths:
            counts["intent"] += 1

        tok = f"t{rng.getrandbits(40)}"
        old = g.args(rng, token=tok)
        cand = rng.choice([g.record(old), g.record(old, tool="x"), None])
        if classify(g.tool_call(g.args(rng, token=tok)), cand, g.POLICY, lambda t: t == tok).kind is VerdictKind.CREDENTIAL_REUSE:
            counts["credential"] += 1

        old, new = g.args(rng), g.args(rng)
        d = diff_arguments(old, new, g.POLICY)
        flat = d.equal_intent + d.changed_intent_paths + d.changed_volatile + d.added + d.removed
        if len(flat) == len(set(flat)) and set(flat) == set(leaves(old)) | set(leaves(new)):
            counts["partition"] += 1
    elapsed = time.monotonic() - start
    ok = repeats_ok and all(c == n for c in counts.values()) and elapsed < 60
    report(9, ok, f"1000 repeats stable={repeats_ok}; per-property passes {counts} of {n}; {elapsed:.2f}s")


def test_criterion_10_null_interference():
    mismatches = []
    irreversible = 0
    for i in range(20):
        rng = random.Random(500 + i)
        steps = [Step.from_dict(s) for s in random_script(rng, rng.randrange(4, 10))]
        direct_bed, fenced_bed = make_testbed(i), make_testbed(i)
        direct = ScriptedAgent(steps, DirectChannel(direct_bed.servers), ResynthesisModel(text_jitter=0.5, seed=i), session_id="n").run()
        from acrfence.fence import Fence
        from acrfence.transport import LocalUpstream

        fence = Fence(EffectLog(None), default_policies(), {n: LocalUpstream(n, s.handle) for n, s in fenced_bed.servers.items()})
        fenced = ScriptedAgent(steps, FenceChannel(fence, "n"), ResynthesisModel(text_jitter=0.5, seed=i), session_id="n").run()
        same_effects = direct_bed.effects() == fenced_bed.effects()
        irreversible += len(fence.log)
        same_results = [e.get("result") for e in direct.events] == [e.get("result") for e in fenced.events]
        if not (same_effects and same_results and direct.status == fenced.status == "completed"):
            mismatches.append(i)
    report(10, not mismatches and irreversible > 20,
           f"20 random scripts ({irreversible} irreversible calls journaled), fenced vs direct server effects "
           f"identical; mismatches {mismatches}")
