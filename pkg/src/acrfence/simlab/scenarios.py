"""Scenario configs, presets, the trial runner, and the report table.

Every number in a report is read off the mock servers' own state after the
trial, never from what the fence or the agent claims happened.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from ..effectlog import EffectLog
from ..errors import ConfigError, ScenarioMalformed
from ..fence import Fence
from ..policy import PolicySet, ToolPolicy
from ..protocol import canonical_json
from ..proxy import ControlClient, FenceConfig, LocalControl, ProxyServer
from ..transport import JsonHttpServer, LocalUpstream, jsonrpc_http_route
from .agent import DirectChannel, FenceChannel, HttpChannel, ResynthesisModel, ScriptedAgent, Step, Transcript
from .servers import ApprovalMode, ApprovalServer, ApprovalState, BankServer, CloudServer, LogicalClock

# -- scripts & policies -----------------------------------------------------------

ACTION_REPLAY = [
    {"tool": "get_balance", "upstream": "bank", "args": {"account": "Alice"}},
    {
        "tool": "transfer",
        "upstream": "bank",
        "args": {
            "amount": 50000,
            "recipient": "Bob",
            "reference_id": {"$uuid": "transfer"},
            "memo": {"$text": "payment for invoice 42"},
        },
        "bind": "receipt",
    },
    {"tool": "confirm_receipt", "upstream": "bank", "args": {"txn_id": {"$var": "receipt.txn_id"}}},
]
ACTION_REPLAY_CHECKPOINT = 1  # after verification (get_balance), before the transfer

AUTHORITY_RESURRECTION = [
    {
        "tool": "grant_token",
        "upstream": "approval",
        "args": {"action": "delete_data", "target": "Alice", "approver": "manager"},
        "bind": "approval",
    },
    {
        "tool": "delete_data",
        "upstream": "approval",
        "args": {"target": "Alice", "token": {"$var": "approval.token"}, "request_id": {"$uuid": "delete"}},
    },
]
AUTHORITY_RESURRECTION_CHECKPOINT = 1  # just after approval was granted

SCRIPTS = {
    "action_replay": (ACTION_REPLAY, ACTION_REPLAY_CHECKPOINT),
    "authority_resurrection": (AUTHORITY_RESURRECTION, AUTHORITY_RESURRECTION_CHECKPOINT),
}


def default_policies() -> PolicySet:
    ps = PolicySet(default=ToolPolicy("*", irreversible=True))
    for p in (
        ToolPolicy("transfer", True, ("amount", "recipient", "source"), ("reference_id", "memo")),
        ToolPolicy("get_balance", False),
        ToolPolicy("confirm_receipt", False),
        ToolPolicy("grant_token", False),
        ToolPolicy("delete_data", True, ("target",), ("request_id",), ("token",)),
        ToolPolicy("create_server", True, ("name", "region", "size"), ("request_id",)),
        ToolPolicy("list_servers", False),
    ):
        ps.add(p)
    return ps


# -- config -------------------------------------------------------------------------

EXPECTATION_KEYS = {
    "trials_with_duplicates",
    "duplicates_observed",
    "token_reuse_successes",
    "transactions_each",
    "transfer_requests_each",
    "delete_requests_each",
    "replayed_each",
    "replays_faithful",
    "credential_blocks_each",
    "fork_blocks_each",
    "recipients_each",
    "write_ahead_ok",
}


@dataclass
class ScenarioConfig:
    name: str
    steps: list[Step]
    checkpoint_step: int | None
    trials: int = 1
    seed: int = 0
    fence: bool = False
    crash_cycles: int = 0
    checkpointing: bool = True
    approval_mode: ApprovalMode = ApprovalMode.STATELESS
    resynth: dict[str, Any] = field(default_factory=dict)
    mutation_values: list[Any] | None = None
    rollback: dict[str, Any] | None = None
    on_fork: str = "abort"
    signal_restore: bool = True
    transport: str = "inproc"
    intended_transfers: int | None = None
    expect: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ScenarioConfig":
        if not isinstance(doc, dict) or "name" not in doc:
            raise ConfigError("each scenario needs a name")
        script = doc.get("script", "action_replay")
        checkpoint = doc.get("checkpoint_step")
        if isinstance(script, str):
            if script not in SCRIPTS:
                raise ConfigError(f"unknown script {script!r}; choose from {sorted(SCRIPTS)}")
            raw_steps, default_cp = SCRIPTS[script]
            if checkpoint is None:
                checkpoint = default_cp
        elif isinstance(script, list):
            raw_steps = script
        else:
            raise ConfigError("script must be a preset name or a list of steps")
        expect = dict(doc.get("expect", {}))
        unknown = set(expect) - EXPECTATION_KEYS
        if unknown:
            raise ConfigError(f"scenario {doc['name']!r}: unknown expectations {sorted(unknown)}")
        try:
            cfg = cls(
                name=str(doc["name"]),
                steps=[Step.from_dict(s) for s in copy.deepcopy(raw_steps)],
                checkpoint_step=checkpoint if doc.get("checkpointing", True) else None,
                trials=int(doc.get("trials", 1)),
                seed=int(doc.get("seed", 0)),
                fence=bool(doc.get("fence", False)),
                crash_cycles=int(doc.get("crash_cycles", 0)),
                checkpointing=bool(doc.get("checkpointing", True)),
                approval_mode=ApprovalMode(doc.get("approval_mode", "Stateless")),
                resynth=dict(doc.get("resynth", {})),
                mutation_values=doc.get("mutation_values"),
                rollback=doc.get("rollback"),
                on_fork=str(doc.get("on_fork", "abort")),
                signal_restore=bool(doc.get("signal_restore", True)),
                transport=str(doc.get("transport", "inproc")),
                intended_transfers=doc.get("intended_transfers"),
                expect=expect,
            )
        except (ValueError, TypeError, ScenarioMalformed) as exc:
            raise ConfigError(f"scenario {doc['name']!r}: {exc}") from None
        if cfg.trials < 0 or cfg.crash_cycles < 0:
            raise ConfigError(f"scenario {cfg.name!r}: trials and crash_cycles must be >= 0")
        if cfg.transport not in ("inproc", "http"):
            raise ConfigError(f"scenario {cfg.name!r}: transport must be inproc or http")
        if cfg.on_fork not in ("abort", "approve"):
            raise ConfigError(f"scenario {cfg.name!r}: on_fork must be abort or approve")
        return cfg

    @property
    def intended(self) -> int:
        if self.intended_transfers is not None:
            return int(self.intended_transfers)
        return sum(1 for s in self.steps if s.tool == "transfer")


# -- presets -------------------------------------------------------------------------


def _a(name, **kw):
    return {"name": name, "script": "action_replay", "trials": 10, "seed": 1000, **kw}


def _b(name, **kw):
    return {
        "name": name,
        "script": "authority_resurrection",
        "trials": 2,
        "seed": 2000,
        "rollback": {"after_step": 1, "count": 1},
        "resynth": {"intent_mutation": {"tool": "delete_data", "path": "target"}},
        "mutation_values": ["Bob", "Carol"],
        **kw,
    }


PRESETS: dict[str, list[dict[str, Any]]] = {
    "paper-repro": [
        _a("A/no-fence", crash_cycles=1, expect={"trials_with_duplicates": 10, "transactions_each": 2}),
        _a("A/baseline", crash_cycles=0, checkpointing=False, expect={"trials_with_duplicates": 0, "transactions_each": 1}),
        _a(
            "A/fence",
            crash_cycles=1,
            fence=True,
            expect={
                "trials_with_duplicates": 0,
                "transactions_each": 1,
                "transfer_requests_each": 1,
                "replayed_each": 1,
                "replays_faithful": True,
                "write_ahead_ok": True,
            },
        ),
        _b("B/stateless/no-fence", expect={"token_reuse_successes": 2}),
        _b(
            "B/stateless/fence",
            fence=True,
            expect={"token_reuse_successes": 0, "delete_requests_each": 1, "credential_blocks_each": 1},
        ),
        _b("B/stateful/no-fence", approval_mode="Stateful", expect={"token_reuse_successes": 0}),
    ],
    "chain": [
        _a(f"A/k={k}/{'fence' if fenced else 'no-fence'}", crash_cycles=k, fence=fenced,
           expect={"transactions_each": 1 if fenced else k + 1})
        for k in range(6)
        for fenced in (False, True)
    ],
    "divergence": [
        _a(
            "A/divergent/fence",
            trials=3,
            crash_cycles=1,
            fence=True,
            on_fork="approve",
            intended_transfers=2,
            resynth={"intent_mutation": {"tool": "transfer", "path": "recipient", "value": "Carol"}},
            expect={"transactions_each": 2, "fork_blocks_each": 1, "recipients_each": {"Bob": 1, "Carol": 1}},
        ),
    ],
}


def load_suite(source: str | Path) -> list[ScenarioConfig]:
    """Resolve a preset name or a JSON suite file ``{"scenarios": [...]}``."""
    if isinstance(source, str) and source in PRESETS:
        docs = PRESETS[source]
    else:
        path = Path(source)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"no preset or readable suite file named {source!r}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"suite file {path} is not valid JSON: {exc}") from None
        docs = doc.get("scenarios") if isinstance(doc, dict) else None
        if not isinstance(docs, list):
            raise ConfigError(f"suite file {path} needs a 'scenarios' list")
    return [ScenarioConfig.from_dict(d) for d in docs]


# -- running -------------------------------------------------------------------------


@dataclass
class Testbed:
    bank: BankServer
    approval: ApprovalServer
    cloud: CloudServer
    clock: LogicalClock

    @property
    def servers(self) -> dict[str, Any]:
        return {"bank": self.bank, "approval": self.approval, "cloud": self.cloud}

    def effects(self) -> dict[str, Any]:
        return {name: s.effects() for name, s in self.servers.items()}

    def counters(self) -> dict[str, dict[str, int]]:
        return {name: dict(sorted(s.counters.items())) for name, s in self.servers.items()}


def make_testbed(seed: int, approval_mode: ApprovalMode = ApprovalMode.STATELESS, crash_cycles: int = 0) -> Testbed:
    clock = LogicalClock()
    secret = hashlib.sha256(f"approval-{seed}".encode()).digest()
    bank = BankServer(clock=clock)
    bank.inject_crash(crash_cycles)
    return Testbed(bank, ApprovalServer(ApprovalState(mode=approval_mode), secret=secret, clock=clock), CloudServer(clock), clock)


@dataclass
class TrialResult:
    trial: int
    seed: int
    transcript: Transcript
    testbed: Testbed
    fence: Fence | None = None
    replays_faithful: bool | None = None
    write_ahead_ok: bool | None = None

    def summary(self, intended: int) -> dict[str, Any]:
        txns = self.testbed.bank.state.transactions
        counters = self.testbed.counters()
        outcomes = self.transcript.outcomes()
        return {
            "trial": self.trial,
            "seed": self.seed,
            "status": self.transcript.status,
            "bank_transactions": len(txns),
            "duplicates": len(txns) - intended,
            "recipients": dict(sorted(Counter(t["recipient"] for t in txns).items())),
            "token_reuse": self.testbed.approval.token_reuses(),
            "deletions": [d["target"] for d in self.testbed.approval.state.deletions],
            "restores": self.transcript.restores,
            "fence_outcomes": outcomes,
            "server_counters": counters,
            "replays_faithful": self.replays_faithful,
            "write_ahead_ok": self.write_ahead_ok,
        }


def _check_write_ahead(log: EffectLog, session_id: str, testbed: Testbed) -> bool:
    """Every bank transaction has a journal record stamped before the bank received it."""
    by_ref = {
        r.arguments.get("reference_id"): r.env_context.get("timestamp")
        for r in log.records(session_id, tool_name="transfer")
    }
    for txn in testbed.bank.state.transactions:
        stamped = by_ref.get(txn["reference_id"])
        if stamped is None or not stamped < txn["timestamp"]:
            return False
    return True


def run_trial(
    cfg: ScenarioConfig,
    trial: int,
    *,
    log: EffectLog | None = None,
    replay_enabled: bool = True,
    workdir: Path | None = None,
    on_fork: Any = None,
    policies: PolicySet | None = None,
) -> TrialResult:
    seed = cfg.seed + trial
    testbed = make_testbed(seed, cfg.approval_mode, cfg.crash_cycles)
    resynth_doc = copy.deepcopy(cfg.resynth)
    if cfg.mutation_values:
        mut = dict(resynth_doc.get("intent_mutation") or {})
        mut["value"] = cfg.mutation_values[trial % len(cfg.mutation_values)]
        resynth_doc["intent_mutation"] = mut
    resynth = ResynthesisModel.from_dict(resynth_doc, seed)
    session_id = f"{cfg.name}/trial-{trial}"
    policies = policies or default_policies()
    agent_kw = dict(
        session_id=session_id,
        checkpoint_step=cfg.checkpoint_step,
        crash_restore=cfg.checkpointing,
        signal_restore=cfg.signal_restore,
        rollback=cfg.rollback,
        on_fork=on_fork if on_fork is not None else cfg.on_fork,
    )

    if not cfg.fence:
        transcript = ScriptedAgent(cfg.steps, DirectChannel(testbed.servers), resynth, **agent_kw).run()
        return TrialResult(trial, seed, transcript, testbed)

    if cfg.transport == "http":
        return _run_http_trial(cfg, trial, seed, testbed, resynth, policies, agent_kw, workdir, replay_enabled)

    if log is None:
        log = EffectLog(None)
    log.clock = testbed.clock
    upstreams = {name: LocalUpstream(name, s.handle) for name, s in testbed.servers.items()}
    fence = Fence(log, policies, upstreams, clock=testbed.clock, host_id="simlab", replay_enabled=replay_enabled)
    fence.open_session(session_id)
    agent = ScriptedAgent(
        cfg.steps, FenceChannel(fence, session_id), resynth, control=LocalControl(fence), **agent_kw
    )
    transcript = agent.run()
    result = TrialResult(trial, seed, transcript, testbed, fence=fence)
    result.replays_faithful = _replays_faithful(fence, transcript)
    result.write_ahead_ok = _check_write_ahead(log, session_id, testbed)
    return result


def _replays_faithful(fence: Fence, transcript: Transcript) -> bool:
    """Compare what the agent actually received on each replay with the journaled bytes."""
    replays = [e for e in transcript.events if e.get("kind") == "call" and e.get("outcome") == "Replayed"]
    for event in replays:
        record = fence.log.get(event["record_id"])
        if event["received"].encode("utf-8") != canonical_json(record.response):
            return False
    return True


def _run_http_trial(cfg, trial, seed, testbed, resynth, policies, agent_kw, workdir, replay_enabled) -> TrialResult:
    servers = {}
    proxy = None
    tmp = None
    try:
        for name, s in testbed.servers.items():
            http = JsonHttpServer(("127.0.0.1", 0), jsonrpc_http_route(s.handle))
            http.start_background()
            servers[name] = http
        if workdir is None:
            tmp = tempfile.TemporaryDirectory(prefix="acrfence-")
            base = Path(tmp.name)
        else:
            base = Path(workdir)
        policy_path = base / f"policies-{trial}.json"
        policy_path.write_text(json.dumps(policies.to_dict(), indent=2))
        config = FenceConfig(
            upstreams={name: {"url": f"{h.url}/mcp"} for name, h in servers.items()},
            journal_path=base / f"{_safe(cfg.name)}-trial-{trial}.journal",
            policy_path=policy_path,
            listen={"transport": "http", "host": "127.0.0.1", "port": 0},
            control={"host": "127.0.0.1", "port": 0},
            fsync=False,
            host_id="simlab",
        )
        proxy = ProxyServer(config)
        proxy.start()
        proxy.fence.replay_enabled = replay_enabled
        session_id = agent_kw["session_id"]
        agent = ScriptedAgent(
            cfg.steps,
            HttpChannel(proxy.data_url, session_id),
            resynth,
            control=ControlClient(proxy.control_url),
            **agent_kw,
        )
        proxy.fence.open_session(session_id)
        transcript = agent.run()
        result = TrialResult(trial, seed, transcript, testbed, fence=proxy.fence)
        result.replays_faithful = _replays_faithful(proxy.fence, transcript)
        return result
    finally:
        if proxy is not None:
            proxy.stop()
        for http in servers.values():
            http.stop()
        if tmp is not None:
            tmp.cleanup()


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


# -- reports --------------------------------------------------------------------------


@dataclass
class ScenarioReport:
    scenario: str
    trials: int
    fence_enabled: bool
    duplicates_observed: int
    trials_with_duplicates: int
    token_reuse_successes: int
    per_trial: list[dict[str, Any]]
    expect: dict[str, Any]
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ScenarioReport":
        try:
            return cls(
                scenario=doc["scenario"],
                trials=int(doc["trials"]),
                fence_enabled=bool(doc["fence_enabled"]),
                duplicates_observed=int(doc["duplicates_observed"]),
                trials_with_duplicates=int(doc["trials_with_duplicates"]),
                token_reuse_successes=int(doc["token_reuse_successes"]),
                per_trial=list(doc.get("per_trial", [])),
                expect=dict(doc.get("expect", {})),
                checks={k: bool(v) for k, v in doc.get("checks", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioMalformed(f"report entry is malformed: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenario": self.scenario,
            "trials": self.trials,
            "fence_enabled": self.fence_enabled,
            "duplicates_observed": self.duplicates_observed,
            "trials_with_duplicates": self.trials_with_duplicates,
            "token_reuse_successes": self.token_reuse_successes,
            "expect": self.expect,
            "checks": self.checks,
            "passed": self.passed,
            "per_trial": self.per_trial,
        }


def _metric(name: str, per_trial: list[dict[str, Any]], totals: dict[str, int]) -> Any:
    def each(fn):
        values = [fn(t) for t in per_trial]
        return values[0] if values and all(v == values[0] for v in values) else values

    outcome_count = lambda kind: each(lambda t: t["fence_outcomes"].count(kind))  # noqa: E731
    table: dict[str, Callable[[], Any]] = {
        "trials_with_duplicates": lambda: totals["trials_with_duplicates"],
        "duplicates_observed": lambda: totals["duplicates_observed"],
        "token_reuse_successes": lambda: totals["token_reuse_successes"],
        "transactions_each": lambda: each(lambda t: t["bank_transactions"]),
        "transfer_requests_each": lambda: each(lambda t: t["server_counters"]["bank"].get("transfer", 0)),
        "delete_requests_each": lambda: each(lambda t: t["server_counters"]["approval"].get("delete_data", 0)),
        "replayed_each": lambda: outcome_count("Replayed"),
        "credential_blocks_each": lambda: outcome_count("BlockedCredentialReuse"),
        "fork_blocks_each": lambda: outcome_count("BlockedForkRequired"),
        "recipients_each": lambda: each(lambda t: t["recipients"]),
        "replays_faithful": lambda: all(t["replays_faithful"] is True for t in per_trial),
        "write_ahead_ok": lambda: all(t["write_ahead_ok"] is True for t in per_trial),
    }
    return table[name]()


def build_report(cfg: ScenarioConfig, results: list[TrialResult]) -> ScenarioReport:
    per_trial = [r.summary(cfg.intended) for r in results]
    totals = {
        "duplicates_observed": sum(max(t["duplicates"], 0) for t in per_trial),
        "trials_with_duplicates": sum(1 for t in per_trial if t["duplicates"] > 0),
        "token_reuse_successes": sum(t["token_reuse"] for t in per_trial),
    }
    checks = {key: _metric(key, per_trial, totals) == want for key, want in sorted(cfg.expect.items())}
    return ScenarioReport(
        scenario=cfg.name,
        trials=cfg.trials,
        fence_enabled=cfg.fence,
        per_trial=per_trial,
        expect=dict(sorted(cfg.expect.items())),
        checks=checks,
        **totals,
    )


def run_scenario(
    cfg: ScenarioConfig,
    *,
    workdir: Path | None = None,
    replay_enabled: bool = True,
    on_fork: Any = None,
    keep_results: list[TrialResult] | None = None,
) -> ScenarioReport:
    log = None
    if cfg.fence and cfg.transport == "inproc":
        path = Path(workdir) / f"{_safe(cfg.name)}.journal" if workdir is not None else None
        log = EffectLog(path, fsync=False)
    try:
        results = [
            run_trial(cfg, i, log=log, replay_enabled=replay_enabled, workdir=workdir, on_fork=on_fork)
            for i in range(cfg.trials)
        ]
    finally:
        if log is not None:
            log.close()
    if keep_results is not None:
        keep_results.extend(results)
    return build_report(cfg, results)


def run_scenario_suite(
    source: str | Path | list[ScenarioConfig],
    *,
    workdir: Path | None = None,
    replay_enabled: bool = True,
) -> list[ScenarioReport]:
    configs = source if isinstance(source, list) else load_suite(source)
    return [run_scenario(c, workdir=workdir, replay_enabled=replay_enabled) for c in configs if c.trials > 0]


def reports_json(reports: list[ScenarioReport]) -> str:
    return json.dumps({"reports": [r.to_dict() for r in reports]}, sort_keys=True, indent=2) + "\n"


def format_table(reports: list[ScenarioReport]) -> str:
    headers = ["scenario", "fence", "trials", "dup trials", "dup total", "token reuse", "result"]
    rows = []
    for r in reports:
        failed = [k for k, ok in r.checks.items() if not ok]
        result = "PASS" if r.passed else "FAIL <- " + ", ".join(failed)
        rows.append(
            [
                r.scenario,
                "on" if r.fence_enabled else "off",
                str(r.trials),
                f"{r.trials_with_duplicates}/{r.trials}",
                str(r.duplicates_observed),
                f"{r.token_reuse_successes}/{r.trials}",
                result,
            ]
        )
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(headers)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()  # noqa: E731
    out = [line(headers), line(["-" * w for w in widths])]
    out += [line(row) for row in rows]
    return "\n".join(out) + "\n"


# -- randomized scripts (null-interference) ----------------------------------------------


def random_script(rng: random.Random, length: int = 6) -> list[dict[str, Any]]:
    """A random mix of reversible and irreversible steps with no checkpoint semantics."""
    steps: list[dict[str, Any]] = []
    customers = ["Alice", "Bob", "Carol", "Dave"]
    rng.shuffle(customers)
    n = 0
    while len(steps) < length:
        choice = rng.choice(["transfer", "balance", "server", "delete", "list"])
        n += 1
        if choice == "transfer":
            steps.append(
                {
                    "tool": "transfer",
                    "upstream": "bank",
                    "args": {
                        "amount": rng.randrange(0, 20000),
                        "recipient": rng.choice(["Bob", "Carol", "Dave"]),
                        "reference_id": {"$uuid": f"t{n}"},
                        "memo": {"$text": "monthly payment for invoice"},
                    },
                }
            )
        elif choice == "balance":
            steps.append({"tool": "get_balance", "upstream": "bank", "args": {"account": rng.choice(["Alice", "Bob"])}})
        elif choice == "server":
            steps.append(
                {
                    "tool": "create_server",
                    "upstream": "cloud",
                    "args": {"name": f"web-{n}", "region": rng.choice(["us-east", "eu-west"]), "request_id": {"$uuid": f"s{n}"}},
                }
            )
        elif choice == "delete" and customers:
            target = customers.pop()
            steps.append(
                {
                    "tool": "grant_token",
                    "upstream": "approval",
                    "args": {"action": "delete_data", "target": target, "approver": "manager"},
                    "bind": f"tok{n}",
                }
            )
            steps.append(
                {
                    "tool": "delete_data",
                    "upstream": "approval",
                    "args": {"target": target, "token": {"$var": f"tok{n}.token"}, "request_id": {"$uuid": f"d{n}"}},
                }
            )
        elif choice == "list":
            steps.append({"tool": "list_servers", "upstream": "cloud", "args": {}})
    return steps
