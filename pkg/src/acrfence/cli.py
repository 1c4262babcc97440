"""Command-line entry point: ``acrfence serve|scenario|log|fork|report``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import tempfile
import threading
from pathlib import Path
from typing import Sequence

from .effectlog import EffectLog
from .errors import (
    AcrFenceError,
    BindFailure,
    ConfigError,
    NoPendingFork,
    ScenarioMalformed,
    StorageFailure,
    TokenMismatch,
    UpstreamUnreachable,
)
from .proxy import ControlClient, ProxyServer, load_config
from .protocol import canonical_json

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_STARTUP = 3

CONFIG_ENV = "ACRFENCE_CONFIG"


def _err(msg: str) -> None:
    print(f"acrfence: {msg}", file=sys.stderr)


# -- serve --------------------------------------------------------------------------


def cmd_serve(args: argparse.Namespace) -> int:
    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        _err(f"no config given (use --config or set {CONFIG_ENV})")
        return EXIT_CONFIG
    try:
        config = load_config(path, args.set)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    stop = threading.Event()
    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, lambda *_: stop.set())
    server = ProxyServer(config)
    try:
        server.start()
    except (UpstreamUnreachable, BindFailure) as exc:
        _err(f"startup failed: {exc}")
        return EXIT_STARTUP
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except StorageFailure as exc:
        _err(f"journal unusable: {exc}")
        server.stop()
        return EXIT_STARTUP
    stdio = server.data_server is None
    # In stdio mode stdout carries frames, so the banner goes to stderr.
    print(server.banner(), file=sys.stderr if stdio else sys.stdout, flush=True)
    try:
        if stdio:
            server.serve_stdio(sys.stdin.buffer, sys.stdout.buffer)
        else:
            while not stop.wait(0.5):
                pass
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# -- scenario / report ----------------------------------------------------------------


def cmd_scenario(args: argparse.Namespace) -> int:
    from .simlab.scenarios import format_table, load_suite, reports_json, run_scenario_suite

    try:
        configs = load_suite(args.source)
    except (ConfigError, ScenarioMalformed) as exc:
        _err(f"scenario config error: {exc}")
        return EXIT_CONFIG
    if args.workdir:
        workdir = Path(args.workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        reports = run_scenario_suite(configs, workdir=workdir, replay_enabled=not args.disable_replay)
    else:
        with tempfile.TemporaryDirectory(prefix="acrfence-") as tmp:
            reports = run_scenario_suite(configs, workdir=Path(tmp), replay_enabled=not args.disable_replay)
    sys.stdout.write(format_table(reports))
    if args.json_out:
        Path(args.json_out).write_text(reports_json(reports), encoding="utf-8")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_report(args: argparse.Namespace) -> int:
    from .simlab.scenarios import ScenarioReport, format_table

    try:
        doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
        reports = [ScenarioReport.from_dict(r) for r in doc["reports"]]
    except (OSError, ValueError, KeyError, TypeError, ScenarioMalformed) as exc:
        _err(f"cannot read report {args.report}: {exc}")
        return EXIT_CONFIG
    sys.stdout.write(format_table(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


# -- log inspect ------------------------------------------------------------------------

LOG_HEADER = "record\tsession\tbranch\tseq\ttool\toutcome\tcredentials\targuments"


def format_journal(log: EffectLog, session: str | None, branch: str | None, tool: str | None) -> str:
    out = [LOG_HEADER]
    recs = log.records(session, branch, tool)
    for r in recs:
        creds = ",".join(d[:19] for d in r.consumed_credentials) or "-"
        out.append(
            "\t".join(
                [
                    str(r.record_id),
                    r.session_id,
                    r.branch_id,
                    str(r.seq_index),
                    r.tool_name,
                    r.outcome.value,
                    creds,
                    canonical_json(r.arguments).decode("utf-8"),
                ]
            )
        )
    shown = {r.record_id for r in recs}
    consumed = [c for c in log.consumed() if c.consumed_by in shown]
    if consumed:
        out.append("")
        out.append("credential cross-reference")
        blocked = log.blocked()
        for c in consumed:
            owner = log.get(c.consumed_by)
            top = c.source_field.split(".")[0]
            owner_args = {k: v for k, v in owner.arguments.items() if k != top}
            out.append(
                f"{c.digest}  field={c.source_field or '-'}  consumed_by=record {c.consumed_by} "
                f"({owner.session_id}/{owner.branch_id} seq {owner.seq_index} {owner.tool_name} "
                f"{canonical_json(owner_args).decode('utf-8')})"
            )
            for b in blocked:
                if c.digest in b.get("reused_digests", []):
                    out.append(
                        f"    reuse blocked: {b.get('session_id')}/{b.get('branch_id')} "
                        f"seq {b.get('seq_index')} {b.get('tool_name')} "
                        f"{canonical_json(b.get('arguments', {})).decode('utf-8')}"
                    )
    return "\n".join(out) + "\n"


def cmd_log(args: argparse.Namespace) -> int:
    try:
        log = EffectLog(args.journal, readonly=True)
    except StorageFailure as exc:
        _err(f"cannot read journal: {exc}")
        return EXIT_CONFIG
    sys.stdout.write(format_journal(log, args.session, args.branch, args.tool))
    return EXIT_OK


# -- fork ------------------------------------------------------------------------------


def cmd_fork(args: argparse.Namespace) -> int:
    client = ControlClient(args.control)
    try:
        lineage = client.approve_fork(args.session, args.token, args.branch)
    except (TokenMismatch, NoPendingFork) as exc:
        _err(f"fork refused: {type(exc).__name__}: {exc}")
        return EXIT_FAIL
    except UpstreamUnreachable as exc:
        _err(str(exc))
        return EXIT_STARTUP
    except AcrFenceError as exc:
        _err(f"fork refused: {type(exc).__name__}: {exc}")
        return EXIT_FAIL
    for link in lineage:
        parent = link.get("parent") or "-"
        at = link.get("forked_from_seq")
        print(f"{link['branch_id']}\tparent={parent}\tforked_from_seq={'-' if at is None else at}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acrfence", description="Replay-or-fork fence for agent tool calls.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the proxy")
    p.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("scenario", help="run simulated attack scenarios")
    p.add_argument("source", help="preset name (paper-repro, chain, divergence) or a scenario JSON file")
    p.add_argument("--workdir", help="keep journals here instead of a temp dir")
    p.add_argument("--json-out", help="also write the full report as JSON")
    p.add_argument("--disable-replay", action="store_true", help="block every restored call (ablation)")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("report", help="render a saved scenario report")
    p.add_argument("report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("log", help="journal tools")
    logsub = p.add_subparsers(dest="log_command", required=True)
    q = logsub.add_parser("inspect", help="list journaled effects and credential use")
    q.add_argument("journal")
    q.add_argument("--session")
    q.add_argument("--branch")
    q.add_argument("--tool")
    q.set_defaults(func=cmd_log)

    p = sub.add_parser("fork", help="approve a pending fork")
    p.add_argument("--control", required=True, help="control surface URL")
    p.add_argument("--session", required=True)
    p.add_argument("--token", required=True)
    p.add_argument("--branch", required=True, help="id for the new branch")
    p.set_defaults(func=cmd_fork)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
