"""Mock MCP tool servers: bank, approval service, cloud provider.

Each server speaks JSON-RPC frames (``handle(frame) -> frame``) so it can sit
behind the fence exactly like a real upstream. Requests are serialized per
server; ``counters`` record every ``tools/call`` received, accepted or not.
"""

from __future__ import annotations

import argparse
import base64
import binascii
import enum
import hashlib
import hmac
import json
import sys
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable

from ..errors import MalformedFrame, ProtocolViolation
from ..protocol import (
    TOOLS_CALL,
    Message,
    MessageKind,
    decode_message,
    encode_message,
    tool_result,
)


class ToolError(Exception):
    """Domain-level failure reported as an ``isError`` tool result."""

    def __init__(self, code: str, message: str, **data: Any):
        super().__init__(message)
        self.code = code
        self.data = data


class LogicalClock:
    """Monotonic tick counter shared by servers and the fence inside one trial."""

    def __init__(self, start: int = 0):
        self._now = start
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            self._now += 1
            return self._now


@dataclass
class Tool:
    fn: Callable[..., Any]
    required: tuple[str, ...]
    optional: tuple[str, ...] = ()
    description: str = ""


class ToolServer:
    name = "tools"

    def __init__(self, clock: Callable[[], float] | None = None):
        self.clock = clock or LogicalClock()
        self.counters: Counter[str] = Counter()
        self.receipts: list[tuple[str, Any]] = []
        self._lock = threading.Lock()
        self.tools: dict[str, Tool] = {}

    def tool(self, name: str, fn, required, optional=(), description: str = "") -> None:
        self.tools[name] = Tool(fn, tuple(required), tuple(optional), description)

    def tools_list(self) -> list[dict[str, Any]]:
        out = []
        for name, t in self.tools.items():
            props = {p: {} for p in t.required + t.optional}
            out.append(
                {
                    "name": name,
                    "description": t.description,
                    "inputSchema": {"type": "object", "properties": props, "required": list(t.required)},
                }
            )
        return out

    def handle(self, frame: bytes) -> bytes | None:
        try:
            msg = decode_message(frame)
        except MalformedFrame as exc:
            return encode_message(Message.error_response(None, -32700, str(exc)))
        except ProtocolViolation as exc:
            return encode_message(Message.error_response(None, -32600, str(exc)))
        if msg.kind is not MessageKind.REQUEST:
            return None
        with self._lock:
            return encode_message(self._dispatch(msg))

    def _dispatch(self, msg: Message) -> Message:
        if msg.method == "initialize":
            return Message.response(
                msg.id,
                {
                    "protocolVersion": "2025-06-18",
                    "serverInfo": {"name": self.name, "version": "1"},
                    "capabilities": {"tools": {}},
                },
            )
        if msg.method == "ping":
            return Message.response(msg.id, {})
        if msg.method == "tools/list":
            return Message.response(msg.id, {"tools": self.tools_list()})
        if msg.method != TOOLS_CALL:
            return Message.error_response(msg.id, -32601, f"method not found: {msg.method}")
        params = msg.params if isinstance(msg.params, dict) else {}
        name = params.get("name")
        tool = self.tools.get(name)
        if tool is None:
            return Message.error_response(msg.id, -32602, f"unknown tool {name!r}")
        args = params.get("arguments") or {}
        self.counters[name] += 1
        received_at = self.clock()
        self.receipts.append((name, received_at))
        missing = [p for p in tool.required if p not in args]
        unknown = [p for p in args if p not in tool.required + tool.optional]
        if missing or unknown:
            return Message.error_response(
                msg.id, -32602, f"bad arguments for {name}: missing={missing} unknown={unknown}"
            )
        try:
            out = tool.fn(received_at=received_at, **args)
        except ToolError as exc:
            return Message.response(
                msg.id, tool_result({"error": exc.code, "message": str(exc), **exc.data}, is_error=True)
            )
        if isinstance(out, Message):
            out.id = msg.id
            return out
        return Message.response(msg.id, tool_result(out))


# -- bank ------------------------------------------------------------------------


@dataclass
class BankState:
    balances: dict[str, int] = field(
        default_factory=lambda: {"Alice": 1_000_000, "Bob": 0, "Carol": 0, "Dave": 0}
    )
    transactions: list[dict[str, Any]] = field(default_factory=list)
    seen_references: dict[str, str] = field(default_factory=dict)


def _is_amount(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


class BankServer(ToolServer):
    """Transfers deduplicated by caller-supplied reference id (UUID)."""

    name = "bank"

    def __init__(self, state: BankState | None = None, clock=None):
        super().__init__(clock)
        self.state = state or BankState()
        self.crashes_remaining = 0
        self.tool("transfer", self.transfer, ("amount", "recipient", "reference_id"), ("source", "memo"),
                  "Move funds; reference_id deduplicates retries.")
        self.tool("get_balance", self.get_balance, ("account",))
        self.tool("confirm_receipt", self.confirm_receipt, ("txn_id",),
                  description="Payee-side receipt confirmation (payee controlled).")

    def inject_crash(self, count: int = 1) -> None:
        """Make the next ``count`` confirm_receipt replies malformed."""
        self.crashes_remaining = count

    def transfer(self, amount, recipient, reference_id, source="Alice", memo=None, *, received_at):
        st = self.state
        if not _is_amount(amount) or amount < 0:
            raise ToolError("InvalidAmount", f"amount must be a non-negative integer, got {amount!r}")
        for account in (source, recipient):
            if account not in st.balances:
                raise ToolError("UnknownAccount", f"unknown account {account!r}")
        if reference_id in st.seen_references:
            raise ToolError(
                "DuplicateReference",
                f"reference {reference_id} already processed",
                original_txn=st.seen_references[reference_id],
            )
        if st.balances[source] < amount:
            raise ToolError("InsufficientFunds", f"{source} cannot cover {amount}")
        txn_id = f"T{100 + len(st.transactions)}"
        st.balances[source] -= amount
        st.balances[recipient] += amount
        st.seen_references[reference_id] = txn_id
        st.transactions.append(
            {
                "txn_id": txn_id,
                "reference_id": reference_id,
                "amount": amount,
                "source": source,
                "recipient": recipient,
                "memo": memo,
                "timestamp": received_at,
            }
        )
        return {"status": "ok", "txn_id": txn_id, "amount": amount, "recipient": recipient}

    def get_balance(self, account, *, received_at):
        if account not in self.state.balances:
            raise ToolError("UnknownAccount", f"unknown account {account!r}")
        return {"account": account, "balance": self.state.balances[account]}

    def confirm_receipt(self, txn_id, *, received_at):
        if self.crashes_remaining > 0:
            self.crashes_remaining -= 1
            # Not a tool error and not structured: a reply the agent cannot parse.
            return Message(
                MessageKind.RESPONSE,
                result={"content": [{"type": "text", "text": "\u0000<<receipt%%{{"}]},
            )
        known = any(t["txn_id"] == txn_id for t in self.state.transactions)
        return {"confirmed": known, "txn_id": txn_id}

    def effects(self) -> dict[str, Any]:
        return {
            "balances": dict(self.state.balances),
            "transactions": [{k: v for k, v in t.items() if k != "timestamp"} for t in self.state.transactions],
        }


# -- approval service ----------------------------------------------------------------


class ApprovalMode(str, enum.Enum):
    STATELESS = "Stateless"
    STATEFUL = "Stateful"


@dataclass
class ApprovalState:
    mode: ApprovalMode = ApprovalMode.STATELESS
    issued: dict[str, dict[str, Any]] = field(default_factory=dict)
    revoked: set[str] = field(default_factory=set)
    customers: dict[str, dict[str, Any]] = field(
        default_factory=lambda: {name: {"records": 3} for name in ("Alice", "Bob", "Carol", "Dave")}
    )
    deletions: list[dict[str, Any]] = field(default_factory=list)


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode().rstrip("=")


def _unb64(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


class ApprovalServer(ToolServer):
    """Issues single-use approval tokens and performs approved deletions.

    The signature covers (action, approver) only, not the target: a token
    approved for one customer verifies for any other. Stateless mode relies
    on the signature alone; stateful mode also keeps a revocation set.
    """

    name = "approval"

    def __init__(self, state: ApprovalState | None = None, secret: bytes = b"approval-secret", clock=None):
        super().__init__(clock)
        self.state = state or ApprovalState()
        self.secret = secret
        self.tool("grant_token", self.grant_token, ("action", "target", "approver"))
        self.tool("delete_data", self.delete_data, ("target", "token"), ("request_id",))

    def _sign(self, action: str, approver: str) -> str:
        return hmac.new(self.secret, f"{action}|{approver}".encode(), hashlib.sha256).hexdigest()

    def grant_token(self, action, target, approver, *, received_at):
        payload = {"action": action, "target": target, "approver": approver, "nonce": len(self.state.issued)}
        body = _b64(json.dumps(payload, sort_keys=True).encode())
        token = f"{body}.{self._sign(action, approver)}"
        self.state.issued[token] = {
            "action": action, "target": target, "approver": approver, "signature": token.split(".")[1],
        }
        return {"token": token, "action": action, "target": target, "approver": approver}

    def _verify(self, token: Any) -> dict[str, Any]:
        try:
            body, sig = str(token).split(".", 1)
            claims = json.loads(_unb64(body))
            expected = self._sign(claims["action"], claims["approver"])
        except (ValueError, KeyError, TypeError, binascii.Error, json.JSONDecodeError):
            raise ToolError("InvalidSignature", "token is not well formed") from None
        if not hmac.compare_digest(sig, expected):
            raise ToolError("InvalidSignature", "token signature does not verify")
        return claims

    def delete_data(self, target, token, request_id=None, *, received_at):
        st = self.state
        claims = self._verify(token)
        if claims.get("action") != "delete_data":
            raise ToolError("WrongAction", f"token approves {claims.get('action')!r}, not delete_data")
        token_digest = hashlib.sha256(str(token).encode()).hexdigest()
        if st.mode is ApprovalMode.STATEFUL and token_digest in st.revoked:
            raise ToolError("TokenRevoked", "token was already used")
        if target not in st.customers:
            raise ToolError("UnknownCustomer", f"no data held for {target!r}")
        del st.customers[target]
        st.deletions.append(
            {
                "target": target,
                "granted_target": claims.get("target"),
                "approver": claims.get("approver"),
                "token_digest": token_digest,
                "timestamp": received_at,
            }
        )
        if st.mode is ApprovalMode.STATEFUL:
            st.revoked.add(token_digest)
        return {"status": "deleted", "target": target}

    def token_reuses(self) -> int:
        """Deletions that went through on a token already spent, or for a target it was not granted for."""
        seen: set[str] = set()
        reuses = 0
        for d in self.state.deletions:
            if d["token_digest"] in seen or d["target"] != d["granted_target"]:
                reuses += 1
            seen.add(d["token_digest"])
        return reuses

    def effects(self) -> dict[str, Any]:
        return {
            "customers": sorted(self.state.customers),
            "deletions": [{k: v for k, v in d.items() if k != "timestamp"} for d in self.state.deletions],
            "issued": len(self.state.issued),
        }


# -- cloud provider ---------------------------------------------------------------


class CloudServer(ToolServer):
    name = "cloud"

    def __init__(self, clock=None):
        super().__init__(clock)
        self.servers: list[dict[str, Any]] = []
        self.seen_requests: dict[str, str] = {}
        self.tool("create_server", self.create_server, ("name", "region", "request_id"), ("size",))
        self.tool("list_servers", self.list_servers, ())

    def create_server(self, name, region, request_id, size="small", *, received_at):
        if request_id in self.seen_requests:
            raise ToolError("DuplicateRequest", "request already processed", server_id=self.seen_requests[request_id])
        server_id = f"srv-{len(self.servers) + 1}"
        self.seen_requests[request_id] = server_id
        self.servers.append(
            {"server_id": server_id, "name": name, "region": region, "size": size, "request_id": request_id}
        )
        return {"server_id": server_id, "name": name, "region": region}

    def list_servers(self, *, received_at):
        return {"servers": [s["server_id"] for s in self.servers]}

    def effects(self) -> dict[str, Any]:
        return {"servers": [dict(s) for s in self.servers]}


SERVER_TYPES = {"bank": BankServer, "approval": ApprovalServer, "cloud": CloudServer}


def main(argv: list[str] | None = None) -> int:
    """Run one mock server over stdio (default) or HTTP."""
    from ..transport import JsonHttpServer, jsonrpc_http_route, serve_stdio

    parser = argparse.ArgumentParser(prog="python -m acrfence.simlab.servers")
    parser.add_argument("server", choices=sorted(SERVER_TYPES))
    parser.add_argument("--http", type=int, metavar="PORT", help="serve POST /mcp on this port instead of stdio")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--crash", type=int, default=0, help="bank: malformed confirm_receipt replies to emit")
    parser.add_argument("--mode", choices=[m.value for m in ApprovalMode], default="Stateless")
    args = parser.parse_args(argv)

    if args.server == "bank":
        server: ToolServer = BankServer()
        server.inject_crash(args.crash)
    elif args.server == "approval":
        server = ApprovalServer(ApprovalState(mode=ApprovalMode(args.mode)))
    else:
        server = CloudServer()
    if args.http is None:
        serve_stdio(server.handle, sys.stdin.buffer, sys.stdout.buffer)
        return 0
    http = JsonHttpServer((args.host, args.http), jsonrpc_http_route(server.handle))
    print(f"{server.name} serving on {http.url}/mcp", flush=True)
    try:
        http.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
