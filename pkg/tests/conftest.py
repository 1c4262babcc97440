import json

import pytest

from acrfence.effectlog import EffectLog
from acrfence.fence import Fence
from acrfence.protocol import decode_message, encode_message, tool_call_request
from acrfence.simlab.scenarios import default_policies, make_testbed
from acrfence.transport import LocalUpstream


class Rig:
    """A fence wired to in-process mock servers, plus a tiny agent-side helper."""

    def __init__(self, log=None, policies=None, crash=0, **fence_kw):
        self.testbed = make_testbed(7, crash_cycles=crash)
        self.log = log if log is not None else EffectLog(None)
        ups = {n: LocalUpstream(n, s.handle) for n, s in self.testbed.servers.items()}
        self.fence = Fence(self.log, policies or default_policies(), ups, clock=self.testbed.clock, **fence_kw)
        self.wire = 0

    @property
    def bank(self):
        return self.testbed.bank

    @property
    def approval(self):
        return self.testbed.approval

    def call(self, tool, args, session="s", upstream=None, wire_id=None):
        if upstream is None:
            upstream = {"transfer": "bank", "get_balance": "bank", "confirm_receipt": "bank"}.get(tool, "approval")
            if tool in ("create_server", "list_servers"):
                upstream = "cloud"
        if wire_id is None:
            self.wire += 1
            wire_id = self.wire
        return self.fence.handle_call(session, tool_call_request(wire_id, tool, args), upstream=upstream)

    def frame(self, tool, args, session="s", upstream="bank", wire_id=1):
        raw = encode_message(tool_call_request(wire_id, tool, args))
        return decode_message(self.fence.handle_message(session, raw, upstream=upstream))


@pytest.fixture
def rig():
    return Rig()


@pytest.fixture
def make_rig():
    return Rig


def transfer_args(recipient="Bob", amount=50000, ref="ref-1", memo="payment for invoice 42"):
    return {"amount": amount, "recipient": recipient, "reference_id": ref, "memo": memo}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
