from contextlib import contextmanager

import pytest

from ttvm import programs
from ttvm.bytecode import Opcode, assemble
from ttvm.tiers import TierPolicy, VmSession
from ttvm.tracer import CallHandler, EmitJump, EmitRet, Guard, GuardFailure

MODES = ("interp", "t1", "t2", "annotated", "auto")

# thresholds low enough that small inputs compile, tier up and grow bridges
EAGER = dict(t1_call_threshold=1, t1_loop_threshold=2, t2_loop_threshold=2, bridge_threshold=2)

# two loops sharing header B: A -> B; B -> {C, D}; C -> {E, F}; E -> B; F -> B
BRANCHY_SOURCE = """
A:  DUP
    POP
B:  DUP
    JUMP_IF D
C:  DUP
    JUMP_IF F
E:  CONST_INT 1
    SUB
    JUMP B
F:  CONST_INT 2
    SUB
    JUMP B
D:  EXIT
"""
BRANCHY_PCS = {"A": 0, "B": 2, "C": 5, "E": 8, "F": 13, "D": 18}


@pytest.fixture
def loop():
    return programs.load("loop")


@pytest.fixture
def loopabit():
    return programs.load("loopabit")


@pytest.fixture
def callabit():
    return programs.load("callabit")


@pytest.fixture
def branchy():
    return assemble(BRANCHY_SOURCE, "branchy.tla")


def session(program, mode="annotated", **kw):
    return VmSession(program, TierPolicy(mode=mode, **kw))


def branchy_trace():
    """The trail A B C E F D built op by op, guard 1 at B and guard 2 at C."""
    pc = BRANCHY_PCS
    g1 = GuardFailure(1, pc["D"], False)
    g2 = GuardFailure(2, pc["F"], False)
    ops = [
        CallHandler(pc["A"], Opcode.DUP),
        CallHandler(pc["B"], Opcode.DUP),
        Guard(1, pc["B"] + 1, False, True, g1, pc["D"]),
        CallHandler(pc["C"], Opcode.DUP),
        Guard(2, pc["C"] + 1, False, True, g2, pc["F"]),
        CallHandler(pc["E"], Opcode.CONST_INT, 1),
        EmitJump(pc["E"] + 3, pc["B"]),
        CallHandler(pc["F"], Opcode.CONST_INT, 2),
        EmitJump(pc["F"] + 3, pc["B"]),
        EmitRet(pc["D"], Opcode.EXIT, 1),
    ]
    return ops, g1, g2


# -- acceptance reporting --------------------------------------------------

ACCEPTANCE: dict = {}


@contextmanager
def criterion(number: int, title: str):
    """Record one acceptance criterion as PASS or FAIL; details go in the dict."""
    detail: dict = {}
    try:
        yield detail
    except BaseException:
        ACCEPTANCE[number] = ("FAIL", title, detail)
        raise
    ACCEPTANCE[number] = ("PASS", title, detail)


def acceptance_lines() -> list:
    lines = []
    for number in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[number]
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        lines.append(f"{status} criterion {number}: {title}" + (f" ({extra})" if extra else ""))
    return lines


def pytest_terminal_summary(terminalreporter):
    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
