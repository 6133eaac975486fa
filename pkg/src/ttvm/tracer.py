"""Trace recording in two modes.

``trace_method`` walks a whole method abstractly (tier 1): both arms of every
branch are visited, pending arms live on an interned traverse stack, and
back-edges or joins are cut with ``EmitJump``/``EmitRet`` pseudo ops.

``trace_loop`` and ``trace_bridge`` record the path the interpreter actually
executes (tier 2), guarding each branch on the direction it took.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Union

from .bytecode import CALL_OPS, Opcode, Program
from .interpreter import (
    HANDLERS,
    FuelExhausted,
    Frame,
    StackUnderflow,
    merge_points,
)

if TYPE_CHECKING:
    from .tiers import VmSession

DEFAULT_MAX_OPS = 4096


class TraceAborted(Exception):
    def __init__(self, reason: str, pc: int):
        self.reason = reason
        self.pc = pc
        super().__init__(f"{reason} at pc {pc}")


# ---------------------------------------------------------------------------
# traverse stack


class TraverseStack:
    """Immutable cons cell of pending program counters."""

    __slots__ = ("pc", "next")

    def __init__(self, pc: int, next: Optional["TraverseStack"]):
        self.pc = pc
        self.next = next

    def __iter__(self):
        node = self
        while node is not None:
            yield node.pc
            node = node.next

    def __repr__(self) -> str:
        return f"TraverseStack({list(self)})"


T_EMPTY: Optional[TraverseStack] = None

# default intern table; sessions pass their own
_memo: dict = {}


def t_empty() -> Optional[TraverseStack]:
    return T_EMPTY


def t_is_empty(stack: Optional[TraverseStack]) -> bool:
    return stack is T_EMPTY


def t_push(pc: int, stack: Optional[TraverseStack], memo: Optional[dict] = None) -> TraverseStack:
    """Return the unique node for ``(pc, stack)``, creating it on first use."""
    if memo is None:
        memo = _memo
    # nodes hash by identity, so the key is (pc, identity of the tail)
    key = (pc, stack)
    node = memo.get(key)
    if node is None:
        node = memo[key] = TraverseStack(pc, stack)
    return node


def t_pop(stack: Optional[TraverseStack]) -> tuple[int, Optional[TraverseStack]]:
    if stack is T_EMPTY:
        raise IndexError("pop from empty traverse stack")
    return stack.pc, stack.next


# ---------------------------------------------------------------------------
# trace operations


@dataclass(eq=False)
class GuardFailure:
    """Exit descriptor of one guard."""

    guard_id: int
    resume_pc: int
    expected: bool
    failure_count: int = 0
    bridge: object = None
    blacklisted: bool = False
    owner: object = None  # tier-2 loop the guard belongs to

    def set_bridge(self, bridge) -> None:
        if self.bridge is not None:
            raise ValueError(f"guard {self.guard_id} already has a bridge")
        self.bridge = bridge

    def __repr__(self) -> str:
        return f"GuardFailure(g{self.guard_id}, resume_pc={self.resume_pc})"


@dataclass(frozen=True)
class TargetToken:
    token_id: int
    pc: Optional[int]  # None for the synthetic return token

    def __repr__(self) -> str:
        return f"token{self.token_id}@{'ret' if self.pc is None else self.pc}"


@dataclass(frozen=True)
class InputArgs:
    """Frame shape at trace entry; ``depth`` is None for abstract traces."""

    pc: int
    depth: Optional[int] = None


@dataclass(frozen=True)
class CallHandler:
    origin_pc: int
    opcode: Opcode
    operand: Optional[int] = None


@dataclass(frozen=True, eq=False)
class Guard:
    guard_id: int
    origin_pc: int
    expected: bool
    marked: bool
    failure: GuardFailure
    target: int  # JUMP_IF operand

    @property
    def follow_pc(self) -> int:
        """The arm the trace continues on."""
        return self.target if self.expected else self.origin_pc + 2


@dataclass(frozen=True)
class EmitJump:
    origin_pc: int
    target_pc: int
    synthetic: bool = False  # True when no JUMP instruction stands behind it


@dataclass(frozen=True)
class EmitRet:
    origin_pc: int
    opcode: Opcode  # RET or EXIT
    retval_slot: int  # number of values handed back


@dataclass(frozen=True)
class JumpOp:
    origin_pc: int
    target_token: TargetToken
    inputargs: Optional[InputArgs] = None
    synthetic: bool = False


@dataclass(frozen=True)
class RetOp:
    origin_pc: int
    opcode: Opcode
    retval_slot: int


TraceOp = Union[CallHandler, Guard, EmitJump, EmitRet, JumpOp, RetOp]
TERMINAL_OPS = (JumpOp, RetOp)


@dataclass
class LinearTrace:
    inputargs: InputArgs
    ops: list
    kind: str  # "method", "loop" or "bridge"
    entry_pc: int

    @property
    def guards(self) -> list[Guard]:
        return [op for op in self.ops if isinstance(op, Guard)]

    def __len__(self) -> int:
        return len(self.ops)


def op_kind(op: TraceOp) -> str:
    return type(op).__name__


# ---------------------------------------------------------------------------
# tier 1: method traversal


def trace_method(
    program: Program,
    entry: int,
    max_ops: int = DEFAULT_MAX_OPS,
    memo: Optional[dict] = None,
) -> LinearTrace:
    """Linearise the whole method at ``entry`` into one trace.

    Branches record a marked guard that expects the fall-through arm and
    push the taken arm on the traverse stack. Jumps to unvisited code are
    followed; jumps to visited code (back-edges, joins) and returns cut the
    trace, after which traversal resumes from the traverse stack.
    """
    ops: list = []
    visited: set[int] = set()
    stack = T_EMPTY
    pc = entry
    next_guard = 0

    while True:
        if len(ops) >= max_ops:
            raise TraceAborted("trace-too-long", pc)
        cut = False
        if pc in visited:
            # fall-through into, or resumption at, code already traced
            ops.append(EmitJump(pc, pc, synthetic=True))
            cut = True
        else:
            visited.add(pc)
            instr = program.decode(pc)
            op = instr.opcode
            if op is Opcode.JUMP_IF:
                failure = GuardFailure(next_guard, instr.operand, False)
                ops.append(Guard(next_guard, pc, False, True, failure, instr.operand))
                next_guard += 1
                stack = t_push(instr.operand, stack, memo)
                pc = instr.next_pc
            elif op is Opcode.JUMP:
                if instr.operand in visited:
                    ops.append(EmitJump(pc, instr.operand))
                    cut = True
                else:
                    ops.append(CallHandler(pc, op, instr.operand))
                    pc = instr.operand
            elif op is Opcode.RET or op is Opcode.EXIT:
                ops.append(EmitRet(pc, op, instr.operand if op is Opcode.RET else 1))
                cut = True
            else:
                ops.append(CallHandler(pc, op, instr.operand))
                pc = instr.next_pc
        if cut:
            if t_is_empty(stack):
                break
            pc, stack = t_pop(stack)

    return LinearTrace(InputArgs(entry), ops, "method", entry)


# ---------------------------------------------------------------------------
# tier 2: runtime recording


def _record(
    session: "VmSession",
    frame: Frame,
    kind: str,
    header: int,
    max_ops: int,
) -> LinearTrace:
    """Interpret ``frame`` while recording until control reaches ``header``.

    Returns a trace ending in a JumpOp; raises TraceAborted otherwise. The
    frame is left at the pc where recording stopped. A bridge may also end
    in a RetOp, or in a JumpOp to another loop that already has code.
    """
    program = frame.program
    merges = merge_points(program)
    metrics = session.metrics
    start_pc = frame.pc
    inputargs = InputArgs(start_pc, len(frame.stack))
    ops: list = []
    next_guard = 0

    def close_jump(origin: int, target: int, synthetic: bool) -> LinearTrace:
        ops.append(JumpOp(origin, TargetToken(0, target), inputargs, synthetic))
        return LinearTrace(inputargs, ops, kind, start_pc)

    session.begin_recording(frame)
    try:
        while True:
            pc = frame.pc
            if ops:
                if pc == header:
                    return close_jump(pc, pc, True)
                if pc in merges and session.has_loop_code(program, pc):
                    return close_jump(pc, pc, True)
            elif kind == "bridge" and (pc == header or (pc in merges and session.has_loop_code(program, pc))):
                return close_jump(pc, pc, True)
            if len(ops) >= max_ops:
                raise TraceAborted("trace-too-long", pc)

            instr = program.decode(pc)
            op = instr.opcode
            if op is Opcode.RET or op is Opcode.EXIT:
                if kind == "loop":
                    raise TraceAborted("left-loop", pc)
                # the interpreter executes the return itself
                ops.append(RetOp(pc, op, instr.operand if op is Opcode.RET else 1))
                return LinearTrace(inputargs, ops, kind, start_pc)

            if session.fuel_left <= 0:
                raise FuelExhausted(pc, "step limit reached")
            session.fuel_left -= 1
            metrics.decodes += 1
            metrics.dispatches += 1
            try:
                nxt = HANDLERS[op](session, frame, pc, instr.operand)
            except IndexError:
                raise StackUnderflow(pc, "operand stack underflow") from None
            frame.pc = nxt

            if op is Opcode.JUMP_IF:
                taken = nxt == instr.operand
                other = instr.next_pc if taken else instr.operand
                failure = GuardFailure(next_guard, other, taken)
                ops.append(Guard(next_guard, pc, taken, False, failure, instr.operand))
                next_guard += 1
            elif op is Opcode.JUMP and (nxt == header or (nxt in merges and session.has_loop_code(program, nxt))):
                return close_jump(pc, nxt, False)
            else:
                ops.append(CallHandler(pc, op, instr.operand))
                if op in CALL_OPS and session.recording_aborted:
                    raise TraceAborted(session.recording_aborted, pc)
    finally:
        session.end_recording()


def trace_loop(
    program: Program,
    header: int,
    frame: Frame,
    session: "VmSession",
    max_ops: Optional[int] = None,
) -> LinearTrace:
    """Record one iteration of the loop at ``header`` as the interpreter runs it."""
    if frame.pc != header:
        raise ValueError(f"frame is at pc {frame.pc}, not at loop header {header}")
    if frame.program is not program:
        raise ValueError("frame runs a different program")
    if header not in merge_points(program):
        raise TraceAborted("left-loop", header)
    if max_ops is None:
        max_ops = session.policy.max_trace_ops
    return _record(session, frame, "loop", header, max_ops)


def trace_bridge(
    guard: GuardFailure,
    header: int,
    frame: Frame,
    session: "VmSession",
    max_ops: Optional[int] = None,
) -> LinearTrace:
    """Record the path from a failing guard's resume pc back into compiled code."""
    if frame.pc != guard.resume_pc:
        raise ValueError(f"frame is at pc {frame.pc}, guard resumes at {guard.resume_pc}")
    if max_ops is None:
        max_ops = session.policy.max_trace_ops
    return _record(session, frame, "bridge", header, max_ops)
