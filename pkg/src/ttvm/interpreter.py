"""Tier-0 execution: values, frames, opcode handlers and the dispatch loop.

The handlers in :data:`HANDLERS` are the single definition of each opcode's
behaviour. The interpreter loop, the tier-2 recorder and the tier-1 threaded
code all call these same functions.

Values are plain Python ``int`` (wrapped to signed 64 bits) and ``bool``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import TYPE_CHECKING, Optional, Union

from .bytecode import Opcode, Program

if TYPE_CHECKING:
    from .tiers import VmSession

Value = Union[int, bool]

INT_MIN = -(1 << 63)
INT_MAX = (1 << 63) - 1


class VMError(Exception):
    """A program error, reported with the pc of the faulting instruction."""

    kind = "error"

    def __init__(self, pc: int, message: str = ""):
        self.pc = pc
        self.message = message or self.kind
        super().__init__(f"pc {pc}: {self.message}")


class StackUnderflow(VMError):
    kind = "stack-underflow"


class VMTypeError(VMError):
    kind = "type-error"


class FuelExhausted(VMError):
    kind = "fuel-exhausted"


class CallDepthExceeded(VMError):
    kind = "call-depth"


class ProgramExit(Exception):
    """Raised by EXIT; unwinds every active frame."""

    def __init__(self, value: Value):
        self.value = value
        super().__init__(value)


@dataclass(eq=False, slots=True)
class Frame:
    program: Program
    pc: int
    stack: list = field(default_factory=list)
    caller: Optional["Frame"] = None
    entry: int = 0  # entry pc of the method this frame runs
    tier: str = "interp"  # execution regime: interp, t1, t2 or auto

    @property
    def depth(self) -> int:
        n, f = 0, self
        while f is not None:
            n, f = n + 1, f.caller
        return n


@dataclass(frozen=True)
class Done:
    values: tuple
    exited: bool = False

    @property
    def value(self) -> Optional[Value]:
        return self.values[-1] if self.values else None


@dataclass
class Deopt:
    pc: int
    frame: Frame
    reason: str = "guard"
    guard: object = None


@dataclass(frozen=True)
class Error:
    kind: str
    pc: int
    message: str

    @classmethod
    def from_exc(cls, exc: VMError) -> "Error":
        return cls(exc.kind, exc.pc, exc.message)


Outcome = Union[Done, Deopt, Error]


def truthy(v: Value) -> bool:
    """Bool(b) is b; Int(n) is n != 0."""
    return bool(v)


def wrap_int(v: int) -> int:
    if INT_MIN <= v <= INT_MAX:
        return v
    return ((v - INT_MIN) & 0xFFFF_FFFF_FFFF_FFFF) + INT_MIN


def _ints(pc: int, name: str, a: Value, b: Value) -> None:
    if type(a) is not int or type(b) is not int:
        raise VMTypeError(pc, f"{name} on {type(a).__name__}, {type(b).__name__}")


# Handlers take (session, frame, pc, operand) and return the next pc.
# An empty stack surfaces as IndexError; the engines turn it into
# StackUnderflow at the faulting pc.


def op_const_int(session, frame: Frame, pc: int, arg: int) -> int:
    frame.stack.append(arg)
    return pc + 2


def op_dup(session, frame: Frame, pc: int, arg) -> int:
    stack = frame.stack
    stack.append(stack[-1])
    return pc + 1


def op_pop(session, frame: Frame, pc: int, arg) -> int:
    frame.stack.pop()
    return pc + 1


def op_add(session, frame: Frame, pc: int, arg) -> int:
    stack = frame.stack
    rhs = stack.pop()
    lhs = stack.pop()
    _ints(pc, "ADD", lhs, rhs)
    stack.append(wrap_int(lhs + rhs))
    return pc + 1


def op_sub(session, frame: Frame, pc: int, arg) -> int:
    stack = frame.stack
    rhs = stack.pop()
    lhs = stack.pop()
    _ints(pc, "SUB", lhs, rhs)
    stack.append(wrap_int(lhs - rhs))
    return pc + 1


def op_lt(session, frame: Frame, pc: int, arg) -> int:
    stack = frame.stack
    rhs = stack.pop()
    lhs = stack.pop()
    _ints(pc, "LT", lhs, rhs)
    stack.append(lhs < rhs)
    return pc + 1


def op_eq(session, frame: Frame, pc: int, arg) -> int:
    stack = frame.stack
    rhs = stack.pop()
    lhs = stack.pop()
    _ints(pc, "EQ", lhs, rhs)
    stack.append(lhs == rhs)
    return pc + 1


def op_jump(session, frame: Frame, pc: int, arg: int) -> int:
    return arg


def op_jump_if(session, frame: Frame, pc: int, arg: int) -> int:
    if frame.stack.pop():
        return arg
    return pc + 2


def _make_call(kind: Opcode):
    def op_call(session, frame: Frame, pc: int, arg: int) -> int:
        argument = frame.stack.pop()
        frame.pc = pc
        frame.stack.extend(session.call(frame, kind, arg, argument))
        return pc + 2

    op_call.__name__ = f"op_{kind.name.lower()}"
    return op_call


def return_values(frame: Frame, opcode: int, arg: Optional[int]) -> tuple:
    """Pop the values a RET k (top k, in stack order) or EXIT (top) hands back."""
    stack = frame.stack
    if opcode == Opcode.EXIT:
        return (stack.pop(),)
    if arg == 0:
        return ()
    if arg > len(stack):
        raise IndexError(arg)
    values = tuple(stack[-arg:])
    del stack[-arg:]
    return values


HANDLERS = {
    Opcode.CONST_INT: op_const_int,
    Opcode.DUP: op_dup,
    Opcode.POP: op_pop,
    Opcode.ADD: op_add,
    Opcode.SUB: op_sub,
    Opcode.LT: op_lt,
    Opcode.EQ: op_eq,
    Opcode.JUMP: op_jump,
    Opcode.JUMP_IF: op_jump_if,
    Opcode.CALL: _make_call(Opcode.CALL),
    Opcode.CALL_NORMAL: _make_call(Opcode.CALL_NORMAL),
    Opcode.CALL_JIT: _make_call(Opcode.CALL_JIT),
}

# dense tables indexed by opcode byte; None marks RET/EXIT, which the
# engines handle themselves
_TABLE = [HANDLERS.get(Opcode(i)) for i in range(len(Opcode))]
_HAS_ARG = [Opcode(i).arity for i in range(len(Opcode))]
_RET, _EXIT = int(Opcode.RET), int(Opcode.EXIT)
_N_OPS = len(Opcode)
_CALLS = frozenset(int(o) for o in (Opcode.CALL, Opcode.CALL_NORMAL, Opcode.CALL_JIT))


def exec_handler(session, instr, frame: Frame) -> int:
    """Apply one decoded instruction to ``frame`` and return the next pc.

    RET and EXIT are control effects owned by the caller; they are rejected.
    """
    handler = HANDLERS.get(instr.opcode)
    if handler is None:
        raise ValueError(f"{instr.opcode.name} is handled by the dispatcher")
    try:
        return handler(session, frame, instr.pc, instr.operand)
    except IndexError:
        raise StackUnderflow(instr.pc, f"{instr.opcode.name} on a short stack") from None


@lru_cache(maxsize=64)
def merge_points(program: Program) -> frozenset:
    return program.backedge_targets()


def run_frame(session: "VmSession", frame: Frame) -> tuple:
    """Interpret ``frame`` from ``frame.pc`` until it returns.

    Returns the values handed back by RET; EXIT raises ProgramExit. At every
    backward-jump target the session's merge-point hook may take over, run
    compiled code, and hand the frame back (or finish it).
    """
    code = frame.program.code
    merge = merge_points(frame.program)
    table = _TABLE
    has_arg = _HAS_ARG
    metrics = session.metrics
    hook = session.merge_point if frame.tier != "interp" else None
    pc = frame.pc
    fuel = session.fuel_left
    steps = 0
    skip_merge = False
    try:
        while True:
            if hook is not None and pc in merge and not skip_merge:
                frame.pc = pc
                session.fuel_left = fuel
                metrics.decodes += steps
                metrics.dispatches += steps
                steps = 0
                finished = hook(frame)
                fuel = session.fuel_left
                if finished is not None:
                    return finished
                pc = frame.pc
                skip_merge = True
                continue
            skip_merge = False
            if fuel <= 0:
                raise FuelExhausted(pc, "step limit reached")
            fuel -= 1
            steps += 1
            opcode = code[pc]
            if opcode >= _N_OPS:
                raise VMError(pc, f"unknown opcode byte {opcode}")
            arg = code[pc + 1] if has_arg[opcode] else None
            handler = table[opcode]
            if handler is None:
                frame.pc = pc
                if opcode == _EXIT:
                    raise ProgramExit(frame.stack.pop())
                return return_values(frame, opcode, arg)
            if opcode in _CALLS:
                session.fuel_left = fuel
                pc = handler(session, frame, pc, arg)
                fuel = session.fuel_left
            else:
                pc = handler(session, frame, pc, arg)
    except IndexError:
        frame.pc = pc
        raise StackUnderflow(pc, "operand stack underflow") from None
    finally:
        session.fuel_left = fuel
        metrics.decodes += steps
        metrics.dispatches += steps


def interpret(program: Program, entry: int, arg: Value, session: Optional["VmSession"] = None) -> Outcome:
    """Run ``program`` from ``entry`` with ``arg`` as the only stack entry."""
    if session is None:
        from .tiers import TierPolicy, VmSession

        session = VmSession(program, TierPolicy(mode="interp"))
    return session.run(arg, entry=entry)
