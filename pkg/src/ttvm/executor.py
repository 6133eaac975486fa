"""Running compiled code.

Tier-1 stitched code is threaded code: every op is a call to the same opcode
handler the interpreter uses, so nothing is decoded at run time. Guards call
the JUMP_IF handler and compare the pc it picks with the arm the trace
followed.

Tier-2 traces are lowered the way a meta-tracer sees them: each handler's
body is inlined as residual operations on the frame's operand stack and a
small register file. There are no handler calls left in a lowered loop.

Frames are mutated in place, so leaving compiled code at any guard or exit
is just a pc hand-off back to the interpreter.
"""
from __future__ import annotations

import operator
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .bytecode import CALL_OPS, Opcode, Program
from .interpreter import (
    HANDLERS,
    Deopt,
    Done,
    Frame,
    FuelExhausted,
    ProgramExit,
    StackUnderflow,
    VMTypeError,
    op_jump_if,
    return_values,
    wrap_int,
)
from .stitcher import Segment, StitchedCode
from .tracer import CallHandler, Guard, GuardFailure, JumpOp, LinearTrace, RetOp, TargetToken

if TYPE_CHECKING:
    from .tiers import VmSession


# ---------------------------------------------------------------------------
# tier 1

K_CALL, K_CALLX, K_GUARD, K_JUMP, K_RET = range(5)


def _prepare(code: StitchedCode) -> dict:
    """Flatten segments into tuples ``(kind, fn, arg, pc, x, y, z)``.

    Jump and guard destinations are ``(op list, offset)`` pairs, or None when
    the destination was never recorded (those exits deopt).
    """
    if code.exec_cache is not None:
        return code.exec_cache
    lists = {id(seg): [] for seg in code.segments}

    def where(pc: int):
        hit = code.pc_index.get(pc)
        if hit is None:
            return None
        seg, offset = hit
        return lists[id(seg)], offset

    for seg in code.segments:
        out = lists[id(seg)]
        for op in seg.ops:
            if isinstance(op, CallHandler):
                kind = K_CALLX if op.opcode in CALL_OPS else K_CALL
                out.append((kind, HANDLERS[op.opcode], op.operand, op.origin_pc, None, None, None))
            elif isinstance(op, Guard):
                bridge = code.links.get(op.guard_id)
                dest = (lists[id(bridge)], 0) if bridge is not None else None
                out.append((K_GUARD, op_jump_if, op.target, op.origin_pc, op.follow_pc, dest, op.failure))
            elif isinstance(op, JumpOp):
                target = op.target_token.pc
                backward = target <= op.origin_pc and not op.synthetic
                out.append((K_JUMP, None, target, op.origin_pc, where(target), op.synthetic, backward))
            elif isinstance(op, RetOp):
                out.append((K_RET, None, op.retval_slot, op.origin_pc, op.opcode, None, None))
            else:
                raise TypeError(f"unexpected op {op!r} in stitched code")
    code.exec_cache = {"lists": lists, "body": lists[id(code.body)]}
    return code.exec_cache


@dataclass(frozen=True)
class ExecCursor:
    segment: Segment
    offset: int
    frame: Optional[Frame] = None


def resolve_jump_target(code: StitchedCode, token: TargetToken, frame: Optional[Frame] = None):
    """An ExecCursor for the token's pc, or the bare pc to deopt to."""
    hit = code.pc_index.get(token.pc)
    if hit is None:
        return token.pc
    return ExecCursor(hit[0], hit[1], frame)


def execute_stitched(
    code: StitchedCode,
    frame: Frame,
    session: "VmSession",
    start_pc: Optional[int] = None,
):
    """Run tier-1 code on ``frame`` from the body entry or from ``start_pc``.

    Returns Done, or Deopt with the frame positioned at the deopt pc.
    """
    prep = _prepare(code)
    if start_pc is None or start_pc == code.entry_pc:
        ops, i = prep["body"], 0
    else:
        seg, i = code.pc_index[start_pc]
        ops = prep["lists"][id(seg)]
    metrics = session.metrics
    profile = session.profiles_backedges
    fuel = session.fuel_left
    n = 0
    pc = frame.pc
    try:
        while True:
            kind, fn, arg, pc, x, y, z = ops[i]
            if kind == K_CALL:
                if fuel <= 0:
                    raise FuelExhausted(pc, "step limit reached")
                fuel -= 1
                n += 1
                fn(session, frame, pc, arg)
                i += 1
            elif kind == K_GUARD:
                if fuel <= 0:
                    raise FuelExhausted(pc, "step limit reached")
                fuel -= 1
                n += 1
                if fn(session, frame, pc, arg) == x:
                    i += 1
                elif y is not None:
                    ops, i = y
                else:
                    z.failure_count += 1
                    metrics.guard_deopts += 1
                    frame.pc = z.resume_pc
                    return Deopt(z.resume_pc, frame, "guard", z)
            elif kind == K_JUMP:
                if not y:
                    if fuel <= 0:
                        raise FuelExhausted(pc, "step limit reached")
                    fuel -= 1
                if x is None:
                    metrics.trace_exits += 1
                    frame.pc = arg
                    return Deopt(arg, frame, "exit")
                if z and profile:
                    session.fuel_left = fuel
                    if session.on_backedge(frame, arg):
                        frame.pc = arg
                        return Deopt(arg, frame, "tier-up")
                ops, i = x
            elif kind == K_CALLX:
                if fuel <= 0:
                    raise FuelExhausted(pc, "step limit reached")
                n += 1
                session.fuel_left = fuel - 1
                fn(session, frame, pc, arg)
                fuel = session.fuel_left
                i += 1
            else:
                if fuel <= 0:
                    raise FuelExhausted(pc, "step limit reached")
                fuel -= 1
                frame.pc = pc
                values = return_values(frame, x, arg)
                if x == Opcode.EXIT:
                    raise ProgramExit(values[0])
                return Done(values)
    except IndexError:
        frame.pc = pc
        raise StackUnderflow(pc, "operand stack underflow") from None
    finally:
        session.fuel_left = fuel
        metrics.dispatches += n


# ---------------------------------------------------------------------------
# tier 2

I_OP, I_GUARD, I_JUMP, I_CALL, I_RET = range(5)


@dataclass(eq=False)
class LoopCode:
    header: int
    trace: LinearTrace
    ir: list
    n_regs: int
    program: Program
    bridges: list = field(default_factory=list)

    @property
    def guards(self) -> list[GuardFailure]:
        return [g.failure for g in self.trace.guards]

    @property
    def op_count(self) -> int:
        return len(self.ir)


@dataclass(eq=False)
class BridgeCode:
    guard: GuardFailure
    loop: LoopCode
    trace: LinearTrace
    ir: list
    n_regs: int

    @property
    def entry_pc(self) -> int:
        return self.trace.entry_pc

    @property
    def op_count(self) -> int:
        return len(self.ir)


_BINOPS = {
    Opcode.ADD: ("ADD", operator.add, True),
    Opcode.SUB: ("SUB", operator.sub, True),
    Opcode.LT: ("LT", operator.lt, False),
    Opcode.EQ: ("EQ", operator.eq, False),
}


def _push_const(n):
    def push_const(stack, regs):
        stack.append(n)
    return push_const


def _pop_into(r):
    def pop_into(stack, regs):
        regs[r] = stack.pop()
    return pop_into


def _peek_into(r):
    def peek_into(stack, regs):
        regs[r] = stack[-1]
    return peek_into


def _push_reg(r):
    def push_reg(stack, regs):
        stack.append(regs[r])
    return push_reg


def _push_all(r):
    def push_all(stack, regs):
        stack.extend(regs[r])
    return push_all


def _drop(stack, regs):
    stack.pop()


def _truth(dst, src):
    def truth(stack, regs):
        regs[dst] = bool(regs[src])
    return truth


def _binop(opcode, dst, a, b, pc):
    name, fn, wraps = _BINOPS[opcode]

    def binop(stack, regs):
        lhs = regs[a]
        rhs = regs[b]
        if type(lhs) is not int or type(rhs) is not int:
            raise VMTypeError(pc, f"{name} on {type(lhs).__name__}, {type(rhs).__name__}")
        regs[dst] = wrap_int(fn(lhs, rhs)) if wraps else fn(lhs, rhs)

    binop.__name__ = f"int_{name.lower()}"
    return binop


def lower_trace(trace: LinearTrace, owner: Optional[LoopCode] = None) -> tuple[list, int]:
    """Inline handler bodies into residual ops.

    Each op is ``(kind, fn, pc, charged_pcs, a, b)``; ``charged_pcs`` lists
    the bytecode instructions whose step is paid when the op runs, so fuel
    accounting matches the interpreter exactly.
    """
    ir: list = []
    n_regs = 0
    carry: list[int] = []

    def reg() -> int:
        nonlocal n_regs
        n_regs += 1
        return n_regs - 1

    def emit(kind, fn, pc, a=None, b=None, charge=False):
        nonlocal carry
        pcs = ()
        if charge:
            pcs = tuple(carry) + (pc,)
            carry = []
        ir.append((kind, fn, pc, pcs, a, b))

    for op in trace.ops:
        pc = op.origin_pc
        if isinstance(op, CallHandler):
            code = op.opcode
            if code is Opcode.CONST_INT:
                emit(I_OP, _push_const(op.operand), pc, charge=True)
            elif code is Opcode.DUP:
                r = reg()
                emit(I_OP, _peek_into(r), pc, charge=True)
                emit(I_OP, _push_reg(r), pc)
            elif code is Opcode.POP:
                emit(I_OP, _drop, pc, charge=True)
            elif code in _BINOPS:
                rb, ra, rd = reg(), reg(), reg()
                emit(I_OP, _pop_into(rb), pc, charge=True)
                emit(I_OP, _pop_into(ra), pc)
                emit(I_OP, _binop(code, rd, ra, rb, pc), pc)
                emit(I_OP, _push_reg(rd), pc)
            elif code is Opcode.JUMP:
                # the jump itself leaves no residue; its step rides on the next op
                carry.append(pc)
            elif code in CALL_OPS:
                ra, rr = reg(), reg()
                emit(I_OP, _pop_into(ra), pc, charge=True)
                emit(I_CALL, None, pc, (code, op.operand), (ra, rr))
                emit(I_OP, _push_all(rr), pc)
            else:
                raise TypeError(f"cannot lower {code.name}")
        elif isinstance(op, Guard):
            rc, rt = reg(), reg()
            emit(I_OP, _pop_into(rc), pc, charge=True)
            emit(I_OP, _truth(rt, rc), pc)
            emit(I_GUARD, None, pc, rt, op.failure)
        elif isinstance(op, JumpOp):
            emit(I_JUMP, None, pc, op.target_token.pc, None, charge=not op.synthetic)
            if op.synthetic and carry:
                # a synthetic jump pays only for jumps folded into it
                kind, fn, p, _, a, b = ir[-1]
                ir[-1] = (kind, fn, p, tuple(carry), a, b)
                carry = []
        elif isinstance(op, RetOp):
            emit(I_RET, None, pc, op.opcode, op.retval_slot, charge=True)
        else:
            raise TypeError(f"unexpected op {op!r} in a runtime trace")
    for g in trace.guards:
        g.failure.owner = owner
    return ir, n_regs


def lower_loop(trace: LinearTrace, program: Program) -> LoopCode:
    loop = LoopCode(trace.entry_pc, trace, [], 0, program)
    loop.ir, loop.n_regs = lower_trace(trace, loop)
    return loop


def lower_bridge(trace: LinearTrace, guard: GuardFailure, loop: LoopCode) -> BridgeCode:
    ir, n_regs = lower_trace(trace, loop)
    return BridgeCode(guard, loop, trace, ir, n_regs)


def execute_loop(loop: LoopCode, frame: Frame, session: "VmSession"):
    """Run tier-2 code entered at ``loop.header``; returns Done or Deopt."""
    metrics = session.metrics
    cache = session.t2_cache
    threshold = session.policy.bridge_threshold
    ir = loop.ir
    regs = [None] * loop.n_regs
    stack = frame.stack
    fuel = session.fuel_left
    n = 0
    i = 0
    pc = frame.pc
    try:
        while True:
            kind, fn, pc, pcs, a, b = ir[i]
            if pcs:
                if fuel < len(pcs):
                    raise FuelExhausted(pcs[fuel], "step limit reached")
                fuel -= len(pcs)
            n += 1
            if kind == I_OP:
                fn(stack, regs)
                i += 1
            elif kind == I_GUARD:
                if regs[a] is b.expected:
                    i += 1
                    continue
                if b.bridge is not None:
                    ir = b.bridge.ir
                    regs = [None] * b.bridge.n_regs
                    i = 0
                    continue
                b.failure_count += 1
                metrics.guard_deopts += 1
                frame.pc = b.resume_pc
                wants_bridge = b.failure_count >= threshold and not b.blacklisted
                return Deopt(b.resume_pc, frame, "bridge" if wants_bridge else "guard", b)
            elif kind == I_JUMP:
                dest = cache.get(a)
                if dest is None or dest.program is not frame.program:
                    metrics.trace_exits += 1
                    frame.pc = a
                    return Deopt(a, frame, "exit")
                ir = dest.ir
                if len(regs) < dest.n_regs:
                    regs = [None] * dest.n_regs
                i = 0
            elif kind == I_CALL:
                call_kind, callee = a
                frame.pc = pc
                session.fuel_left = fuel
                regs[b[1]] = session.call(frame, call_kind, callee, regs[b[0]])
                fuel = session.fuel_left
                i += 1
            else:
                frame.pc = pc
                values = return_values(frame, a, b)
                if a == Opcode.EXIT:
                    raise ProgramExit(values[0])
                return Done(values)
    except IndexError:
        frame.pc = pc
        raise StackUnderflow(pc, "operand stack underflow") from None
    finally:
        session.fuel_left = fuel
        metrics.trace_ops += n


def handle_guard_failure(g: GuardFailure, frame: Frame, session: "VmSession"):
    """Decide where control goes after ``g`` failed on ``frame``.

    Returns the bridge to continue in, or a Deopt. Tier-2 guards that reach
    the bridge threshold get a bridge recorded from the resume pc.
    """
    if g.bridge is not None:
        return g.bridge
    g.failure_count += 1
    session.metrics.guard_deopts += 1
    frame.pc = g.resume_pc
    if g.owner is not None and g.failure_count >= session.policy.bridge_threshold and not g.blacklisted:
        session.compile_bridge(g, frame)
    return Deopt(g.resume_pc, frame, "guard", g)
