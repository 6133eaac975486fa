"""Trace stitching: rebuild a method's control flow from its linear trace.

The method-traversal trace is cut at every emit pseudo op. The first piece
is the body; every later piece is a bridge for the guard whose pending arm
the traversal resumed at. Guards and traverse-stack entries are pushed at
the same branches and consumed at the same cuts, so a LIFO guard-failure
stack pairs each bridge with its guard.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .tracer import (
    EmitJump,
    EmitRet,
    Guard,
    GuardFailure,
    InputArgs,
    JumpOp,
    LinearTrace,
    RetOp,
    TargetToken,
)

RETURN = "return"  # token map key of the synthetic return token


class StitchError(ValueError):
    pass


TokenMap = dict


@dataclass(eq=False)
class Segment:
    ops: list
    entry_pc: int
    token: TargetToken

    @property
    def terminator(self):
        return self.ops[-1]

    def __repr__(self) -> str:
        pcs = [op.origin_pc for op in self.ops]
        return f"Segment(entry={self.entry_pc}, pcs={pcs})"


@dataclass(eq=False)
class StitchedCode:
    body: Segment
    bridges: list
    links: dict  # guard_id -> Segment
    pc_index: dict  # pc -> (Segment, op offset)
    token_map: dict
    entry_pc: int
    unresolved: set = field(default_factory=set)
    exec_cache: object = None  # filled lazily by the executor

    @property
    def segments(self) -> list:
        return [self.body, *self.bridges]

    @property
    def guards(self) -> list:
        return [op for seg in self.segments for op in seg.ops if isinstance(op, Guard)]

    @property
    def op_count(self) -> int:
        return sum(len(seg.ops) for seg in self.segments)

    def resolve(self, pc: int) -> Optional[tuple]:
        return self.pc_index.get(pc)


def create_token_map(ops: list) -> TokenMap:
    """One target token per distinct EmitJump target, plus the return token."""
    token_map: TokenMap = {}
    for op in ops:
        if isinstance(op, EmitJump) and op.target_pc not in token_map:
            token_map[op.target_pc] = TargetToken(len(token_map), op.target_pc)
    token_map[RETURN] = TargetToken(len(token_map), None)
    return token_map


def pop_guard_failure(stack: list) -> Optional[GuardFailure]:
    return stack.pop() if stack else None


def handle_emit_jump(op: EmitJump, inputargs: InputArgs, token_map: TokenMap) -> JumpOp:
    try:
        token = token_map[op.target_pc]
    except KeyError:
        raise StitchError(f"no target token for pc {op.target_pc}") from None
    return JumpOp(op.origin_pc, token, inputargs, op.synthetic)


def handle_emit_ret(op: EmitRet) -> RetOp:
    return RetOp(op.origin_pc, op.opcode, op.retval_slot)


def do_trace_stitching(
    inputargs: InputArgs, ops: list, token_map: Optional[TokenMap] = None
) -> list[tuple[Segment, Optional[GuardFailure]]]:
    """Cut ``ops`` into segments and pair each with the guard it bridges.

    Returns ``[(body, None), (bridge, guard), ...]`` in trace order. The
    guard popped at a cut belongs to the segment that starts right after
    the cut; the first segment has no such pop and is the body.
    """
    if token_map is None:
        token_map = create_token_map(ops)
    if ops and isinstance(ops[0], (EmitJump, EmitRet)):
        raise StitchError("emit with no preceding op")

    guard_failure_stack: list[GuardFailure] = []
    result: list[tuple[Segment, Optional[GuardFailure]]] = []
    trace: list = []
    pending: Optional[GuardFailure] = None  # inbound guard of ``trace``

    def close(terminator) -> None:
        nonlocal trace, pending
        trace.append(terminator)
        entry = trace[0].origin_pc
        token = token_map.get(entry) or TargetToken(len(token_map) + len(result), entry)
        result.append((Segment(trace, entry, token), pending))
        trace = []
        pending = pop_guard_failure(guard_failure_stack)

    for i, op in enumerate(ops):
        if isinstance(op, Guard) and op.marked:
            guard_failure_stack.append(op.failure)
            trace.append(op)
        elif isinstance(op, EmitJump):
            close(handle_emit_jump(op, inputargs, token_map))
        elif isinstance(op, EmitRet):
            close(handle_emit_ret(op))
        elif isinstance(op, (JumpOp, RetOp)):
            close(op)
            if i != len(ops) - 1:
                raise StitchError(f"ops after the final {type(op).__name__}")
            break
        else:
            trace.append(op)

    if trace:
        raise StitchError("trace does not end in an emit or terminator")
    if pending is not None or guard_failure_stack:
        left = [pending] if pending is not None else []
        raise StitchError(f"guard failure stack not drained: {left + guard_failure_stack}")
    return result


def link_segments(pairs: list, token_map: TokenMap) -> StitchedCode:
    """Attach each bridge to its guard and index every recorded pc."""
    if not pairs:
        raise StitchError("nothing to link")
    body, first = pairs[0]
    if first is not None:
        raise StitchError("first segment must be the body")
    links: dict[int, Segment] = {}
    bridges = []
    for seg, guard in pairs[1:]:
        if guard is None:
            raise StitchError(f"bridge at pc {seg.entry_pc} has no guard")
        if seg.entry_pc != guard.resume_pc:
            raise StitchError(
                f"bridge entry {seg.entry_pc} != guard {guard.guard_id} resume pc {guard.resume_pc}"
            )
        guard.set_bridge(seg)
        links[guard.guard_id] = seg
        bridges.append(seg)

    pc_index: dict[int, tuple[Segment, int]] = {}
    marked = []
    for seg, _ in pairs:
        for offset, op in enumerate(seg.ops):
            if isinstance(op, Guard) and op.marked:
                marked.append(op)
            if getattr(op, "synthetic", False):
                continue
            pc_index.setdefault(op.origin_pc, (seg, offset))
    for g in marked:
        if g.guard_id not in links:
            raise StitchError(f"guard {g.guard_id} at pc {g.origin_pc} is not linked")

    unresolved = set()
    for seg, _ in pairs:
        term = seg.terminator
        if isinstance(term, JumpOp) and term.target_token.pc not in pc_index:
            unresolved.add(term.target_token.pc)
    return StitchedCode(body, bridges, links, pc_index, token_map, body.entry_pc, unresolved)


def stitch(trace: LinearTrace) -> StitchedCode:
    """create_token_map + do_trace_stitching + link_segments."""
    token_map = create_token_map(trace.ops)
    pairs = do_trace_stitching(trace.inputargs, trace.ops, token_map)
    return link_segments(pairs, token_map)


def reconstruct_cfg(code: StitchedCode) -> tuple[frozenset, frozenset]:
    """Recover (nodes, edges) over instruction pcs from stitched code.

    Ops are nodes; straight-line order, guard-fail links and resolved
    JumpOps are edges. Synthetic jumps are transfers, not nodes.
    """

    def location(seg: Segment, offset: int) -> int:
        op = seg.ops[offset]
        if isinstance(op, JumpOp) and op.synthetic:
            return op.target_token.pc
        return op.origin_pc

    nodes = set()
    edges = set()
    for seg in code.segments:
        for offset, op in enumerate(seg.ops):
            if isinstance(op, JumpOp):
                if not op.synthetic:
                    nodes.add(op.origin_pc)
                    edges.add((op.origin_pc, op.target_token.pc))
                continue
            nodes.add(op.origin_pc)
            if isinstance(op, RetOp):
                continue
            nxt = location(seg, offset + 1)
            edges.add((op.origin_pc, nxt))
            if isinstance(op, Guard):
                bridge = code.links.get(op.guard_id)
                if bridge is not None:
                    edges.add((op.origin_pc, location(bridge, 0)))
    return frozenset(nodes), frozenset(edges)
