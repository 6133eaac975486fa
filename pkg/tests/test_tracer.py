import pytest

from ttvm.bytecode import Opcode, assemble, control_flow_graph
from ttvm.interpreter import Frame
from ttvm.tiers import TierPolicy, VmSession
from ttvm.tracer import (
    CallHandler,
    EmitJump,
    EmitRet,
    Guard,
    JumpOp,
    TraceAborted,
    t_empty,
    t_is_empty,
    t_pop,
    t_push,
    trace_loop,
    trace_method,
)

from conftest import BRANCHY_PCS
from randprog import program_suite


def shape(op):
    if isinstance(op, CallHandler):
        return ("call", op.origin_pc, op.opcode.name)
    if isinstance(op, Guard):
        return ("guard", op.origin_pc, op.marked, op.failure.resume_pc)
    if isinstance(op, EmitJump):
        return ("emit_jump", op.origin_pc, op.target_pc)
    if isinstance(op, EmitRet):
        return ("emit_ret", op.origin_pc)
    if isinstance(op, JumpOp):
        return ("jump", op.origin_pc, op.target_token.pc)
    return (type(op).__name__, op.origin_pc)


def test_method_trace_of_loop(loop):
    trace = trace_method(loop, 0)
    assert [shape(op) for op in trace.ops] == [
        ("call", 0, "DUP"),
        ("call", 1, "CONST_INT"),
        ("call", 3, "LT"),
        ("guard", 4, True, 11),
        ("call", 6, "CONST_INT"),
        ("call", 8, "SUB"),
        ("emit_jump", 9, 0),
        ("call", 11, "CONST_INT"),
        ("call", 13, "SUB"),
        ("emit_ret", 14),
    ]
    guard = trace.ops[3]
    assert guard.expected is False and guard.follow_pc == 6


def test_straight_line():
    trace = trace_method(assemble("CONST_INT 5\nEXIT\n"), 0)
    assert [type(op) for op in trace.ops] == [CallHandler, EmitRet]
    assert trace.guards == []


def test_branchy_traversal_order(branchy):
    trace = trace_method(branchy, 0)
    block_of = {pc: name for name, pc in BRANCHY_PCS.items()}
    visited = [block_of[op.origin_pc] for op in trace.ops if op.origin_pc in block_of and not isinstance(op, EmitJump)]
    assert visited == ["A", "B", "C", "E", "F", "D"]
    assert sum(1 for op in trace.ops if isinstance(op, Guard) and op.marked) == 2
    jumps = [op for op in trace.ops if isinstance(op, EmitJump)]
    assert [j.target_pc for j in jumps] == [BRANCHY_PCS["B"], BRANCHY_PCS["B"]]


def test_join_by_fall_through_is_cut():
    # both arms meet at `end`; the second arm reaches it by falling through
    src = "JUMP_IF other\nCONST_INT 1\nJUMP end\nother:\nCONST_INT 2\nend:\nEXIT\n"
    trace = trace_method(assemble(src), 0)
    synthetic = [op for op in trace.ops if isinstance(op, EmitJump) and op.synthetic]
    # offsets: JUMP_IF 0, CONST_INT 2, JUMP 4, CONST_INT 6, EXIT 8
    assert [op.target_pc for op in synthetic] == [8]


def test_trace_cap_aborts(loop):
    with pytest.raises(TraceAborted) as info:
        trace_method(loop, 0, max_ops=4)
    assert info.value.reason == "trace-too-long"


def test_interning_identity():
    memo = {}
    a = t_push(3, t_empty(), memo)
    b = t_push(3, t_empty(), memo)
    assert a is b
    c = t_push(5, a, memo)
    assert t_push(5, b, memo) is c
    assert t_pop(c) == (5, a)
    assert t_is_empty(t_empty())
    with pytest.raises(IndexError):
        t_pop(t_empty())
    assert list(c) == [5, 3]


def test_method_trace_invariants_on_random_programs():
    for prog, _ in program_suite(7, 150):
        for entry in prog.function_entries():
            trace = trace_method(prog, entry)
            nodes, _ = control_flow_graph(prog, entry)
            real = [op.origin_pc for op in trace.ops if isinstance(op, (CallHandler, Guard))]
            real += [op.origin_pc for op in trace.ops if isinstance(op, (EmitRet,))]
            real += [op.origin_pc for op in trace.ops if isinstance(op, EmitJump) and not op.synthetic]
            # uniqueness and completeness over reachable pcs
            assert len(real) == len(set(real))
            assert set(real) == set(nodes)
            marked = sum(1 for op in trace.ops if isinstance(op, Guard) and op.marked)
            branches = sum(1 for pc in nodes if prog.decode(pc).opcode is Opcode.JUMP_IF)
            assert marked == branches


# -- tier 2 --------------------------------------------------------------


def t2_session(prog, **kw):
    return VmSession(prog, TierPolicy(mode="t2", **kw))


def test_trace_loop_loop(loop):
    s = t2_session(loop)
    frame = Frame(loop, 0, [100], None, 0, "t2")
    trace = trace_loop(loop, 0, frame, s)
    assert [shape(op) for op in trace.ops] == [
        ("call", 0, "DUP"),
        ("call", 1, "CONST_INT"),
        ("call", 3, "LT"),
        ("guard", 4, False, 11),
        ("call", 6, "CONST_INT"),
        ("call", 8, "SUB"),
        ("jump", 9, 0),
    ]
    g = trace.guards[0]
    assert g.expected is False and not g.marked
    # soundness: the frame is where one interpreted iteration leaves it
    assert frame.pc == 0 and frame.stack == [99]


def test_trace_loop_loopabit_inner(loopabit):
    s = t2_session(loopabit)
    frame = Frame(loopabit, 1, [10, 10], None, 0, "t2")
    trace = trace_loop(loopabit, 1, frame, s)
    assert len(trace.ops) == 7
    assert len(trace.guards) == 1
    assert trace.guards[0].failure.resume_pc == 12
    assert isinstance(trace.ops[-1], JumpOp) and trace.ops[-1].target_token.pc == 1
    assert frame.stack == [10, 9]


def test_trace_loop_left_loop(loop):
    s = t2_session(loop)
    frame = Frame(loop, 0, [0], None, 0, "t2")
    with pytest.raises(TraceAborted) as info:
        trace_loop(loop, 0, frame, s)
    assert info.value.reason == "left-loop"


def test_trace_loop_cold_pc(loop):
    s = t2_session(loop)
    frame = Frame(loop, 11, [0], None, 0, "t2")
    with pytest.raises(TraceAborted, match="left-loop"):
        trace_loop(loop, 11, frame, s)


def test_trace_loop_call_depth(callabit):
    s = t2_session(callabit, trace_call_depth=0)
    frame = Frame(callabit, 0, [5], None, 0, "t2")
    s.depth = 1
    with pytest.raises(TraceAborted) as info:
        trace_loop(callabit, 0, frame, s)
    assert info.value.reason == "call-depth"


def test_trace_loop_op_cap(loop):
    s = t2_session(loop, max_trace_ops=3)
    frame = Frame(loop, 0, [10], None, 0, "t2")
    with pytest.raises(TraceAborted, match="trace-too-long"):
        trace_loop(loop, 0, frame, s)


def test_trace_loop_records_taken_direction():
    # bottom-tested loop: the back-edge is the taken arm of JUMP_IF
    src = "head:\nCONST_INT 1\nSUB\nDUP\nJUMP_IF head\nEXIT\n"
    prog = assemble(src)
    s = t2_session(prog)
    frame = Frame(prog, 0, [5], None, 0, "t2")
    trace = trace_loop(prog, 0, frame, s)
    g = trace.guards[0]
    assert g.expected is True and g.failure.resume_pc == 6
    assert trace.ops[-1].synthetic
