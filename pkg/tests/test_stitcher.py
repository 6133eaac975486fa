import pytest

from ttvm.bytecode import Opcode, assemble, control_flow_graph
from ttvm.stitcher import (
    RETURN,
    StitchError,
    create_token_map,
    do_trace_stitching,
    handle_emit_jump,
    link_segments,
    reconstruct_cfg,
    stitch,
)
from ttvm.tracer import (
    CallHandler,
    EmitJump,
    EmitRet,
    Guard,
    GuardFailure,
    InputArgs,
    JumpOp,
    RetOp,
    trace_method,
)

from conftest import BRANCHY_PCS, branchy_trace


def test_loop_one_body_one_bridge(loop):
    code = stitch(trace_method(loop, 0))
    assert len(code.bridges) == 1
    assert code.bridges[0].entry_pc == 11
    assert [op.origin_pc for op in code.body.ops] == [0, 1, 3, 4, 6, 8, 9]
    assert code.links == {0: code.bridges[0]}
    assert code.op_count == 10


def test_loopabit_body_and_two_bridges(loopabit):
    code = stitch(trace_method(loopabit, 0))
    assert [op.origin_pc for op in code.body.ops] == [0, 1, 3, 4, 5, 7, 8, 10]
    assert [b.entry_pc for b in code.bridges] == [12, 25]
    guards = {g.origin_pc: g for g in code.guards}
    assert code.links[guards[8].guard_id].entry_pc == 12
    assert code.links[guards[21].guard_id].entry_pc == 25
    # the bridge at 12 jumps back into the body interior
    term = code.bridges[0].terminator
    assert isinstance(term, JumpOp) and term.target_token.pc == 1
    assert code.resolve(1) == (code.body, 1)


def test_straight_line_single_body():
    code = stitch(trace_method(assemble("CONST_INT 5\nEXIT\n"), 0))
    assert code.bridges == [] and len(code.body.ops) == 2
    assert isinstance(code.body.terminator, RetOp)


def test_token_map_numbering(loopabit):
    trace = trace_method(loopabit, 0)
    tmap = create_token_map(trace.ops)
    assert list(tmap) == [1, RETURN]
    assert [t.token_id for t in tmap.values()] == [0, 1]


def test_pairing_on_hand_trace():
    ops, g1, g2 = branchy_trace()
    pairs = do_trace_stitching(InputArgs(0), ops)
    assert [(seg.entry_pc, guard) for seg, guard in pairs] == [
        (BRANCHY_PCS["A"], None),
        (BRANCHY_PCS["F"], g2),
        (BRANCHY_PCS["D"], g1),
    ]
    # first in, last out: g1 was pushed first and is consumed last
    assert [guard.guard_id for _, guard in pairs[1:]] == [2, 1]


def test_branchy_program_stitches_the_same_way(branchy):
    code = stitch(trace_method(branchy, 0))
    entries = [seg.entry_pc for seg in code.segments]
    assert entries == [BRANCHY_PCS["A"], BRANCHY_PCS["F"], BRANCHY_PCS["D"]]
    g_first, g_second = code.guards
    assert code.links[g_second.guard_id].entry_pc == BRANCHY_PCS["F"]
    assert code.links[g_first.guard_id].entry_pc == BRANCHY_PCS["D"]


def test_emit_first_is_an_error():
    with pytest.raises(StitchError, match="no preceding op"):
        do_trace_stitching(InputArgs(0), [EmitRet(0, Opcode.EXIT, 1)])


def test_ops_after_terminator():
    ops = [CallHandler(0, Opcode.DUP), RetOp(1, Opcode.EXIT, 1), CallHandler(2, Opcode.DUP)]
    with pytest.raises(StitchError, match="after the final"):
        do_trace_stitching(InputArgs(0), ops)


def test_undrained_guard_stack():
    g = GuardFailure(0, 9, False)
    ops = [CallHandler(0, Opcode.DUP), Guard(0, 1, False, True, g, 9), EmitRet(3, Opcode.EXIT, 1)]
    with pytest.raises(StitchError, match="not drained"):
        do_trace_stitching(InputArgs(0), ops)


def test_missing_token():
    with pytest.raises(StitchError, match="no target token"):
        handle_emit_jump(EmitJump(3, 0), InputArgs(0), {})


def test_bridge_entry_must_match_resume_pc():
    g = GuardFailure(0, 11, False)
    ops = [
        CallHandler(0, Opcode.DUP),
        Guard(0, 1, False, True, g, 11),
        EmitRet(3, Opcode.EXIT, 1),
        CallHandler(12, Opcode.DUP),  # should start at 11
        EmitRet(13, Opcode.EXIT, 1),
    ]
    pairs = do_trace_stitching(InputArgs(0), ops)
    with pytest.raises(StitchError, match="resume pc"):
        link_segments(pairs, create_token_map(ops))


def test_guard_takes_one_bridge():
    g = GuardFailure(0, 4, False)
    g.set_bridge("first")
    with pytest.raises(ValueError, match="already"):
        g.set_bridge("second")


@pytest.mark.parametrize("name", ["loop", "loopabit", "callabit"])
def test_reconstructed_cfg_matches_decode(name):
    from ttvm import programs

    prog = programs.load(name)
    for entry in prog.function_entries():
        code = stitch(trace_method(prog, entry))
        assert reconstruct_cfg(code) == control_flow_graph(prog, entry)
