"""Acceptance criteria, one test each.

Every test records a PASS or FAIL line, printed in the pytest summary under
"acceptance criteria". ``python tests/test_acceptance.py`` runs just this file.
"""
import random
import sys
import time

import pytest

from ttvm import bench, programs
from ttvm.bytecode import control_flow_graph
from ttvm.stitcher import do_trace_stitching, reconstruct_cfg, stitch
from ttvm.tiers import TierPolicy, VmSession
from ttvm.tracer import Guard, InputArgs, t_empty, t_pop, t_push, trace_method

from conftest import BRANCHY_PCS, EAGER, branchy_trace, criterion
from randprog import program_suite
from refvm import RefVM, as_ref, callabit_ref, loop_ref, loopabit_ref

GOLD_MODES = ("interp", "t1", "t2", "annotated")
RANDOM_COUNT = 1000
RANDOM_ARGS = (0, 3, 7, 12)
FUEL = 20000

ORACLES = {"loop": loop_ref, "loopabit": loopabit_ref, "callabit": callabit_ref}


@pytest.fixture(scope="module")
def random_suite():
    return program_suite(2024, RANDOM_COUNT)


def test_criterion_1_modes_agree(random_suite):
    with criterion(1, "Done values identical across interp / t1 / t2 / annotated") as d:
        start = time.perf_counter()
        for name, oracle in ORACLES.items():
            prog = programs.load(name)
            for thresholds in ({}, EAGER):
                sessions = [VmSession(prog, TierPolicy(mode=m, **thresholds)) for m in GOLD_MODES]
                for n in range(1, 101):
                    outs = {s.run(n) for s in sessions}
                    assert len(outs) == 1, (name, n, outs)
                    assert outs.pop().value == oracle(n)
        mismatches = 0
        done = 0
        for prog, src in random_suite:
            sessions = [VmSession(prog, TierPolicy(mode=m, fuel=FUEL, **EAGER)) for m in GOLD_MODES]
            for arg in RANDOM_ARGS:
                ref = RefVM(prog.code, fuel=FUEL).run(arg)
                outs = [as_ref(s.run(arg)) for s in sessions]
                mismatches += sum(o != ref for o in outs)
                done += ref[0] == "done"
        d["programs"] = RANDOM_COUNT
        d["done_runs"] = done
        d["mismatches"] = mismatches
        d["seconds"] = round(time.perf_counter() - start, 1)
        assert mismatches == 0
        assert d["seconds"] < 60


def _check_structure(code):
    marked = [op for op in code.guards if isinstance(op, Guard) and op.marked]
    assert len(code.segments) == len(marked) + 1
    linked = list(code.links.values())
    # bijection: one bridge per guard, every bridge used once
    assert sorted(code.links) == sorted(g.guard_id for g in marked)
    assert len({id(b) for b in linked}) == len(linked) == len(code.bridges)
    assert {id(b) for b in linked} == {id(b) for b in code.bridges}
    for g in marked:
        assert code.links[g.guard_id].entry_pc == g.failure.resume_pc


def test_criterion_2_stitching_structure(random_suite):
    with criterion(2, "stitching: segments, guard-bridge bijection, entry pcs") as d:
        loop = stitch(trace_method(programs.load("loop"), 0))
        assert (len([loop.body]), len(loop.bridges)) == (1, 1)
        loopabit = stitch(trace_method(programs.load("loopabit"), 0))
        assert len(loopabit.bridges) == 2
        methods = 0
        for prog, _ in random_suite:
            for entry in prog.function_entries():
                _check_structure(stitch(trace_method(prog, entry)))
                methods += 1
        d["methods"] = methods
        assert methods >= RANDOM_COUNT


def test_criterion_3_cfg_oracle(random_suite):
    with criterion(3, "reconstructed CFG equals decoded CFG for every compiled method") as d:
        methods = 0
        suites = [(programs.load(n), 5) for n in programs.NAMES] + [(p, 3) for p, _ in random_suite]
        for prog, arg in suites:
            s = VmSession(prog, TierPolicy(mode="t1", fuel=FUEL, **EAGER))
            for _ in range(2):
                s.run(arg)
            for entry, code in s.t1_cache.items():
                assert reconstruct_cfg(code) == control_flow_graph(prog, entry), (prog.name, entry)
                methods += 1
        d["methods"] = methods
        assert methods >= RANDOM_COUNT


def test_criterion_4_trace_size():
    with criterion(4, "callabit (c) baseline+tracing compiles >= 20% fewer ops than (e)") as d:
        rows = {v: bench.run_cell(bench.cells_for("callabit", 50, [v])[0], startup_runs=0) for v in "ce"}
        c, e = rows["c"], rows["e"]
        assert c.ok and e.ok and c.result == e.result == callabit_ref(50)
        d["recorded_c"], d["recorded_e"] = c.recorded_ops, e.recorded_ops
        d["compiled_c"], d["compiled_e"] = c.emitted_ops, e.emitted_ops
        reduction = 1 - c.emitted_ops / e.emitted_ops
        d["smaller_by"] = f"{reduction:.0%}"
        assert reduction >= 0.20


def test_criterion_5_dispatch_economy():
    with criterion(5, "loop(10^6): no decodes when compiled, fewer dispatches than interp") as d:
        prog = programs.load("loop")
        deltas = {}
        for mode in ("interp", "t1", "t2"):
            s = VmSession(prog, TierPolicy(mode=mode))
            # warm up past the method, loop and bridge thresholds
            for _ in range(20):
                s.run(200)
            m = s.metrics
            before = (m.decodes, m.dispatches, m.trace_ops)
            assert s.run(10**6).value == -10
            deltas[mode] = (m.decodes - before[0], m.dispatches - before[1], m.trace_ops - before[2])
            d[f"{mode}_decodes"], d[f"{mode}_dispatches"] = deltas[mode][:2]
        assert deltas["t1"][0] == 0 and deltas["t2"][0] == 0
        assert deltas["t1"][1] < deltas["interp"][1]
        assert deltas["t2"][1] < deltas["interp"][1]


def test_criterion_6_pairing_on_hand_trace():
    with criterion(6, "hand trace pairs (body, none), (F, g2), (D, g1), first in last out"):
        ops, g1, g2 = branchy_trace()
        pairs = do_trace_stitching(InputArgs(0), ops)
        got = [(seg.entry_pc, guard) for seg, guard in pairs]
        assert got == [(BRANCHY_PCS["A"], None), (BRANCHY_PCS["F"], g2), (BRANCHY_PCS["D"], g1)]
        assert [guard.guard_id for _, guard in pairs[1:]] == [2, 1]


def test_criterion_7_interning():
    with criterion(7, "10^4 interleaved t_push/t_pop never duplicate a node") as d:
        rng = random.Random(7)
        memo = {}
        seen = {}  # (pc, id of next) -> the one node for that key
        stack = t_empty()
        pushes = 0
        for _ in range(10**4):
            if stack is not None and rng.random() < 0.45:
                _, stack = t_pop(stack)
                continue
            pc = rng.randrange(8)  # a small pc range forces repeated keys
            key = (pc, id(stack))
            node = t_push(pc, stack, memo)
            assert seen.setdefault(key, node) is node
            stack = node
            pushes += 1
        d["pushes"] = pushes
        d["distinct_nodes"] = len(seen)
        assert len(seen) < pushes


def test_criterion_8_deopt_lifecycle():
    with criterion(8, "t2 loop exit guard deopts exactly 3 times, then never") as d:
        s = VmSession(programs.load("loop"), TierPolicy(mode="t2", bridge_threshold=3))
        counts = []
        for _ in range(12):
            assert s.run(200).value == -10
            counts.append(s.metrics.guard_deopts)
        d["deopts_per_run"] = counts
        assert counts[-1] == 3
        # the count only grows while the bridge is missing, then stays flat
        assert counts == sorted(counts) and counts.count(3) == len(counts) - counts.index(3)


if __name__ == "__main__":
    status = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(status)
