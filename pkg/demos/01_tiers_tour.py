"""Run the same program under every execution mode and compare the counters.

The interpreter decodes every instruction it runs. Tier 1 replaces decoding
with direct handler calls once a method is compiled, and tier 2 goes further
by running an inlined loop trace with no handler calls at all.
"""
from ttvm import TierPolicy, VmSession
from ttvm import programs

prog = programs.load("loop")

print(f"{'mode':<10} {'result':>7} {'decodes':>9} {'dispatches':>11} {'trace ops':>10} {'compiled':>9}")
for mode in ("interp", "t1", "t2", "annotated", "auto"):
    session = VmSession(prog, TierPolicy(mode=mode))
    # warm-up: enough runs to pass the call, loop and bridge thresholds
    for _ in range(20):
        session.run(200)
    m = session.metrics
    before = (m.decodes, m.dispatches, m.trace_ops)
    result = session.run(10_000)
    print(
        f"{mode:<10} {result.value:>7} {m.decodes - before[0]:>9} {m.dispatches - before[1]:>11} "
        f"{m.trace_ops - before[2]:>10} {len(session.code_cache):>9}"
    )

# Every mode spends exactly one unit of fuel per bytecode instruction, so a
# budget that runs out does so at the same pc whichever tier is running.
for mode in ("interp", "t1", "t2"):
    session = VmSession(prog, TierPolicy(mode=mode, t2_loop_threshold=2, fuel=5_000))
    session.run(50)
    print(mode, session.run(10_000))
