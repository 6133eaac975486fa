"""Mix the two tiers inside one program and compare how much code each mix compiles.

callabit has an outer loop that calls an inner loop. The call opcode at the
call site picks the callee's tier and the entry tier picks the caller's, which
gives five variants. Compiling the outer method with tier 1 and only the hot
inner loop with tier 2 produces the smallest code.
"""
from ttvm import TierPolicy, VmSession, bench, programs

rows = []
for letter, name in programs.VARIANT_LETTERS.items():
    row = bench.run_cell(bench.cells_for("callabit", 50, [letter])[0], iterations=21, startup_runs=5)
    rows.append(row)
    units = ", ".join(f"{c['tier']} {c['kind']}@{c['pc']}={c['emitted_ops']}" for c in row.compile_records)
    print(f"({letter}) {name:<17} result={row.result} ops={row.emitted_ops:>3}  [{units}]")

by_name = {r.label: r for r in rows}
c, e = by_name["baseline_tracing"], by_name["tracing_only"]
print(f"baseline+tracing compiles {1 - c.emitted_ops / e.emitted_ops:.0%} fewer ops than tracing only")

# A tier-2 guard that keeps failing gets a bridge after bridge_threshold
# failures; from then on the failure path stays in compiled code.
session = VmSession(programs.load("loop"), TierPolicy(mode="t2", bridge_threshold=3))
history = []
for _ in range(6):
    session.run(200)
    history.append(session.metrics.guard_deopts)
print("guard deopts after each run:", history)
