"""Watch method traversal flatten loopabit, then stitching rebuild its shape.

Method traversal walks both arms of every branch, so the whole method comes
out as one linear trace with "cut here" markers. Stitching cuts the trace at
those markers into a body plus one bridge per branch and links each bridge
to the guard whose failure it handles.
"""
from ttvm import disassemble, stitch, trace_method
from ttvm import programs
from ttvm.bytecode import control_flow_graph
from ttvm.export import ops_to_text, stitched_to_dot, stitched_to_text
from ttvm.stitcher import reconstruct_cfg

prog = programs.load("loopabit")
print(disassemble(prog))

trace = trace_method(prog, 0)
print(f"linear trace, {len(trace.ops)} ops:")
print(ops_to_text(trace.ops))

code = stitch(trace)
print(f"stitched: body + {len(code.bridges)} bridges, {code.op_count} ops")
print(stitched_to_text(code))

# The links are enough to recover the original control flow graph.
assert reconstruct_cfg(code) == control_flow_graph(prog, 0)
print("reconstructed CFG matches the decoded one")

# Pipe this into `dot -Tsvg` to draw it; dashed edges are guard exits.
print(stitched_to_dot(code, "loopabit"))
