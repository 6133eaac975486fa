"""A two-tier tracing virtual machine for a small stack bytecode."""
from .bytecode import Opcode, Program, assemble, disassemble, load_program, validate
from .interpreter import Deopt, Done, Error, Frame, interpret
from .stitcher import StitchedCode, do_trace_stitching, link_segments, stitch
from .tiers import MetricsSink, TierPolicy, VmSession, make_session
from .tracer import trace_bridge, trace_loop, trace_method

__all__ = [
    "Opcode", "Program", "assemble", "disassemble", "load_program", "validate",
    "Deopt", "Done", "Error", "Frame", "interpret",
    "StitchedCode", "do_trace_stitching", "link_segments", "stitch",
    "MetricsSink", "TierPolicy", "VmSession", "make_session",
    "trace_bridge", "trace_loop", "trace_method",
]
__version__ = "0.1.0"
