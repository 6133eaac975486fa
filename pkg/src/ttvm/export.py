"""Serializers for traces, stitched code and control-flow graphs.

JSON dumps are lists of op records with ``origin_pc`` and ``kind``; guards
also carry ``guard_id``, ``expected``, ``marked`` and ``resume_pc``.

DOT conventions: every segment is a box-shaped cluster labelled ``body`` or
``bridge@<pc>``, and each op is a node named ``s<segment>_<offset>``. Solid
edges are straight-line order, dashed edges labelled ``g<id>`` are
guard-failure links, and bold edges are JumpOp transfers.
"""
from __future__ import annotations

import json
from typing import Iterable

from .bytecode import Opcode, Program, control_flow_graph
from .stitcher import StitchedCode
from .tracer import CallHandler, EmitJump, EmitRet, Guard, JumpOp, RetOp


def op_record(op) -> dict:
    rec = {"origin_pc": op.origin_pc, "kind": type(op).__name__}
    if isinstance(op, CallHandler):
        rec["opcode"] = op.opcode.name
        if op.operand is not None:
            rec["operand"] = op.operand
    elif isinstance(op, Guard):
        rec.update(
            guard_id=op.guard_id,
            expected=op.expected,
            marked=op.marked,
            resume_pc=op.failure.resume_pc,
            failure_count=op.failure.failure_count,
        )
    elif isinstance(op, EmitJump):
        rec["target_pc"] = op.target_pc
        rec["synthetic"] = op.synthetic
    elif isinstance(op, JumpOp):
        rec["target_pc"] = op.target_token.pc
        rec["token"] = op.target_token.token_id
        rec["synthetic"] = op.synthetic
    elif isinstance(op, (EmitRet, RetOp)):
        rec["opcode"] = op.opcode.name
        rec["retval_slot"] = op.retval_slot
    return rec


def op_text(op) -> str:
    if isinstance(op, CallHandler):
        arg = "" if op.operand is None else f" {op.operand}"
        return f"call_handler({op.opcode.name}{arg})"
    if isinstance(op, Guard):
        mark = "marked " if op.marked else ""
        return f"guard_{str(op.expected).lower()}(g{op.guard_id}, {mark}resume={op.failure.resume_pc})"
    if isinstance(op, EmitJump):
        return f"emit_jump({op.target_pc}{', synthetic' if op.synthetic else ''})"
    if isinstance(op, EmitRet):
        return f"emit_ret({op.opcode.name}, {op.retval_slot})"
    if isinstance(op, JumpOp):
        return f"jump({op.target_token!r}{', synthetic' if op.synthetic else ''})"
    if isinstance(op, RetOp):
        return f"ret({op.opcode.name}, {op.retval_slot})"
    return repr(op)


def ops_to_json(ops: Iterable) -> list[dict]:
    return [op_record(op) for op in ops]


def ops_to_text(ops: Iterable) -> str:
    return "".join(f"{op.origin_pc:4d}  {op_text(op)}\n" for op in ops)


def _segment_names(code: StitchedCode) -> list[str]:
    return ["body"] + [f"bridge@{seg.entry_pc}" for seg in code.bridges]


def stitched_to_json(code: StitchedCode) -> dict:
    names = _segment_names(code)
    guard_of = {id(seg): gid for gid, seg in code.links.items()}
    return {
        "entry_pc": code.entry_pc,
        "segments": [
            {
                "name": name,
                "entry_pc": seg.entry_pc,
                "guard_id": guard_of.get(id(seg)),
                "ops": ops_to_json(seg.ops),
            }
            for name, seg in zip(names, code.segments)
        ],
        "op_count": code.op_count,
    }


def stitched_to_text(code: StitchedCode) -> str:
    out = []
    guard_of = {id(seg): gid for gid, seg in code.links.items()}
    for name, seg in zip(_segment_names(code), code.segments):
        link = f"  <- g{guard_of[id(seg)]}" if id(seg) in guard_of else ""
        out.append(f"{name}:{link}\n")
        out.append(ops_to_text(seg.ops))
    return "".join(out)


def stitched_to_dot(code: StitchedCode, name: str = "stitched") -> str:
    lines = [f'digraph "{name}" {{', "  node [shape=box, fontname=monospace];"]
    node_of = {}
    for si, seg in enumerate(code.segments):
        for oi in range(len(seg.ops)):
            node_of[(si, oi)] = f"s{si}_{oi}"
    seg_index = {id(seg): si for si, seg in enumerate(code.segments)}
    for si, (label, seg) in enumerate(zip(_segment_names(code), code.segments)):
        lines.append(f"  subgraph cluster_{si} {{")
        lines.append(f'    label="{label}"; style=rounded;')
        for oi, op in enumerate(seg.ops):
            text = op_text(op).replace('"', r"\"")
            lines.append(f'    s{si}_{oi} [label="{op.origin_pc}: {text}"];')
        for oi in range(len(seg.ops) - 1):
            lines.append(f"    s{si}_{oi} -> s{si}_{oi + 1};")
        lines.append("  }")
    for si, seg in enumerate(code.segments):
        for oi, op in enumerate(seg.ops):
            if isinstance(op, Guard) and op.guard_id in code.links:
                dest = seg_index[id(code.links[op.guard_id])]
                lines.append(f'  s{si}_{oi} -> s{dest}_0 [style=dashed, label="g{op.guard_id}"];')
            elif isinstance(op, JumpOp):
                hit = code.pc_index.get(op.target_token.pc)
                if hit is not None:
                    lines.append(f"  s{si}_{oi} -> s{seg_index[id(hit[0])]}_{hit[1]} [style=bold];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cfg_to_dot(program: Program, entry: int = 0, name: str = "cfg") -> str:
    """The program's decoded CFG from ``entry``; conditional edges are dashed."""
    nodes, edges = control_flow_graph(program, entry)
    lines = [f'digraph "{name}" {{', "  node [shape=box, fontname=monospace];"]
    for pc in sorted(nodes):
        instr = program.decode(pc)
        arg = "" if instr.operand is None else f" {instr.operand}"
        lines.append(f'  pc{pc} [label="{pc}: {instr.opcode.name}{arg}"];')
    for src, dst in sorted(edges):
        style = ""
        if program.decode(src).opcode is Opcode.JUMP_IF:
            style = " [style=dashed]" if dst == program.decode(src).operand else ""
        lines.append(f"  pc{src} -> pc{dst}{style};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cfg_to_json(program: Program, entry: int = 0) -> dict:
    nodes, edges = control_flow_graph(program, entry)
    return {"nodes": sorted(nodes), "edges": sorted(list(e) for e in edges)}


def dumps(obj) -> str:
    return json.dumps(obj, indent=2)


def _unit_name(unit) -> str:
    return f"loop@{unit.header}" if hasattr(unit, "header") else f"bridge@{unit.entry_pc}"


def loop_to_json(loop) -> dict:
    return {
        "header": loop.header,
        "ops": ops_to_json(loop.trace.ops),
        "emitted_ops": loop.op_count,
        "bridges": [
            {
                "guard_id": b.guard.guard_id,
                "entry_pc": b.entry_pc,
                "ops": ops_to_json(b.trace.ops),
                "emitted_ops": b.op_count,
            }
            for b in loop.bridges
        ],
    }


def loop_to_text(loop) -> str:
    out = [f"loop@{loop.header}:\n", ops_to_text(loop.trace.ops)]
    for b in loop.bridges:
        out.append(f"bridge@{b.entry_pc}:  <- g{b.guard.guard_id}\n")
        out.append(ops_to_text(b.trace.ops))
    return "".join(out)


def loop_to_dot(loop, name: str = "loop") -> str:
    """Tier-2 loop with its bridges, drawn with the same conventions."""
    units = [loop, *loop.bridges]
    lines = [f'digraph "{name}" {{', "  node [shape=box, fontname=monospace];"]
    for ui, unit in enumerate(units):
        lines.append(f"  subgraph cluster_{ui} {{")
        lines.append(f'    label="{_unit_name(unit)}"; style=rounded;')
        ops = unit.trace.ops
        for oi, op in enumerate(ops):
            text = op_text(op).replace('"', r"\"")
            lines.append(f'    u{ui}_{oi} [label="{op.origin_pc}: {text}"];')
        for oi in range(len(ops) - 1):
            lines.append(f"    u{ui}_{oi} -> u{ui}_{oi + 1};")
        lines.append("  }")
    index = {id(b): ui for ui, b in enumerate(units)}
    for ui, unit in enumerate(units):
        for oi, op in enumerate(unit.trace.ops):
            if isinstance(op, Guard) and op.failure.bridge is not None and id(op.failure.bridge) in index:
                lines.append(f'  u{ui}_{oi} -> u{index[id(op.failure.bridge)]}_0 [style=dashed, label="g{op.guard_id}"];')
            elif isinstance(op, JumpOp) and op.target_token.pc == loop.header:
                lines.append(f"  u{ui}_{oi} -> u0_0 [style=bold];")
    lines.append("}")
    return "\n".join(lines) + "\n"
