"""The three benchmark programs and the callabit variants."""
from __future__ import annotations

from importlib import resources

from ..bytecode import Opcode, Program, assemble

NAMES = ("loop", "loopabit", "callabit")

# name -> (call opcode for sub_loop, session mode, entry tier under annotated)
CALLABIT_VARIANTS = {
    "baseline_interp": (Opcode.CALL_NORMAL, "annotated", "t1"),
    "baseline_only": (Opcode.CALL, "annotated", "t1"),
    "baseline_tracing": (Opcode.CALL_JIT, "annotated", "t1"),
    "tracing_baseline": (Opcode.CALL, "annotated", "t2"),
    "tracing_only": (Opcode.CALL_JIT, "annotated", "t2"),
}
VARIANT_LETTERS = dict(zip("abcde", CALLABIT_VARIANTS))


def source(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.tla").read_text()


def load(name: str) -> Program:
    if name not in NAMES:
        raise KeyError(f"no bundled program {name!r}")
    return assemble(source(name), f"{name}.tla")


def callabit_variant(name: str) -> Program:
    """callabit with its CALL opcode swapped, as the variant prescribes."""
    name = VARIANT_LETTERS.get(name, name)
    opcode = CALLABIT_VARIANTS[name][0]
    base = load("callabit")
    code = bytearray(base.code)
    for instr in base.instructions():
        if instr.opcode is Opcode.CALL:
            code[instr.pc] = opcode
    return Program(bytes(code), base.entry_pc, f"callabit_{name}")
