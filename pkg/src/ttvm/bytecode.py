"""TLA instruction set, assembler, disassembler and static checks.

A program is a flat byte string. Every instruction is one opcode byte,
optionally followed by a single unsigned operand byte.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional


class Opcode(enum.IntEnum):
    CONST_INT = 0
    DUP = 1
    POP = 2
    ADD = 3
    SUB = 4
    LT = 5
    EQ = 6
    JUMP = 7
    JUMP_IF = 8
    CALL = 9
    CALL_NORMAL = 10
    CALL_JIT = 11
    RET = 12
    EXIT = 13

    @property
    def arity(self) -> int:
        return 1 if self in _HAS_OPERAND else 0

    @property
    def width(self) -> int:
        return 1 + self.arity


_HAS_OPERAND = frozenset(
    {
        Opcode.CONST_INT,
        Opcode.JUMP,
        Opcode.JUMP_IF,
        Opcode.CALL,
        Opcode.CALL_NORMAL,
        Opcode.CALL_JIT,
        Opcode.RET,
    }
)
CALL_OPS = frozenset({Opcode.CALL, Opcode.CALL_NORMAL, Opcode.CALL_JIT})
BRANCH_OPS = frozenset({Opcode.JUMP, Opcode.JUMP_IF}) | CALL_OPS
TERMINATORS = frozenset({Opcode.RET, Opcode.EXIT})

# (values consumed, values produced). CALL* assumes the callee returns one value.
STACK_EFFECT: dict[Opcode, tuple[int, int]] = {
    Opcode.CONST_INT: (0, 1),
    Opcode.DUP: (1, 2),
    Opcode.POP: (1, 0),
    Opcode.ADD: (2, 1),
    Opcode.SUB: (2, 1),
    Opcode.LT: (2, 1),
    Opcode.EQ: (2, 1),
    Opcode.JUMP: (0, 0),
    Opcode.JUMP_IF: (1, 0),
    Opcode.CALL: (1, 1),
    Opcode.CALL_NORMAL: (1, 1),
    Opcode.CALL_JIT: (1, 1),
    Opcode.RET: (0, 0),  # operand-dependent, see stack_depths
    Opcode.EXIT: (1, 0),
}

MAX_CODE_SIZE = 256


class AssemblyError(ValueError):
    """Raised for malformed assembly text; carries 1-based line/column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        where = f"{line}:{column}: " if line else ""
        super().__init__(f"{where}{message}")


class DecodeError(ValueError):
    def __init__(self, pc: int, message: str):
        self.pc = pc
        super().__init__(f"pc {pc}: {message}")


@dataclass(frozen=True)
class Instruction:
    pc: int
    opcode: Opcode
    operand: Optional[int] = None

    @property
    def next_pc(self) -> int:
        return self.pc + self.opcode.width

    @property
    def target(self) -> Optional[int]:
        return self.operand if self.opcode in BRANCH_OPS else None

    def __str__(self) -> str:
        if self.operand is None:
            return self.opcode.name
        return f"{self.opcode.name} {self.operand}"


@dataclass(frozen=True)
class Program:
    code: bytes
    entry_pc: int = 0
    source_name: str = "<program>"

    def __len__(self) -> int:
        return len(self.code)

    def decode(self, pc: int) -> Instruction:
        code = self.code
        if not 0 <= pc < len(code):
            raise DecodeError(pc, "pc outside code")
        try:
            op = Opcode(code[pc])
        except ValueError:
            raise DecodeError(pc, f"unknown opcode byte {code[pc]}") from None
        if op.arity:
            if pc + 1 >= len(code):
                raise DecodeError(pc, f"truncated operand for {op.name}")
            return Instruction(pc, op, code[pc + 1])
        return Instruction(pc, op)

    def instructions(self) -> Iterator[Instruction]:
        """Linear sweep from offset 0."""
        pc = 0
        while pc < len(self.code):
            instr = self.decode(pc)
            yield instr
            pc = instr.next_pc

    def function_entries(self) -> list[int]:
        """The program entry plus every CALL* target, in ascending order."""
        entries = {self.entry_pc}
        for instr in reachable_instructions(self, self.entry_pc, follow_calls=True).values():
            if instr.opcode in CALL_OPS:
                entries.add(instr.operand)
        return sorted(entries)

    def backedge_targets(self) -> frozenset[int]:
        """Targets of JUMP/JUMP_IF whose target is at or before the branch."""
        targets = set()
        for instr in self.instructions():
            if instr.opcode in (Opcode.JUMP, Opcode.JUMP_IF) and instr.operand <= instr.pc:
                targets.add(instr.operand)
        return frozenset(targets)


def successors(instr: Instruction) -> tuple[int, ...]:
    """Intra-procedural successors; calls fall through."""
    op = instr.opcode
    if op is Opcode.JUMP:
        return (instr.operand,)
    if op is Opcode.JUMP_IF:
        if instr.operand == instr.next_pc:
            return (instr.next_pc,)
        return (instr.next_pc, instr.operand)
    if op in TERMINATORS:
        return ()
    return (instr.next_pc,)


def reachable_instructions(
    program: Program, entry: int, follow_calls: bool = False
) -> dict[int, Instruction]:
    """Decode everything reachable from ``entry``; raises DecodeError."""
    seen: dict[int, Instruction] = {}
    work = [entry]
    while work:
        pc = work.pop()
        if pc in seen:
            continue
        instr = program.decode(pc)
        seen[pc] = instr
        work.extend(successors(instr))
        if follow_calls and instr.opcode in CALL_OPS:
            work.append(instr.operand)
    return seen


def control_flow_graph(program: Program, entry: int) -> tuple[frozenset[int], frozenset[tuple[int, int]]]:
    """Node and edge sets of the method CFG at ``entry`` (calls not followed)."""
    instrs = reachable_instructions(program, entry)
    edges = frozenset((pc, s) for pc, instr in instrs.items() for s in successors(instr))
    return frozenset(instrs), edges


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    pc: int
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "valid"
        return "\n".join(f"pc {v.pc}: {v.message}" for v in self.violations)


def validate(program: Program) -> ValidationReport:
    report = ValidationReport()
    add = report.violations.append
    code = program.code
    if len(code) > MAX_CODE_SIZE:
        add(Violation(0, f"code is {len(code)} bytes, limit {MAX_CODE_SIZE}"))
    if not code:
        return report

    boundaries: dict[int, Instruction] = {}
    work = [program.entry_pc]
    while work:
        pc = work.pop()
        if pc in boundaries:
            continue
        if not 0 <= pc < len(code):
            add(Violation(pc, "target out of range"))
            continue
        try:
            instr = program.decode(pc)
        except DecodeError as exc:
            add(Violation(pc, str(exc).split(": ", 1)[1]))
            continue
        boundaries[pc] = instr
        for nxt in successors(instr):
            if nxt >= len(code) and nxt == instr.next_pc:
                add(Violation(pc, "falls off the end of the code"))
            elif nxt >= len(code):
                add(Violation(pc, f"target {nxt} out of range"))
            else:
                work.append(nxt)
        if instr.opcode in CALL_OPS:
            if instr.operand >= len(code):
                add(Violation(pc, f"target {instr.operand} out of range"))
            else:
                work.append(instr.operand)

    starts = sorted(boundaries)
    for a, b in zip(starts, starts[1:]):
        if b < boundaries[a].next_pc:
            add(Violation(b, f"overlaps instruction at pc {a}"))
    return report


def stack_depths(program: Program, entry: int, initial: int = 1) -> dict[int, int]:
    """Stack depth before every reachable instruction of the method at ``entry``.

    Raises ValueError on underflow or on a join with inconsistent depths.
    """
    instrs = reachable_instructions(program, entry)
    depth = {entry: initial}
    work = [entry]
    while work:
        pc = work.pop()
        instr = instrs[pc]
        d = depth[pc]
        if instr.opcode is Opcode.RET:
            pops, pushes = instr.operand, 0
        else:
            pops, pushes = STACK_EFFECT[instr.opcode]
        if d < pops:
            raise ValueError(f"pc {pc}: {instr.opcode.name} needs {pops} values, depth is {d}")
        after = d - pops + pushes
        for nxt in successors(instr):
            if nxt not in depth:
                depth[nxt] = after
                work.append(nxt)
            elif depth[nxt] != after:
                raise ValueError(f"pc {nxt}: inconsistent stack depth {depth[nxt]} vs {after}")
    return depth


# ---------------------------------------------------------------------------
# assembly text

_LABEL = re.compile(r"[A-Za-z_]\w*\Z")
_PC_PREFIX = re.compile(r"\d+:\Z")
_INT = re.compile(r"[+-]?\d+\Z")


def _parse_line(text: str, lineno: int):
    """Split one line into (pc prefix, label, mnemonic, operand).

    label, mnemonic and operand are (text, column) pairs or None.
    """
    hash_at = text.find("#")
    if hash_at >= 0:
        text = text[:hash_at]
    # commas act as separators so prefixed listings ("tla.CONST_INT, 1,")
    # can be pasted in unchanged
    text = text.replace(",", " ")
    tokens = [(m.group(), m.start() + 1) for m in re.finditer(r"\S+", text)]
    pcnum = label = None
    if tokens and _PC_PREFIX.match(tokens[0][0]):
        pcnum = int(tokens.pop(0)[0][:-1])
    if tokens and tokens[0][0].endswith(":"):
        name, col = tokens.pop(0)
        if not _LABEL.match(name[:-1]):
            raise AssemblyError(f"bad label {name[:-1]!r}", lineno, col)
        label = (name[:-1], col)
    mnemonic = tokens.pop(0) if tokens else None
    operand = tokens.pop(0) if tokens else None
    if tokens:
        raise AssemblyError(f"unexpected {tokens[0][0]!r}", lineno, tokens[0][1])
    return pcnum, label, mnemonic, operand


def assemble(source: str, source_name: str = "<asm>", entry_pc: int = 0) -> Program:
    """Assemble TLA text into a Program.

    Labels may be referenced before they are defined. A leading ``N:`` pc
    prefix (as produced by :func:`disassemble`) is checked against the
    actual offset.
    """
    items: list[tuple[Opcode, Optional[tuple[str, int]], int]] = []
    labels: dict[str, int] = {}
    offset = 0
    for lineno, text in enumerate(source.splitlines(), start=1):
        pcnum, label, mnemonic, operand = _parse_line(text, lineno)
        if pcnum is not None and pcnum != offset:
            raise AssemblyError(f"pc prefix {pcnum} does not match offset {offset}", lineno, 1)
        if label is not None:
            name, col = label
            if name in labels:
                raise AssemblyError(f"duplicate label {name!r}", lineno, col)
            labels[name] = offset
        if mnemonic is None:
            continue
        word, mcol = mnemonic
        name = word.upper()
        if name.startswith("TLA."):
            name = name[4:]
        try:
            op = Opcode[name]
        except KeyError:
            raise AssemblyError(f"unknown mnemonic {word!r}", lineno, mcol) from None
        if op.arity and operand is None:
            raise AssemblyError(f"{op.name} needs an operand", lineno, mcol)
        if not op.arity and operand is not None:
            raise AssemblyError(f"{op.name} takes no operand", lineno, operand[1])
        items.append((op, operand, lineno))
        offset += op.width

    if offset > MAX_CODE_SIZE:
        raise AssemblyError(f"program is {offset} bytes, limit is {MAX_CODE_SIZE}")

    code = bytearray()
    for op, token, lineno in items:
        code.append(op)
        if token is None:
            continue
        text, col = token
        if _INT.match(text):
            value = int(text)
        elif text in labels:
            value = labels[text]
        elif _LABEL.match(text):
            raise AssemblyError(f"undefined label {text!r}", lineno, col)
        else:
            raise AssemblyError(f"bad operand {text!r}", lineno, col)
        if not 0 <= value <= 255:
            raise AssemblyError(f"operand {value} out of byte range", lineno, col)
        code.append(value)
    return Program(bytes(code), entry_pc, source_name)


def disassemble(program: Program) -> str:
    """One ``pc: MNEMONIC [operand]`` line per instruction."""
    return "".join(f"{instr.pc}: {instr}\n" for instr in program.instructions())


def load_program(path: str | Path) -> Program:
    """Read a ``.tla`` (text) or ``.tlb`` (raw bytes) file."""
    path = Path(path)
    if path.suffix == ".tlb":
        return Program(path.read_bytes(), 0, path.name)
    return assemble(path.read_text(encoding="utf-8"), path.name)


def save_binary(program: Program, path: str | Path) -> None:
    Path(path).write_bytes(program.code)
