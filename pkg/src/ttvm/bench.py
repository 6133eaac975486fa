"""Benchmark harness: stable and startup protocols plus compile metrics.

Stable speed runs one session ``iterations`` times (101 by default), drops
the first run and sums the rest. Startup speed builds a fresh session for
each of ``startup_runs`` runs (100 by default), so warm-up and compilation
are paid every time; with ``spawn=True`` each run is a new OS process.

Times come from ``time.perf_counter_ns`` and are reported in milliseconds.
Speeds are normalized to the interpreter-only row of the same program and
argument (higher is better).
"""
from __future__ import annotations

import csv
import io
import json
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import programs
from .bytecode import Program, load_program
from .interpreter import Done, Error
from .tiers import TierPolicy, VmSession, normalize_mode

SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "program",
    "arg",
    "label",
    "mode",
    "entry_tier",
    "ok",
    "result",
    "error",
    "stable_ms",
    "startup_ms",
    "normalized_stable",
    "normalized_startup",
    "recorded_ops",
    "emitted_ops",
    "guards",
    "compilations",
    "compile_ms",
    "guard_deopts",
    "transitions",
    "decodes",
    "dispatches",
)


@dataclass(frozen=True)
class Cell:
    """One row of a suite: a program, an argument and a configuration."""

    program: str  # bundled name or path to a .tla/.tlb file
    arg: int
    label: str  # mode name or callabit variant name
    mode: str
    entry_tier: str = "t1"
    variant: Optional[str] = None

    def load(self) -> Program:
        if self.variant is not None:
            return programs.callabit_variant(self.variant)
        if self.program in programs.NAMES:
            return programs.load(self.program)
        return load_program(self.program)


@dataclass
class Row:
    program: str
    arg: int
    label: str
    mode: str
    entry_tier: str
    ok: bool = True
    result: Optional[int] = None
    error: Optional[str] = None
    stable_ms: Optional[float] = None
    startup_ms: Optional[float] = None
    normalized_stable: Optional[float] = None
    normalized_startup: Optional[float] = None
    recorded_ops: int = 0
    emitted_ops: int = 0
    guards: int = 0
    compilations: int = 0
    compile_ms: float = 0.0
    guard_deopts: int = 0
    transitions: int = 0
    decodes: int = 0
    dispatches: int = 0
    compile_records: list = field(default_factory=list)


def cells_for(program: str, arg: int, modes: list[str]) -> list[Cell]:
    """Expand mode names; callabit variant names select a rewritten program."""
    cells = []
    for name in modes:
        variant = programs.VARIANT_LETTERS.get(name, name)
        if variant in programs.CALLABIT_VARIANTS:
            _, mode, entry_tier = programs.CALLABIT_VARIANTS[variant]
            cells.append(Cell(program, arg, variant, mode, entry_tier, variant))
        else:
            mode = normalize_mode(name)
            cells.append(Cell(program, arg, mode, mode))
    return cells


def default_suite() -> list[Cell]:
    cells = cells_for("loop", 1000, ["interp", "t1", "t2"])
    cells += cells_for("loopabit", 50, ["interp", "t1", "t2"])
    cells += cells_for("callabit", 50, ["interp", *programs.CALLABIT_VARIANTS])
    return cells


def load_suite(path: str | Path) -> list[Cell]:
    """A JSON list of ``{"program": ..., "arg": ..., "modes": [...]}``."""
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise ValueError("suite file must hold a JSON list")
    cells = []
    for entry in entries:
        if isinstance(entry, list):
            program, arg, modes = entry
        else:
            program, arg, modes = entry["program"], entry["arg"], entry["modes"]
        if program not in programs.NAMES:
            program = str((Path(path).parent / program).resolve()) if not Path(program).is_absolute() else program
        cells.append(cells_for(program, int(arg), list(modes)))
    return [c for group in cells for c in group]


def _policy(cell: Cell, overrides: dict) -> TierPolicy:
    return TierPolicy(mode=cell.mode, entry_tier=cell.entry_tier, **overrides)


def _spawn_once(cell: Cell, overrides: dict) -> int:
    cmd = [sys.executable, "-m", "ttvm", "run", cell.program, "--arg", str(cell.arg), "--mode", cell.mode]
    if cell.variant is not None:
        cmd = [sys.executable, "-m", "ttvm", "run", "callabit", "--variant", cell.variant, "--arg", str(cell.arg)]
    flags = {"t1_call_threshold": "--t1-threshold", "t2_loop_threshold": "--t2-threshold", "bridge_threshold": "--bridge-threshold"}
    for key, flag in flags.items():
        if key in overrides:
            cmd += [flag, str(overrides[key])]
    start = time.perf_counter_ns()
    subprocess.run(cmd, check=False, capture_output=True)
    return time.perf_counter_ns() - start


def run_cell(cell: Cell, iterations: int = 101, startup_runs: int = 100, spawn: bool = False, **overrides) -> Row:
    row = Row(cell.program if cell.variant is None else "callabit", cell.arg, cell.label, cell.mode, cell.entry_tier)
    try:
        program = cell.load()
        session = VmSession(program, _policy(cell, overrides))
        total = 0
        outcome = None
        for i in range(iterations):
            start = time.perf_counter_ns()
            outcome = session.run(cell.arg)
            elapsed = time.perf_counter_ns() - start
            if i > 0 or iterations == 1:
                total += elapsed
            if isinstance(outcome, Error):
                break
        if isinstance(outcome, Error):
            row.ok = False
            row.error = f"{outcome.kind} at pc {outcome.pc}"
            return row
        if isinstance(outcome, Done):
            row.result = outcome.value
        row.stable_ms = total / 1e6
        m = session.metrics
        row.recorded_ops = m.recorded_ops
        row.emitted_ops = m.emitted_ops
        row.guards = sum(c.guards for c in m.compilations)
        row.compilations = len(m.compilations)
        row.compile_ms = m.compile_seconds * 1e3
        row.guard_deopts = m.guard_deopts
        row.transitions = m.transitions
        row.decodes = m.decodes
        row.dispatches = m.dispatches
        row.compile_records = [
            {k: v for k, v in asdict(c).items() if k != "seconds"} for c in m.compilations
        ]

        total = 0
        for _ in range(startup_runs):
            if spawn:
                total += _spawn_once(cell, overrides)
            else:
                start = time.perf_counter_ns()
                VmSession(program, _policy(cell, overrides)).run(cell.arg)
                total += time.perf_counter_ns() - start
        row.startup_ms = total / 1e6
    except Exception as exc:  # a broken cell is reported, not fatal to the suite
        row.ok = False
        row.error = f"{type(exc).__name__}: {exc}"
    return row


def normalize(rows: list[Row]) -> None:
    """Fill normalized speeds against the interp row of each (program, arg)."""
    anchors = {(r.program, r.arg): r for r in rows if r.label == "interp" and r.ok}
    for r in rows:
        anchor = anchors.get((r.program, r.arg))
        if anchor is None or not r.ok:
            continue
        if r.stable_ms and anchor.stable_ms is not None:
            r.normalized_stable = anchor.stable_ms / r.stable_ms
        if r.startup_ms and anchor.startup_ms is not None:
            r.normalized_startup = anchor.startup_ms / r.startup_ms
        if r is anchor:
            r.normalized_stable = r.normalized_startup = 1.0


def run_suite(
    cells: list[Cell],
    iterations: int = 101,
    startup_runs: int = 100,
    spawn: bool = False,
    jobs: int = 1,
    **overrides,
) -> dict:
    def one(cell: Cell) -> Row:
        return run_cell(cell, iterations, startup_runs, spawn, **overrides)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(one, cells))
    else:
        rows = [one(c) for c in cells]
    normalize(rows)
    return {
        "schema_version": SCHEMA_VERSION,
        "protocol": {
            "iterations": iterations,
            "discarded": 1 if iterations > 1 else 0,
            "startup_runs": startup_runs,
            "startup": "spawn" if spawn else "session",
            "clock": "perf_counter_ns",
            "unit": "ms",
        },
        "thresholds": overrides,
        "rows": [asdict(r) for r in rows],
    }


def schema() -> dict:
    text = resources.files(__package__).joinpath("schemas/bench_report.schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, schema())


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in report["rows"]:
        writer.writerow(row)
    return buf.getvalue()


def summary(report: dict) -> str:
    lines = [f"{'program':<10} {'arg':>6} {'label':<18} {'stable ms':>10} {'norm':>6} {'startup ms':>11} {'norm':>6} {'ops':>5}"]
    for r in report["rows"]:
        if not r["ok"]:
            lines.append(f"{r['program']:<10} {r['arg']:>6} {r['label']:<18} error: {r['error']}")
            continue
        ns = "-" if r["normalized_stable"] is None else f"{r['normalized_stable']:.2f}"
        nu = "-" if r["normalized_startup"] is None else f"{r['normalized_startup']:.2f}"
        lines.append(
            f"{r['program']:<10} {r['arg']:>6} {r['label']:<18} {r['stable_ms']:>10.2f} {ns:>6} "
            f"{r['startup_ms']:>11.2f} {nu:>6} {r['emitted_ops']:>5}"
        )
    return "\n".join(lines) + "\n"
