"""Command line: ``ttvm run|trace|bench|export|asm|disasm``.

Exit status is 0 on success, 1 when the program fails at run time (or a
dump has nothing to show), and 2 for usage errors such as a missing or
malformed input file. ``TTVM_MODE`` sets the default for ``--mode``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import bench, export, programs
from .bytecode import AssemblyError, DecodeError, Program, assemble, disassemble, load_program, save_binary, validate
from .interpreter import Done, Error
from .stitcher import reconstruct_cfg
from .tiers import MODE_ALIASES, MODES, TierPolicy, VmSession

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def load(target: str, variant: str | None = None) -> Program:
    """A bundled program name, or a path to a .tla (text) or .tlb (binary) file."""
    if variant is not None:
        if target != "callabit":
            raise UsageError("--variant only applies to callabit")
        try:
            return programs.callabit_variant(variant)
        except KeyError:
            raise UsageError(f"unknown callabit variant {variant!r}") from None
    if target in programs.NAMES and not Path(target).exists():
        return programs.load(target)
    path = Path(target)
    if not path.is_file():
        raise UsageError(f"no such file: {target}")
    try:
        program = load_program(path)
    except (AssemblyError, DecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"{target}: {exc}") from None
    report = validate(program)
    if not report.ok:
        raise UsageError(f"{target}: invalid program: {report.violations[0]}")
    return program


def policy_from(args) -> TierPolicy:
    mode = args.mode
    entry_tier = getattr(args, "entry_tier", None)
    variant = getattr(args, "variant", None)
    if variant is not None:
        name = programs.VARIANT_LETTERS.get(variant, variant)
        _, mode, entry_tier = programs.CALLABIT_VARIANTS[name]
    try:
        return TierPolicy.from_env(
            mode=mode,
            entry_tier=entry_tier,
            t1_call_threshold=args.t1_threshold,
            t2_loop_threshold=args.t2_threshold,
            t1_loop_threshold=args.t1_loop_threshold,
            bridge_threshold=args.bridge_threshold,
            fuel=args.fuel,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def format_outcome(outcome) -> str:
    if isinstance(outcome, Done):
        return " ".join(str(v).lower() if isinstance(v, bool) else str(v) for v in outcome.values)
    return f"error: {outcome.kind} at pc {outcome.pc}: {outcome.message}"


def cmd_run(args) -> int:
    program = load(args.file, args.variant)
    session = VmSession(program, policy_from(args))
    outcome = None
    for _ in range(args.repeat):
        outcome = session.run(args.arg)
        if isinstance(outcome, Error):
            break
    if isinstance(outcome, Error):
        print(format_outcome(outcome), file=sys.stderr)
        status = EXIT_FAIL
    else:
        print(format_outcome(outcome))
        status = EXIT_OK
    if args.stats:
        stats = session.metrics.snapshot()
        stats.pop("compilations")
        print(json.dumps(stats, sort_keys=True), file=sys.stderr)
    return status


def _dump_units(session: VmSession, fmt: str, stage: str) -> str:
    chunks = []
    data = []
    for entry, code in sorted(session.t1_cache.items()):
        name = f"method@{entry}"
        if stage == "linear":
            ops = session.t1_traces[entry].ops
            if fmt == "json":
                data.append({"unit": name, "ops": export.ops_to_json(ops)})
            elif fmt == "dot":
                raise UsageError("dot output needs --stage stitched")
            else:
                chunks.append(f"{name}:\n{export.ops_to_text(ops)}")
        else:
            if fmt == "json":
                data.append({"unit": name, **export.stitched_to_json(code)})
            elif fmt == "dot":
                chunks.append(export.stitched_to_dot(code, name))
            else:
                chunks.append(f"# {name}\n{export.stitched_to_text(code)}")
    for header, loop in sorted(session.t2_cache.items()):
        name = f"loop@{header}"
        if fmt == "json":
            data.append({"unit": name, **export.loop_to_json(loop)})
        elif fmt == "dot":
            chunks.append(export.loop_to_dot(loop, name))
        else:
            chunks.append(f"# {name}\n{export.loop_to_text(loop)}")
    if fmt == "json":
        return export.dumps(data) + "\n"
    return "\n".join(chunks)


def _compile(args) -> VmSession:
    program = load(args.file, getattr(args, "variant", None))
    session = VmSession(program, policy_from(args))
    for _ in range(args.repeat):
        outcome = session.run(args.arg)
        if isinstance(outcome, Error):
            print(format_outcome(outcome), file=sys.stderr)
            break
    return session


def cmd_trace(args) -> int:
    session = _compile(args)
    if not session.t1_cache and not session.t2_cache:
        print("nothing was compiled; raise --repeat or --arg, or lower the thresholds", file=sys.stderr)
        return EXIT_FAIL
    _write(args.output, _dump_units(session, args.format, args.stage))
    return EXIT_OK


def cmd_export(args) -> int:
    if args.what == "cfg":
        program = load(args.file)
        entry = program.entry_pc if args.entry is None else args.entry
        if args.format == "json":
            text = export.dumps(export.cfg_to_json(program, entry)) + "\n"
        else:
            text = export.cfg_to_dot(program, entry)
        _write(args.output, text)
        return EXIT_OK
    session = _compile(args)
    if not session.t1_cache:
        print("no stitched code; run under t1 with enough --repeat", file=sys.stderr)
        return EXIT_FAIL
    chunks = []
    for entry, code in sorted(session.t1_cache.items()):
        if args.format == "json":
            nodes, edges = reconstruct_cfg(code)
            chunks.append(export.dumps({"unit": f"method@{entry}", **export.stitched_to_json(code),
                                        "cfg": {"nodes": sorted(nodes), "edges": sorted(list(e) for e in edges)}}) + "\n")
        else:
            chunks.append(export.stitched_to_dot(code, f"method@{entry}"))
    _write(args.output, "\n".join(chunks))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.suite:
        try:
            cells = bench.load_suite(args.suite)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"bad suite file {args.suite}: {exc}") from None
    elif args.programs:
        cells = []
        modes = args.modes or ["interp", "t1", "t2"]
        for name in args.programs:
            load(name)
            cells += bench.cells_for(name, args.arg, modes)
    else:
        cells = bench.default_suite()
    overrides = {
        k: v
        for k, v in {
            "t1_call_threshold": args.t1_threshold,
            "t2_loop_threshold": args.t2_threshold,
            "t1_loop_threshold": args.t1_loop_threshold,
            "bridge_threshold": args.bridge_threshold,
        }.items()
        if v is not None
    }
    report = bench.run_suite(cells, args.iterations, args.startup_runs, args.spawn, args.jobs, **overrides)
    if args.out == "json":
        text = json.dumps(report, indent=2) + "\n"
    elif args.out == "csv":
        text = bench.to_csv(report)
    else:
        text = bench.summary(report)
    _write(args.output, text)
    return EXIT_OK


def cmd_asm(args) -> int:
    path = Path(args.file)
    if not path.is_file():
        raise UsageError(f"no such file: {args.file}")
    try:
        program = assemble(path.read_text(), path.name)
    except AssemblyError as exc:
        raise UsageError(f"{args.file}: {exc}") from None
    out = Path(args.output) if args.output else path.with_suffix(".tlb")
    save_binary(program, out)
    print(f"{out}: {len(program.code)} bytes")
    return EXIT_OK


def cmd_disasm(args) -> int:
    print(disassemble(load(args.file)), end="")
    return EXIT_OK


def _write(path, text: str) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _add_tier_flags(p: argparse.ArgumentParser, repeat: int) -> None:
    p.add_argument("--arg", type=int, default=10, help="initial stack value (default 10)")
    p.add_argument("--mode", choices=MODES + tuple(MODE_ALIASES), default=os.environ.get("TTVM_MODE") or None,
                   help="execution mode (default annotated, or $TTVM_MODE)")
    p.add_argument("--entry-tier", choices=("interp", "t1", "t2"), help="entry frame regime under annotated mode")
    p.add_argument("--variant", help="callabit variant: a-e or its long name")
    p.add_argument("--t1-threshold", type=int, help="calls before a method is baseline-compiled")
    p.add_argument("--t1-loop-threshold", type=int, help="back-edges before a running method is baseline-compiled")
    p.add_argument("--t2-threshold", type=int, help="back-edges before a loop is traced")
    p.add_argument("--bridge-threshold", type=int, help="guard failures before a bridge is traced")
    p.add_argument("--fuel", type=int, help="instruction budget per run")
    p.add_argument("--repeat", type=int, default=repeat, help=f"runs in one session (default {repeat})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttvm", description="two-tier tracing VM for TLA bytecode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a program and print its result")
    p.add_argument("file", help="bundled name (loop, loopabit, callabit) or .tla/.tlb path")
    _add_tier_flags(p, repeat=1)
    p.add_argument("--stats", action="store_true", help="print metrics as JSON on stderr")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("trace", help="dump compiled traces")
    p.add_argument("file")
    _add_tier_flags(p, repeat=3)
    p.add_argument("--format", choices=("text", "json", "dot"), default="text")
    p.add_argument("--stage", choices=("linear", "stitched"), default="stitched")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("export", help="export the CFG or stitched code as a graph")
    p.add_argument("file")
    _add_tier_flags(p, repeat=3)
    p.add_argument("--what", choices=("cfg", "stitched"), default="cfg")
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.add_argument("--entry", type=int, help="method entry pc for --what cfg")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="run the stable/startup benchmark protocol")
    p.add_argument("suite", nargs="?", help="JSON suite file: list of {program, arg, modes}")
    p.add_argument("--programs", nargs="+", help="bundled names or paths instead of a suite")
    p.add_argument("--modes", nargs="+", help="modes or callabit variants (default interp t1 t2)")
    p.add_argument("--arg", type=int, default=100)
    p.add_argument("--iterations", type=int, default=101)
    p.add_argument("--startup-runs", type=int, default=100)
    p.add_argument("--spawn", action="store_true", help="time startup with fresh OS processes")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--t1-threshold", type=int)
    p.add_argument("--t1-loop-threshold", type=int)
    p.add_argument("--t2-threshold", type=int)
    p.add_argument("--bridge-threshold", type=int)
    p.add_argument("--out", choices=("json", "csv", "text"), default="text")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("asm", help="assemble a .tla file into .tlb bytes")
    p.add_argument("file")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_asm)

    p = sub.add_parser("disasm", help="print a program's instructions")
    p.add_argument("file")
    p.set_defaults(func=cmd_disasm)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"ttvm: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
