"""Sessions: call dispatch, hotness, compilation and the code cache.

A :class:`VmSession` owns everything that outlives one frame. Each frame
carries an execution regime (``frame.tier``):

``interp``
    plain interpretation, no profiling and no compiled code.
``t1``
    the method is compiled by method traversal plus stitching once it is
    hot, and then runs as threaded code.
``t2``
    loops are traced at run time once their header is hot; guard exits
    that keep failing get bridges.
``auto``
    both, chosen by counters alone: methods tier up to t1 on entry
    hotness, and hot back-edges inside t1 code hand over to t2.

The session mode picks regimes. ``annotated`` lets each call opcode decide
(CALL is baseline, CALL_NORMAL is interpreted, CALL_JIT is traced), which
is how the callabit variants are expressed.
"""
from __future__ import annotations

import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

from .bytecode import Opcode, Program
from .executor import (
    BridgeCode,
    LoopCode,
    execute_loop,
    execute_stitched,
    lower_bridge,
    lower_loop,
)
from .interpreter import (
    CallDepthExceeded,
    Done,
    Error,
    Frame,
    Outcome,
    ProgramExit,
    Value,
    VMError,
    merge_points,
    run_frame,
)
from .stitcher import StitchedCode, StitchError, stitch
from .tracer import GuardFailure, TraceAborted, trace_bridge, trace_loop, trace_method

MODES = ("interp", "t1", "t2", "annotated", "auto")
MODE_ALIASES = {"interp-only": "interp", "t1-only": "t1", "t2-only": "t2"}

ENTRY = "function-entry"
BACKEDGE = "back-edge"

_CALL_TIER = {Opcode.CALL: "t1", Opcode.CALL_NORMAL: "interp", Opcode.CALL_JIT: "t2"}


def normalize_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return mode


@dataclass
class TierPolicy:
    t1_call_threshold: int = 2
    t2_loop_threshold: int = 100
    bridge_threshold: int = 16
    t1_loop_threshold: int = 100
    mode: str = "annotated"
    entry_tier: str = "t1"  # regime of the entry frame under ``annotated``
    max_trace_ops: int = 4096
    max_call_depth: int = 64
    trace_call_depth: int = 8
    max_loop_aborts: int = 3
    fuel: int = 10**8

    def __post_init__(self) -> None:
        self.mode = normalize_mode(self.mode)
        self.entry_tier = normalize_mode(self.entry_tier)
        if self.entry_tier not in ("interp", "t1", "t2"):
            raise ValueError(f"entry tier must be interp, t1 or t2, not {self.entry_tier!r}")
        for name in ("t1_call_threshold", "t2_loop_threshold", "bridge_threshold", "t1_loop_threshold"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_call_depth < 1 or self.max_trace_ops < 1 or self.fuel < 0:
            raise ValueError("limits must be positive")

    @classmethod
    def from_env(cls, **overrides) -> "TierPolicy":
        """Defaults, then ``TTVM_MODE``, then explicit (non-None) overrides."""
        values = {}
        if os.environ.get("TTVM_MODE"):
            values["mode"] = os.environ["TTVM_MODE"]
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass(frozen=True)
class CompileRecord:
    tier: str
    kind: str  # method, loop or bridge
    pc: int
    recorded_ops: int
    emitted_ops: int
    guards: int
    segments: int
    seconds: float


@dataclass
class MetricsSink:
    decodes: int = 0
    dispatches: int = 0
    trace_ops: int = 0  # residual tier-2 ops executed
    guard_deopts: int = 0
    trace_exits: int = 0
    transitions: int = 0
    runs: int = 0
    aborts: Counter = field(default_factory=Counter)
    compilations: list = field(default_factory=list)

    @property
    def recorded_ops(self) -> int:
        return sum(c.recorded_ops for c in self.compilations)

    @property
    def emitted_ops(self) -> int:
        return sum(c.emitted_ops for c in self.compilations)

    @property
    def compile_seconds(self) -> float:
        return sum(c.seconds for c in self.compilations)

    def snapshot(self) -> dict:
        return {
            "decodes": self.decodes,
            "dispatches": self.dispatches,
            "trace_ops": self.trace_ops,
            "guard_deopts": self.guard_deopts,
            "trace_exits": self.trace_exits,
            "transitions": self.transitions,
            "runs": self.runs,
            "recorded_ops": self.recorded_ops,
            "emitted_ops": self.emitted_ops,
            "compile_seconds": self.compile_seconds,
            "aborts": dict(self.aborts),
            "compilations": [asdict(c) for c in self.compilations],
        }


@dataclass(frozen=True)
class Trigger:
    tier: str  # t1 or t2
    pc: int  # the hot pc
    kind: str = ENTRY
    entry: Optional[int] = None  # method to compile for a tier-1 trigger


class VmSession:
    """Per-program runtime state shared by every frame of every run."""

    def __init__(self, program: Program, policy: Optional[TierPolicy] = None):
        self.program = program
        self.policy = policy or TierPolicy()
        self.metrics = MetricsSink()
        self.t1_cache: dict[int, StitchedCode] = {}
        self.t2_cache: dict[int, LoopCode] = {}
        self.t1_traces: dict = {}  # entry pc -> linear method trace, for dumps
        self.hotness: Counter = Counter()
        self.blacklist: set[tuple[str, int]] = set()
        self.intern: dict = {}
        self.fuel_left = self.policy.fuel
        self.depth = 0
        self.recording_aborted: Optional[str] = None
        self._recording: Optional[Frame] = None
        self._recording_depth = 0
        self._pending: dict[int, Trigger] = {}
        self._loop_aborts: Counter = Counter()
        self._merges = merge_points(program)

    # -- bookkeeping -------------------------------------------------------

    @property
    def mode(self) -> str:
        return self.policy.mode

    @property
    def profiles_backedges(self) -> bool:
        return self.policy.mode == "auto"

    @property
    def code_cache(self) -> dict:
        """Every compiled unit keyed by ``(tier, pc)``."""
        cache: dict = {("t1", pc): code for pc, code in self.t1_cache.items()}
        cache.update({("t2", pc): loop for pc, loop in self.t2_cache.items()})
        return cache

    def has_loop_code(self, program: Program, pc: int) -> bool:
        return program is self.program and pc in self.t2_cache

    def begin_recording(self, frame: Frame) -> None:
        if self._recording is not None:
            raise RuntimeError("a trace is already being recorded")
        self._recording = frame
        self._recording_depth = self.depth
        self.recording_aborted = None

    def end_recording(self) -> None:
        self._recording = None
        self.recording_aborted = None

    @property
    def recording(self) -> bool:
        return self._recording is not None

    def entry_regime(self) -> str:
        mode = self.policy.mode
        if mode == "annotated":
            return self.policy.entry_tier
        return mode

    def callee_regime(self, kind: Opcode) -> str:
        mode = self.policy.mode
        if mode == "annotated":
            return _CALL_TIER[Opcode(kind)]
        return mode

    # -- profiling and compilation ------------------------------------------

    def record_hot(self, pc: int, kind: str, tier: str) -> Optional[Trigger]:
        """Count one event; the trigger fires once, when the count hits the threshold."""
        if self._recording is not None:
            return None
        key = (kind, pc, tier)
        n = self.hotness[key] + 1
        self.hotness[key] = n
        if kind == ENTRY:
            threshold = self.policy.t1_call_threshold
        elif tier == "t2":
            threshold = self.policy.t2_loop_threshold
        else:
            threshold = self.policy.t1_loop_threshold
        if n == threshold:
            return Trigger(tier, pc, kind)
        return None

    def maybe_compile(self, trigger: Trigger, frame: Optional[Frame] = None):
        """Compile for ``trigger``; returns the new code or None.

        Tier-2 compilation records the loop by running it, so it needs the
        live frame, which it leaves at the pc where recording stopped.
        """
        if trigger.tier == "t1":
            entry = trigger.pc if trigger.entry is None else trigger.entry
            if ("t1", entry) in self.blacklist:
                return None
            if entry in self.t1_cache:
                return self.t1_cache[entry]
            return self._compile_method(entry)
        header = trigger.pc
        if ("t2", header) in self.blacklist or self._recording is not None:
            return None
        if header in self.t2_cache:
            return self.t2_cache[header]
        if frame is None or frame.pc != header:
            return None
        return self._compile_loop(header, frame)

    def _compile_method(self, entry: int) -> Optional[StitchedCode]:
        start = time.perf_counter_ns()
        try:
            trace = trace_method(self.program, entry, self.policy.max_trace_ops, self.intern)
            code = stitch(trace)
        except (TraceAborted, StitchError) as exc:
            reason = exc.reason if isinstance(exc, TraceAborted) else "stitch-error"
            self.metrics.aborts[reason] += 1
            self.blacklist.add(("t1", entry))
            return None
        seconds = (time.perf_counter_ns() - start) / 1e9
        self.t1_cache[entry] = code
        self.t1_traces[entry] = trace
        self.metrics.compilations.append(
            CompileRecord("t1", "method", entry, len(trace.ops), code.op_count, len(code.guards), len(code.segments), seconds)
        )
        return code

    def _compile_loop(self, header: int, frame: Frame) -> Optional[LoopCode]:
        start = time.perf_counter_ns()
        try:
            trace = trace_loop(self.program, header, frame, self)
        except TraceAborted as exc:
            self.metrics.aborts[exc.reason] += 1
            self._loop_aborts[header] += 1
            if exc.reason == "left-loop" and self._loop_aborts[header] < self.policy.max_loop_aborts:
                # the recorded iteration happened to leave the loop; the loop is
                # still hot, so retry on the next arrival at the header
                self.hotness[(BACKEDGE, header, "t2")] = self.policy.t2_loop_threshold - 1
            else:
                self.blacklist.add(("t2", header))
            return None
        loop = lower_loop(trace, self.program)
        seconds = (time.perf_counter_ns() - start) / 1e9
        self.t2_cache[header] = loop
        self.metrics.compilations.append(
            CompileRecord("t2", "loop", header, len(trace.ops), loop.op_count, len(trace.guards), 1, seconds)
        )
        return loop

    def compile_bridge(self, guard: GuardFailure, frame: Frame) -> Optional[BridgeCode]:
        """Record a bridge from the failing guard's resume pc and attach it."""
        owner: LoopCode = guard.owner
        if owner is None or self._recording is not None or guard.bridge is not None or guard.blacklisted:
            return None
        start = time.perf_counter_ns()
        try:
            trace = trace_bridge(guard, owner.header, frame, self)
        except TraceAborted as exc:
            self.metrics.aborts[exc.reason] += 1
            guard.blacklisted = True
            return None
        bridge = lower_bridge(trace, guard, owner)
        self.attach_bridge(guard, bridge)
        seconds = (time.perf_counter_ns() - start) / 1e9
        self.metrics.compilations.append(
            CompileRecord("t2", "bridge", trace.entry_pc, len(trace.ops), bridge.op_count, len(trace.guards), 1, seconds)
        )
        return bridge

    def attach_bridge(self, guard: GuardFailure, bridge: BridgeCode) -> None:
        if bridge.entry_pc != guard.resume_pc:
            raise ValueError(f"bridge enters at pc {bridge.entry_pc}, guard resumes at {guard.resume_pc}")
        guard.set_bridge(bridge)
        if guard.owner is not None:
            guard.owner.bridges.append(bridge)

    def on_backedge(self, frame: Frame, target: int) -> bool:
        """Profiling hook for back-edges inside tier-1 code (``auto`` only).

        Returns True when tier-1 code should hand the frame over so the loop
        at ``target`` can run, or be recorded, under tier 2.
        """
        if frame.tier != "auto" or target not in self._merges:
            return False
        if target in self.t2_cache:
            return True
        trigger = self.record_hot(target, BACKEDGE, "t2")
        if trigger is not None and ("t2", target) not in self.blacklist:
            self._pending[target] = trigger
            return True
        return False

    # -- execution ------------------------------------------------------------

    def run(self, arg: Value, entry: Optional[int] = None) -> Outcome:
        """Run the program once from ``entry`` with ``arg`` on the stack."""
        if entry is None:
            entry = self.program.entry_pc
        self.fuel_left = self.policy.fuel
        self.metrics.runs += 1
        frame = Frame(self.program, entry, [arg], None, entry, self.entry_regime())
        self.depth = 1
        try:
            return Done(self.enter(frame))
        except ProgramExit as exc:
            return Done((exc.value,), exited=True)
        except VMError as exc:
            return Error.from_exc(exc)
        finally:
            self.depth = 0
            self._recording = None
            self.recording_aborted = None

    def call(self, caller: Frame, kind: Opcode, callee_pc: int, argument: Value) -> tuple:
        """Run a callee for a CALL* in ``caller`` and return its RET values."""
        if self.depth >= self.policy.max_call_depth:
            raise CallDepthExceeded(caller.pc, f"call depth {self.depth} exceeds the limit")
        if self._recording is not None and self.depth - self._recording_depth >= self.policy.trace_call_depth:
            self.recording_aborted = "call-depth"
        frame = Frame(self.program, callee_pc, [argument], caller, callee_pc, self.callee_regime(kind))
        self.depth += 1
        try:
            return self.enter(frame)
        finally:
            self.depth -= 1

    def enter(self, frame: Frame) -> tuple:
        """Run a fresh frame to completion under its regime."""
        if frame.tier in ("t1", "auto"):
            code = self.t1_cache.get(frame.entry)
            if code is None:
                trigger = self.record_hot(frame.entry, ENTRY, "t1")
                if trigger is not None:
                    code = self.maybe_compile(trigger)
            if code is not None:
                done = self._run_t1(code, frame, None)
                if done is not None:
                    return done
        return run_frame(self, frame)

    def _run_t1(self, code: StitchedCode, frame: Frame, start_pc: Optional[int]):
        self.metrics.transitions += 1
        outcome = execute_stitched(code, frame, self, start_pc)
        if isinstance(outcome, Done):
            return outcome.values
        self.metrics.transitions += 1
        return None

    def _run_t2(self, loop: LoopCode, frame: Frame):
        self.metrics.transitions += 1
        outcome = execute_loop(loop, frame, self)
        if isinstance(outcome, Done):
            return outcome.values
        self.metrics.transitions += 1
        if outcome.reason == "bridge":
            self.compile_bridge(outcome.guard, frame)
        return None

    def merge_point(self, frame: Frame) -> Optional[tuple]:
        """Hook at backward-jump targets: profile, compile, run compiled code.

        Returns the frame's RET values if compiled code finished it, else
        None with ``frame.pc`` where interpretation continues.
        """
        merges = self._merges
        while True:
            pc = frame.pc
            tier = frame.tier
            if tier in ("t2", "auto"):
                loop = self.t2_cache.get(pc)
                if loop is None and self._recording is None:
                    trigger = self._pending.pop(pc, None)
                    if trigger is None and tier == "t2":
                        trigger = self.record_hot(pc, BACKEDGE, "t2")
                    elif trigger is None and tier == "auto" and frame.entry not in self.t1_cache:
                        trigger = self.record_hot(pc, BACKEDGE, "t2")
                    if trigger is not None:
                        loop = self.maybe_compile(trigger, frame)
                        if frame.pc != pc:
                            # recording ran the loop; look again where it stopped
                            if frame.pc in merges:
                                continue
                            return None
                if loop is not None:
                    done = self._run_t2(loop, frame)
                    if done is not None:
                        return done
                    if frame.pc in merges:
                        continue
                    return None
            if tier in ("t1", "auto"):
                code = self.t1_cache.get(frame.entry)
                if code is None and tier == "t1":
                    trigger = self.record_hot(pc, BACKEDGE, "t1")
                    if trigger is not None:
                        code = self.maybe_compile(Trigger("t1", frame.entry, BACKEDGE, frame.entry))
                if code is not None and pc in code.pc_index:
                    done = self._run_t1(code, frame, pc)
                    if done is not None:
                        return done
                    if frame.pc != pc and frame.pc in merges:
                        continue
            return None


def make_session(program: Program, mode: str = "annotated", **overrides) -> VmSession:
    return VmSession(program, TierPolicy(mode=mode, **overrides))


def dispatch_call(callee_pc: int, call_kind: Opcode, arg: Value, session: VmSession, caller: Optional[Frame] = None) -> Outcome:
    """Run one call as the caller's CALL* would, reporting an Outcome."""
    if caller is None:
        caller = Frame(session.program, callee_pc, [], None, callee_pc, session.entry_regime())
    try:
        return Done(session.call(caller, call_kind, callee_pc, arg))
    except ProgramExit as exc:
        return Done((exc.value,), exited=True)
    except VMError as exc:
        return Error.from_exc(exc)


def record_hot(pc: int, kind: str, session: VmSession, tier: str = "t1") -> Optional[Trigger]:
    if kind == ENTRY:
        tier = "t1"
    return session.record_hot(pc, kind, tier)


def maybe_compile(trigger: Trigger, session: VmSession, frame: Optional[Frame] = None):
    return session.maybe_compile(trigger, frame)


def attach_bridge(guard: GuardFailure, bridge: BridgeCode, session: VmSession) -> None:
    session.attach_bridge(guard, bridge)
