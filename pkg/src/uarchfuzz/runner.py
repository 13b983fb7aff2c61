"""Assembling and executing harnesses on a real host.

The pieces are deliberately injectable: `Toolchain` wraps the external
assembler/linker binaries, and a `Runner` executes a built harness and
reads its counters. Tests substitute fakes for both, so the full
hardware path is exercised without nasm, perf, or root.
"""

from __future__ import annotations

import os
import shutil
import signal as signal_mod
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

from .backends import ExceptionKind
from .counters import CounterSample
from .errors import CapabilityError, ToolchainError

# Every fault signal maps to exactly one exception kind; anything
# unrecognized is OTHER_FAULT so the mapping stays total.
_SIGNAL_KINDS = {
    signal_mod.SIGSEGV: ExceptionKind.SEGFAULT,
    signal_mod.SIGBUS: ExceptionKind.SEGFAULT,
    signal_mod.SIGFPE: ExceptionKind.FP_FAULT,
    signal_mod.SIGILL: ExceptionKind.ILLEGAL_INSTRUCTION,
}


def map_signal(signum: int) -> ExceptionKind:
    return _SIGNAL_KINDS.get(signum, ExceptionKind.OTHER_FAULT)


@dataclass(frozen=True)
class ExecutionReport:
    exit_code: Optional[int]
    signal: Optional[int]
    exception: Optional[ExceptionKind]
    wall_time: float
    counters: Optional[Mapping[str, float]]
    stdout: bytes = b""


class Runner(Protocol):
    """Executes a built harness binary and observes it."""

    def run(
        self,
        binary: Path,
        events: Sequence[str],
        core_pin: Optional[int],
        capture_stdout: bool,
    ) -> ExecutionReport: ...


@dataclass
class Toolchain:
    """NASM + ld wrapper. Paths are injectable so tests can stub them."""

    nasm: str = "nasm"
    ld: str = "ld"

    def assemble(self, asm_path: Path, out_path: Path) -> Path:
        obj_path = out_path.with_suffix(".o")
        self._run([self.nasm, "-f", "elf64", str(asm_path), "-o", str(obj_path)], "assembler")
        self._run([self.ld, "-o", str(out_path), str(obj_path)], "linker")
        return out_path

    @staticmethod
    def _run(argv: list[str], what: str) -> None:
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except OSError as exc:
            raise ToolchainError(f"{what} {argv[0]!r} not runnable: {exc}") from exc
        if proc.returncode != 0:
            raise ToolchainError(
                f"{what} failed (exit {proc.returncode}): {proc.stderr.strip()}"
            )


def write_and_build(
    harness_text: str, workdir: Path, stem: str, toolchain: Toolchain
) -> Path:
    workdir.mkdir(parents=True, exist_ok=True)
    asm_path = workdir / f"{stem}.asm"
    asm_path.write_text(harness_text)
    return toolchain.assemble(asm_path, workdir / stem)


def parse_perf_csv(text: str) -> dict[str, float]:
    """Parse `perf stat -x,` CSV output: value,unit,event,...

    Unsupported or uncounted events are simply absent from the result.
    """
    counts: dict[str, float] = {}
    for line in text.splitlines():
        parts = line.split(",")
        if len(parts) < 3:
            continue
        value, event = parts[0].strip(), parts[2].strip()
        if not event or value in ("<not supported>", "<not counted>", ""):
            continue
        try:
            counts[event] = float(value)
        except ValueError:
            continue
    return counts


class PerfStatRunner:
    """Runs the harness under `perf stat` with optional core pinning.

    Delegating event programming and readout to perf keeps this package
    free of per-microarchitecture event-encoding tables.
    """

    def __init__(self, perf: str = "perf", timeout_s: float = 30.0) -> None:
        self.perf = perf
        self.timeout_s = timeout_s

    def run(
        self,
        binary: Path,
        events: Sequence[str],
        core_pin: Optional[int],
        capture_stdout: bool,
    ) -> ExecutionReport:
        argv = [self.perf, "stat", "-x", ","]
        for ev in events:
            argv += ["-e", ev.lower()]
        argv += ["--", str(binary)]

        def preexec() -> None:
            if core_pin is not None:
                os.sched_setaffinity(0, {core_pin})

        start = time.monotonic()
        try:
            proc = subprocess.run(
                argv,
                capture_output=True,
                timeout=self.timeout_s,
                preexec_fn=preexec,
            )
        except subprocess.TimeoutExpired as exc:
            raise ToolchainError(f"harness timed out after {self.timeout_s}s") from exc
        except OSError as exc:
            raise CapabilityError(f"cannot run {self.perf!r}: {exc}") from exc
        wall = time.monotonic() - start

        exit_code: Optional[int] = proc.returncode
        sig: Optional[int] = None
        exc_kind: Optional[ExceptionKind] = None
        if proc.returncode < 0:
            sig = -proc.returncode
            exit_code = None
            exc_kind = map_signal(sig)
        # perf relays the child's fatal signal as 128+sig on some setups.
        elif proc.returncode > 128:
            sig = proc.returncode - 128
            exc_kind = map_signal(sig)

        counters = parse_perf_csv(proc.stderr.decode(errors="replace"))
        # Map perf's lowercase spellings back to canonical names.
        canon = {ev.lower(): ev for ev in events}
        counters = {canon.get(name.lower(), name): v for name, v in counters.items()}
        return ExecutionReport(
            exit_code=exit_code,
            signal=sig,
            exception=exc_kind,
            wall_time=wall,
            counters=counters if exc_kind is None else (counters or None),
            stdout=proc.stdout if capture_stdout else b"",
        )


def assemble_and_run(
    harness_text: str,
    *,
    workdir: Path,
    stem: str,
    events: Sequence[str],
    core_pin: Optional[int],
    runner: Runner,
    toolchain: Optional[Toolchain] = None,
    capture_stdout: bool = False,
) -> ExecutionReport:
    """Build one harness and execute it once via the injected runner."""
    binary = write_and_build(harness_text, workdir, stem, toolchain or Toolchain())
    return runner.run(binary, events, core_pin, capture_stdout)


def report_to_sample(report: ExecutionReport) -> Optional[CounterSample]:
    if report.counters is None:
        return None
    return CounterSample(counts=dict(report.counters), repeats=1, aggregation="median")


def detect_uarch() -> Optional[str]:
    """Best-effort microarchitecture detection from /proc/cpuinfo."""
    known = {85: "skylake_x", 183: "raptor_lake", 191: "raptor_lake", 186: "raptor_lake"}
    try:
        text = Path("/proc/cpuinfo").read_text()
    except OSError:
        return None
    family = model = None
    for line in text.splitlines():
        if line.startswith("cpu family"):
            family = int(line.split(":")[1])
        elif line.startswith("model") and "name" not in line:
            model = int(line.split(":")[1])
        if family is not None and model is not None:
            break
    if family != 6 or model is None:
        return None
    return known.get(model)


@dataclass(frozen=True)
class CapabilityReport:
    ok: bool
    problems: tuple[str, ...] = field(default=())
    details: Mapping[str, object] = field(default_factory=dict)


def probe_capabilities(
    *,
    toolchain: Optional[Toolchain] = None,
    perf: str = "perf",
    cores: Sequence[int] = (),
) -> CapabilityReport:
    """Startup probe for the hardware path: assembler, linker, counter
    access, and pinning rights. Returns every problem with a hint."""
    tc = toolchain or Toolchain()
    problems = []
    details: dict[str, object] = {"uarch": detect_uarch()}
    details["nasm"] = shutil.which(tc.nasm)
    if details["nasm"] is None:
        problems.append(f"assembler {tc.nasm!r} not found (install nasm)")
    details["ld"] = shutil.which(tc.ld)
    if details["ld"] is None:
        problems.append(f"linker {tc.ld!r} not found (install binutils)")
    details["perf"] = shutil.which(perf)
    if details["perf"] is None:
        problems.append(f"{perf!r} not found (install linux perf tools)")
    else:
        paranoid = Path("/proc/sys/kernel/perf_event_paranoid")
        try:
            details["perf_event_paranoid"] = int(paranoid.read_text())
            if details["perf_event_paranoid"] > 2:
                problems.append(
                    "perf_event_paranoid > 2: counters unreadable "
                    "(echo 1 | sudo tee /proc/sys/kernel/perf_event_paranoid)"
                )
        except (OSError, ValueError):
            pass
    if cores:
        try:
            available = os.sched_getaffinity(0)
        except AttributeError:
            available = set()
        details["cores_requested"] = list(cores)
        missing = [c for c in cores if c not in available]
        if missing:
            problems.append(f"cores {missing} not in this process's affinity mask")
    return CapabilityReport(ok=not problems, problems=tuple(problems), details=details)


def require_capabilities(**kwargs) -> None:
    report = probe_capabilities(**kwargs)
    if not report.ok:
        raise CapabilityError(
            "hardware backend unavailable: " + "; ".join(report.problems)
        )
