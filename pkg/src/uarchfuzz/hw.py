"""Hardware measurement backend.

Counter stage: build one counter harness, execute it `counter_repeats`
times under the event reader, aggregate element-wise. Leak stage: build
the requested protocol variant, run it, decode the emitted timing
matrix against the calibrated Flush+Reload threshold, and compare with
the run's secret pattern.

The first leak stage triggers calibration: the same harness template is
run twice with a forced flag state, once falling through the gadget
(hits) and once jumping over it (misses), and the threshold is the
midpoint of the two latency medians.
"""

from __future__ import annotations

import os
import struct
import time
from pathlib import Path
from typing import Optional, Sequence

from .backends import CounterStageResult, LeakStageResult
from .catalog import ConcreteInstruction, RegClass
from .config import EnvConfig, RunConfig
from .counters import EVENT_NAMES, CounterSample, aggregate, resolve_event_name
from .errors import CapabilityError, UarchFuzzError
from .harness import (
    BranchKind,
    ComparisonSpec,
    emit_counter_harness,
    emit_leak_harness,
    positions_for,
)
from .leak import TimingVector, calibrate_threshold, decode, match_pattern, secret_pattern
from .runner import (
    PerfStatRunner,
    Runner,
    Toolchain,
    assemble_and_run,
    detect_uarch,
    require_capabilities,
)

# Comparison whose flags are known in advance (ZF=1), used only for
# threshold calibration: JE always skips the gadget, JNE never does.
_FORCED_ZF = ComparisonSpec(RegClass.GPR, ("XOR EAX, EAX", "TEST EAX, EAX"))

_NOMINAL_TSC_HZ = 3.0e9


class HwBackend:
    name = "hw"

    def __init__(
        self,
        *,
        uarch: str,
        workdir: Path,
        core_pin: Optional[int] = None,
        runner: Optional[Runner] = None,
        toolchain: Optional[Toolchain] = None,
        threshold: Optional[float] = None,
        tsc_hz: float = _NOMINAL_TSC_HZ,
    ) -> None:
        self.uarch = uarch
        self.workdir = Path(workdir)
        self.core_pin = core_pin
        self.runner = runner or PerfStatRunner()
        self.toolchain = toolchain or Toolchain()
        self.threshold = threshold
        self.tsc_hz = tsc_hz
        self._stem = 0
        # Canonical -> host event name, skipping events this uarch lacks.
        self.event_map = {
            name: resolve_event_name(name, uarch)
            for name in EVENT_NAMES
            if resolve_event_name(name, uarch) is not None
        }

    @classmethod
    def from_config(cls, config: RunConfig) -> "HwBackend":
        uarch = config.uarch
        if uarch == "auto":
            uarch = detect_uarch()
            if uarch is None:
                raise CapabilityError(
                    "cannot identify this host's microarchitecture; "
                    "set uarch = 'skylake_x' or 'raptor_lake' explicitly"
                )
        require_capabilities(cores=config.cores)
        workdir = Path(config.log_dir) / f"harness-{os.getpid()}"
        return cls(uarch=uarch, workdir=workdir, core_pin=config.cores[0])

    def now(self) -> float:
        return time.time()

    def _next_stem(self, kind: str) -> str:
        self._stem += 1
        return f"{kind}_{self._stem:06d}"

    # -- counter stage -------------------------------------------------------

    def counter_stage(
        self, seq: Sequence[ConcreteInstruction], cfg: EnvConfig
    ) -> CounterStageResult:
        harness = emit_counter_harness(seq, cfg.leak_iterations)
        events = list(self.event_map.values())
        samples = []
        elapsed = 0.0
        for _ in range(cfg.counter_repeats):
            report = assemble_and_run(
                harness.text,
                workdir=self.workdir,
                stem=self._next_stem("counter"),
                events=events,
                core_pin=self.core_pin,
                runner=self.runner,
                toolchain=self.toolchain,
            )
            elapsed += report.wall_time
            if report.exception is not None:
                return CounterStageResult(
                    sample=None, exception=report.exception, elapsed=elapsed
                )
            samples.append(self._canonical_sample(report.counters or {}))
        return CounterStageResult(
            sample=aggregate(samples, cfg.aggregation), exception=None, elapsed=elapsed
        )

    def _canonical_sample(self, counts) -> CounterSample:
        by_host_name = {v: k for k, v in self.event_map.items()}
        canon = {
            by_host_name.get(name, name): value
            for name, value in counts.items()
            if name in by_host_name
        }
        return CounterSample(counts=canon, repeats=1)

    # -- leak stage ----------------------------------------------------------

    def leak_stage(
        self,
        seq: Sequence[ConcreteInstruction],
        branch: BranchKind,
        fence: bool,
        comparison: ComparisonSpec,
        cfg: EnvConfig,
    ) -> LeakStageResult:
        secret = secret_pattern(cfg.seed, cfg.secret_len)
        harness = emit_leak_harness(
            seq,
            branch,
            fence,
            cfg.leak_iterations,
            cfg.granularity,
            comparison=comparison,
            secret=secret,
            probe_order_seed=cfg.seed,
        )
        report = assemble_and_run(
            harness.text,
            workdir=self.workdir,
            stem=self._next_stem("leak"),
            events=[],
            core_pin=self.core_pin,
            runner=self.runner,
            toolchain=self.toolchain,
            capture_stdout=True,
        )
        if report.exception is not None:
            return LeakStageResult(
                matched=False,
                decoded_bytes=0,
                matched_fraction=0.0,
                exec_elapsed=report.wall_time,
                probe_elapsed=0.0,
                exception=report.exception,
            )
        timings = parse_timing_matrix(
            report.stdout, positions_for(cfg.secret_len, cfg.granularity), 1 << cfg.granularity
        )
        threshold = self._ensure_threshold(seq, cfg, secret)
        decoded = decode(timings, threshold, cfg.granularity)
        matched_bytes, fraction = match_pattern(decoded, secret)
        probe_cycles = sum(sum(v.latencies) for v in timings)
        return LeakStageResult(
            matched=matched_bytes >= cfg.match_min_bytes,
            decoded_bytes=matched_bytes,
            matched_fraction=fraction,
            exec_elapsed=report.wall_time,
            probe_elapsed=probe_cycles / self.tsc_hz,
            exception=None,
        )

    def _ensure_threshold(
        self, seq: Sequence[ConcreteInstruction], cfg: EnvConfig, secret: bytes
    ) -> float:
        if self.threshold is not None:
            return self.threshold
        hits, misses = [], []
        for branch, bucket in ((BranchKind.JNE, hits), (BranchKind.JE, misses)):
            harness = emit_leak_harness(
                seq[:1] if seq else seq,
                branch,
                False,
                1,
                cfg.granularity,
                comparison=_FORCED_ZF,
                secret=secret,
                probe_order_seed=cfg.seed,
            )
            report = assemble_and_run(
                harness.text,
                workdir=self.workdir,
                stem=self._next_stem("calib"),
                events=[],
                core_pin=self.core_pin,
                runner=self.runner,
                toolchain=self.toolchain,
                capture_stdout=True,
            )
            if report.exception is not None:
                raise UarchFuzzError(
                    f"calibration harness faulted: {report.exception.value}"
                )
            timings = parse_timing_matrix(
                report.stdout,
                positions_for(cfg.secret_len, cfg.granularity),
                1 << cfg.granularity,
            )
            encoded = _encoded_slots(secret, cfg.granularity)
            for k, vec in enumerate(timings):
                for s, lat in enumerate(vec.latencies):
                    if bucket is hits and s == encoded[k]:
                        hits.append(lat)
                    elif bucket is misses and s != encoded[k]:
                        misses.append(lat)
        self.threshold = calibrate_threshold(hits, misses)
        return self.threshold


def _encoded_slots(secret: bytes, granularity: int) -> list[int]:
    """Slot index the gadget touches for each symbol position."""
    per_byte = 8 // granularity
    mask = (1 << granularity) - 1
    out = []
    for k in range(len(secret) * per_byte):
        byte = secret[k // per_byte]
        shift = granularity * (per_byte - 1 - (k % per_byte))
        out.append((byte >> shift) & mask)
    return out


def parse_timing_matrix(stdout: bytes, positions: int, slots: int) -> list[TimingVector]:
    expected = positions * slots * 8
    if len(stdout) != expected:
        raise UarchFuzzError(
            f"harness timing output is {len(stdout)} bytes, expected {expected}"
        )
    values = struct.unpack(f"<{positions * slots}Q", stdout)
    return [
        TimingVector(latencies=tuple(float(v) for v in values[k * slots : (k + 1) * slots]))
        for k in range(positions)
    ]
