"""Leak verification: timing decode, the staged JE/JNE/LFENCE protocol,
classification, and rate computation.

A sequence leaks when the encode gadget fires behind BOTH branch
polarities (so the effect is branch-independent transient execution)
and an LFENCE in front of the branch suppresses it in BOTH polarities
(so the effect rides on speculation, not on architectural side effects).
"""

from __future__ import annotations

import hashlib
import statistics
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

from .backends import ExceptionKind, LeakStageResult, MeasurementBackend
from .catalog import ConcreteInstruction
from .config import EnvConfig
from .errors import CalibrationError, ContractViolation
from .harness import BranchKind, ComparisonSpec, select_comparisons, sequence_register_types


@dataclass(frozen=True)
class TimingVector:
    """Per-slot probe latencies for one symbol position."""

    latencies: tuple[float, ...]

    def __post_init__(self) -> None:
        if any(l < 0 for l in self.latencies):
            raise ContractViolation("latencies must be non-negative")


@dataclass(frozen=True)
class Decoded:
    """Decode result: hit slots per position plus assembled byte values."""

    symbols: tuple[tuple[int, ...], ...]
    bytes_by_index: Mapping[int, int]


@dataclass(frozen=True)
class LeakOutcome:
    decoded_bytes: int
    matched_fraction: float
    elapsed: float
    granularity: int
    probe_elapsed: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.matched_fraction <= 1.0:
            raise ContractViolation("matched_fraction outside [0, 1]")


@dataclass(frozen=True)
class DecisionTrace:
    je_match: bool = False
    jne_match: bool = False
    lfence_je_match: bool = False
    lfence_jne_match: bool = False
    classified_leak: bool = False
    per_type: Mapping[str, "TypeTrace"] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.classified_leak:
            assert classify_trace(
                self.je_match, self.jne_match, self.lfence_je_match, self.lfence_jne_match
            )


@dataclass(frozen=True)
class TypeTrace:
    """Stage flags and execution count for one register-type pass."""

    je_match: bool
    jne_match: bool
    lfence_je_match: bool
    lfence_jne_match: bool
    executions: int
    classified: bool
    decoded_bytes: int = 0
    matched_fraction: float = 0.0


@dataclass(frozen=True)
class ProtocolResult:
    outcome: LeakOutcome
    trace: DecisionTrace
    exception: Optional[ExceptionKind]
    executions: int


def classify_trace(
    je_match: bool, jne_match: bool, lfence_je_match: bool, lfence_jne_match: bool
) -> bool:
    """The single accepting row of the four-flag decision table."""
    return je_match and jne_match and not lfence_je_match and not lfence_jne_match


def secret_pattern(seed: int, length: int) -> bytes:
    """Fixed pseudorandom byte pattern for a run, so decoded matches are
    attributable to the encode gadget rather than probe noise."""
    if length < 1:
        raise ContractViolation("pattern length must be >= 1")
    out = b""
    counter = 0
    while len(out) < length:
        out += hashlib.blake2b(
            f"pattern|{seed}|{counter}".encode(), digest_size=64
        ).digest()
        counter += 1
    return out[:length]


def calibrate_threshold(
    hit_latencies: Sequence[float], miss_latencies: Sequence[float]
) -> float:
    """Midpoint between the median cached and uncached latencies."""
    if not hit_latencies or not miss_latencies:
        raise CalibrationError("calibration needs both hit and miss samples")
    med_hit = statistics.median(hit_latencies)
    med_miss = statistics.median(miss_latencies)
    if med_miss <= med_hit:
        raise CalibrationError(
            f"cached ({med_hit}) and uncached ({med_miss}) latency modes are "
            "indistinguishable; refusing to classify"
        )
    return (med_hit + med_miss) / 2.0


def decode(
    timings: Sequence[TimingVector], threshold: float, granularity: int
) -> Decoded:
    """Slots strictly below the threshold are decoded symbols.

    Symbols narrower than a byte assemble most-significant-first; a byte
    is produced only when each of its positions decoded at least one
    symbol, taking the lowest hit slot per position.
    """
    if granularity not in (1, 4, 8):
        raise ContractViolation(f"granularity must be 1, 4 or 8, got {granularity}")
    slots = 1 << granularity
    symbols = []
    for k, vec in enumerate(timings):
        if len(vec.latencies) != slots:
            raise ContractViolation(
                f"position {k}: expected {slots} slots, got {len(vec.latencies)}"
            )
        symbols.append(tuple(s for s, lat in enumerate(vec.latencies) if lat < threshold))

    per_byte = 8 // granularity
    bytes_by_index: dict[int, int] = {}
    for b in range(len(timings) // per_byte):
        group = symbols[b * per_byte : (b + 1) * per_byte]
        if all(group):
            value = 0
            for j, hits in enumerate(group):
                value |= hits[0] << (granularity * (per_byte - 1 - j))
            bytes_by_index[b] = value
    return Decoded(symbols=tuple(symbols), bytes_by_index=bytes_by_index)


def match_pattern(decoded: Decoded, expected: bytes) -> tuple[int, float]:
    """Bytes decoded to exactly the expected value at their position."""
    if not expected:
        raise ContractViolation("expected pattern must be non-empty")
    matched = sum(
        1
        for idx, value in decoded.bytes_by_index.items()
        if idx < len(expected) and value == expected[idx]
    )
    return matched, matched / len(expected)


def leak_rate(decoded_bits: float, elapsed: float) -> float:
    """Bits per second."""
    if elapsed <= 0:
        raise ContractViolation(f"elapsed must be > 0, got {elapsed}")
    return decoded_bits / elapsed


def _zeroed(cfg: EnvConfig, elapsed: float, probe: float) -> LeakOutcome:
    return LeakOutcome(
        decoded_bytes=0,
        matched_fraction=0.0,
        elapsed=elapsed,
        granularity=cfg.granularity,
        probe_elapsed=probe,
    )


def run_protocol(
    seq: Sequence[ConcreteInstruction],
    backend: MeasurementBackend,
    cfg: EnvConfig,
    comparisons: Optional[Sequence[ComparisonSpec]] = None,
) -> ProtocolResult:
    """Staged verification, repeated once per register type present.

    Per type: JE first; only a match earns the JNE run; only a second
    match earns the two LFENCE control runs. Any type classifying makes
    the sequence a leak. A fault in any stage zeroes the outcome and
    reports a leak-stage exception.
    """
    if comparisons is None:
        comparisons = select_comparisons(sequence_register_types(seq))

    elapsed = 0.0
    probe_elapsed = 0.0
    executions = 0
    per_type: dict[str, TypeTrace] = {}
    best: Optional[TypeTrace] = None

    def run(branch: BranchKind, fence: bool, comp: ComparisonSpec) -> LeakStageResult:
        nonlocal elapsed, probe_elapsed, executions
        stage = backend.leak_stage(seq, branch, fence, comp, cfg)
        executions += 1
        elapsed += stage.exec_elapsed + stage.probe_elapsed
        probe_elapsed += stage.probe_elapsed
        return stage

    for comp in comparisons:
        type_key = comp.reg_class.value
        je = run(BranchKind.JE, False, comp)
        if je.exception is not None:
            return ProtocolResult(
                outcome=_zeroed(cfg, elapsed, probe_elapsed),
                trace=DecisionTrace(per_type=dict(per_type)),
                exception=je.exception,
                executions=executions,
            )
        if not je.matched:
            per_type[type_key] = TypeTrace(False, False, False, False, 1, False)
            continue

        jne = run(BranchKind.JNE, False, comp)
        if jne.exception is not None:
            return ProtocolResult(
                outcome=_zeroed(cfg, elapsed, probe_elapsed),
                trace=DecisionTrace(per_type=dict(per_type)),
                exception=jne.exception,
                executions=executions,
            )
        if not jne.matched:
            per_type[type_key] = TypeTrace(True, False, False, False, 2, False)
            continue

        lf_je = run(BranchKind.JE, True, comp)
        if lf_je.exception is not None:
            return ProtocolResult(
                outcome=_zeroed(cfg, elapsed, probe_elapsed),
                trace=DecisionTrace(per_type=dict(per_type)),
                exception=lf_je.exception,
                executions=executions,
            )
        if lf_je.matched:
            # The fence failed to suppress: not speculation-driven.
            per_type[type_key] = TypeTrace(True, True, True, False, 3, False)
            continue

        lf_jne = run(BranchKind.JNE, True, comp)
        if lf_jne.exception is not None:
            return ProtocolResult(
                outcome=_zeroed(cfg, elapsed, probe_elapsed),
                trace=DecisionTrace(per_type=dict(per_type)),
                exception=lf_jne.exception,
                executions=executions,
            )
        classified = classify_trace(True, True, False, lf_jne.matched)
        tt = TypeTrace(
            je_match=True,
            jne_match=True,
            lfence_je_match=False,
            lfence_jne_match=lf_jne.matched,
            executions=4,
            classified=classified,
            decoded_bytes=min(je.decoded_bytes, jne.decoded_bytes) if classified else 0,
            matched_fraction=min(je.matched_fraction, jne.matched_fraction)
            if classified
            else 0.0,
        )
        per_type[type_key] = tt
        if classified and (best is None or tt.decoded_bytes > best.decoded_bytes):
            best = tt

    if best is None:
        # Report the flags of the pass that got furthest, for diagnosis.
        flags = max(
            per_type.values(),
            key=lambda t: t.executions,
            default=TypeTrace(False, False, False, False, 0, False),
        )
        trace = DecisionTrace(
            je_match=flags.je_match,
            jne_match=flags.jne_match,
            lfence_je_match=flags.lfence_je_match,
            lfence_jne_match=flags.lfence_jne_match,
            classified_leak=False,
            per_type=dict(per_type),
        )
        outcome = _zeroed(cfg, elapsed, probe_elapsed)
    else:
        trace = DecisionTrace(
            je_match=True,
            jne_match=True,
            lfence_je_match=False,
            lfence_jne_match=False,
            classified_leak=True,
            per_type=dict(per_type),
        )
        outcome = LeakOutcome(
            decoded_bytes=best.decoded_bytes,
            matched_fraction=best.matched_fraction,
            elapsed=elapsed,
            granularity=cfg.granularity,
            probe_elapsed=probe_elapsed,
        )
    return ProtocolResult(outcome=outcome, trace=trace, exception=None, executions=executions)
