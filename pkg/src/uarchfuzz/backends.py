"""Common contract between the environment and its measurement backends.

A backend evaluates instruction sequences in two stages: a counter stage
(performance events around N repetitions of the sequence) and a leak
stage (one conditional-branch harness variant of the verification
protocol). The simulator and the hardware rig both implement this
interface, so everything above it is backend-agnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional, Protocol, Sequence, runtime_checkable

from .counters import CounterSample
from .errors import CapabilityError

if TYPE_CHECKING:
    from .catalog import ConcreteInstruction
    from .config import EnvConfig, RunConfig
    from .harness import BranchKind, ComparisonSpec
    from .leak import DecisionTrace, LeakOutcome


class ExceptionKind(str, Enum):
    """Runtime fault kinds a harness run can surface."""

    SEGFAULT = "segfault"
    FP_FAULT = "fp_fault"
    ILLEGAL_INSTRUCTION = "illegal_instruction"
    OTHER_FAULT = "other_fault"


@dataclass(frozen=True)
class CounterStageResult:
    sample: Optional[CounterSample]
    exception: Optional[ExceptionKind]
    elapsed: float

    def __post_init__(self) -> None:
        assert (self.sample is None) == (self.exception is not None)


@dataclass(frozen=True)
class LeakStageResult:
    """One harness variant's outcome: did the decoded probe match the
    encoded pattern at or above the configured byte threshold."""

    matched: bool
    decoded_bytes: int
    matched_fraction: float
    exec_elapsed: float
    probe_elapsed: float
    exception: Optional[ExceptionKind] = None


@dataclass(frozen=True)
class BackendResult:
    """One-shot full evaluation: counters plus (when they succeeded) the
    complete leak-protocol outcome."""

    counters: Optional[CounterSample]
    exception: Optional[ExceptionKind]
    leak: Optional["LeakOutcome"]
    elapsed: float
    trace: Optional["DecisionTrace"] = None


@runtime_checkable
class MeasurementBackend(Protocol):
    """Stage-level evaluation surface plus a monotonic run clock.

    The clock belongs to the backend so simulated runs can use a
    synthetic deterministic time base while hardware uses the host's.
    """

    name: str

    def counter_stage(
        self, seq: Sequence["ConcreteInstruction"], cfg: "EnvConfig"
    ) -> CounterStageResult: ...

    def leak_stage(
        self,
        seq: Sequence["ConcreteInstruction"],
        branch: "BranchKind",
        fence: bool,
        comparison: "ComparisonSpec",
        cfg: "EnvConfig",
    ) -> LeakStageResult: ...

    def now(self) -> float: ...


def get_backend(config: "RunConfig") -> MeasurementBackend:
    """Build the configured backend; hardware performs its capability
    probe here so misconfiguration fails before any episode."""
    if config.backend == "sim":
        from .sim import SimBackend, load_scenario, make_scenario

        if config.scenario_path:
            scenario = load_scenario(config.scenario_path)
        else:
            # Plant rules over the active catalog so every planted
            # pattern is actually emittable by the agent.
            from .fixtures import load_run_catalog

            catalog = load_run_catalog(config.catalog, config.denylist)
            scenario = make_scenario(config.scenario_seed, config.scenario, catalog)
        return SimBackend(scenario)
    if config.backend == "hw":
        from .hw import HwBackend

        return HwBackend.from_config(config)
    raise CapabilityError(f"unknown backend {config.backend!r} (expected 'sim' or 'hw')")
