"""Hardware performance-event catalog and counter samples.

Twelve events are monitored per evaluated sequence. Event names follow
the Skylake-X spelling; other microarchitectures map through a per-event
alias table where ``None`` means the event does not exist there and is
reported as absent rather than zero.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

from .errors import ConfigError

SKYLAKE_X = "skylake_x"
RAPTOR_LAKE = "raptor_lake"
UARCHES = (SKYLAKE_X, RAPTOR_LAKE)


@dataclass(frozen=True)
class CounterEventSpec:
    canonical_name: str
    per_uarch_alias: Mapping[str, Optional[str]]
    description: str


def _ev(name: str, desc: str, raptor: Optional[str] = "") -> CounterEventSpec:
    # raptor="" means same spelling; None means unavailable there.
    alias = name if raptor == "" else raptor
    return CounterEventSpec(
        canonical_name=name,
        per_uarch_alias={SKYLAKE_X: name, RAPTOR_LAKE: alias},
        description=desc,
    )


EVENTS: tuple[CounterEventSpec, ...] = (
    _ev("UOPS_ISSUED.ANY", "Micro-ops issued by the front end into the back end."),
    _ev("UOPS_RETIRED.RETIRE_SLOTS", "Retirement slots consumed by retired micro-ops."),
    _ev("INT_MISC.RECOVERY_CYCLES_ANY", "Cycles spent recovering the pipeline after a squash."),
    _ev("MACHINE_CLEARS.COUNT", "Total machine clears (full pipeline flushes)."),
    _ev("MACHINE_CLEARS.SMC", "Machine clears caused by self-modifying code."),
    _ev("MACHINE_CLEARS.MEMORY_ORDERING", "Machine clears caused by memory-ordering conflicts."),
    _ev("FP_ASSIST.ANY", "Floating-point operations that needed a microcode assist.",
        raptor="ASSISTS.FP"),
    _ev("OTHER_ASSISTS.ANY", "Non-FP microcode assists.", raptor="ASSISTS.ANY"),
    _ev("CPU_CLK_UNHALTED.ONE_THREAD_ACTIVE", "Cycles with at least one sibling thread active."),
    _ev("CPU_CLK_UNHALTED.THREAD", "Unhalted core cycles for this thread."),
    _ev("HLE_RETIRED.ABORTED_UNFRIENDLY", "Hardware lock elision aborts from unfriendly causes.",
        raptor=None),
    _ev("HW_INTERRUPTS.RECEIVED", "Hardware interrupts delivered to the core.", raptor=None),
)

EVENT_NAMES: tuple[str, ...] = tuple(e.canonical_name for e in EVENTS)
_BY_NAME = {e.canonical_name: e for e in EVENTS}


def event_spec(canonical_name: str) -> CounterEventSpec:
    try:
        return _BY_NAME[canonical_name]
    except KeyError:
        raise ConfigError(f"unknown performance event {canonical_name!r}") from None


def resolve_event_name(canonical_name: str, uarch: str) -> Optional[str]:
    """Actual event name on `uarch`, or None when unavailable there."""
    spec = event_spec(canonical_name)
    if uarch not in spec.per_uarch_alias:
        raise ConfigError(f"unknown microarchitecture {uarch!r}")
    return spec.per_uarch_alias[uarch]


def available_events(uarch: str) -> list[str]:
    return [e.canonical_name for e in EVENTS if resolve_event_name(e.canonical_name, uarch)]


@dataclass(frozen=True)
class CounterSample:
    """One vector of event counts keyed by canonical name.

    Events the host could not count are simply absent from `counts`,
    never encoded as zero.
    """

    counts: Mapping[str, float] = field(default_factory=dict)
    repeats: int = 1
    aggregation: str = "median"

    def __post_init__(self) -> None:
        for name, value in self.counts.items():
            if value < 0:
                raise ConfigError(f"negative count for {name}: {value}")

    def get(self, canonical_name: str) -> Optional[float]:
        return self.counts.get(canonical_name)

    def require(self, canonical_name: str) -> float:
        value = self.counts.get(canonical_name)
        if value is None:
            raise ConfigError(
                f"event {canonical_name!r} missing from counter sample; "
                "check the event alias map for this microarchitecture"
            )
        return value


def aggregate(samples: Iterable[CounterSample], how: str = "median") -> CounterSample:
    """Element-wise median (or mean) over samples; keeps only events present in all."""
    samples = list(samples)
    if not samples:
        raise ConfigError("cannot aggregate zero counter samples")
    if how not in ("median", "mean"):
        raise ConfigError(f"unknown aggregation {how!r}")
    common = set(samples[0].counts)
    for s in samples[1:]:
        common &= set(s.counts)
    fn = statistics.median if how == "median" else statistics.fmean
    counts = {name: float(fn([s.counts[name] for s in samples])) for name in sorted(common)}
    return CounterSample(counts=counts, repeats=len(samples), aggregation=how)
