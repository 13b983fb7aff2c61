"""Episodic environment over growing instruction sequences.

Each step appends one decoded action to the sequence, re-evaluates the
whole sequence on the backend (counter stage, then the leak protocol),
and rewards bad speculation plus weighted byte leakage per instruction.
A counter-stage fault pays -10 and ends the episode; a leak-stage fault
only zeroes the leakage part.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .backends import ExceptionKind, MeasurementBackend
from .catalog import (
    MAX_OPERAND_SLOTS,
    Catalog,
    ConcreteInstruction,
    action_space_shape,
    render_asm,
    resolve,
)
from .config import EnvConfig
from .counters import CounterSample
from .errors import ActionDecodeError, ConfigError, ContractViolation
from .leak import ProtocolResult, run_protocol
from .observe import Observation, Observer

EXC_NONE = "none"
EXC_COUNTER = "counter_stage"
EXC_LEAK = "leak_stage"


@dataclass(frozen=True)
class Action:
    set_idx: int
    instr_idx: int
    operand_idxs: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.operand_idxs) != MAX_OPERAND_SLOTS:
            raise ActionDecodeError(
                f"expected {MAX_OPERAND_SLOTS} operand indices, got {len(self.operand_idxs)}"
            )

    @classmethod
    def from_indices(cls, idxs: Sequence[int]) -> "Action":
        idxs = [int(i) for i in idxs]
        if len(idxs) != 2 + MAX_OPERAND_SLOTS:
            raise ActionDecodeError(f"expected 9 head indices, got {len(idxs)}")
        return cls(set_idx=idxs[0], instr_idx=idxs[1], operand_idxs=tuple(idxs[2:]))

    def to_indices(self) -> tuple[int, ...]:
        return (self.set_idx, self.instr_idx) + self.operand_idxs


@dataclass
class SequenceState:
    instructions: list[ConcreteInstruction] = field(default_factory=list)
    episode_step: int = 0
    terminated: bool = False


@dataclass(frozen=True)
class RewardBreakdown:
    bad_speculation: float
    byte_leakage: int
    instruction_count: int
    leak_weight: float
    raw: float
    capped: float
    exception_stage: str = EXC_NONE

    def to_dict(self) -> dict:
        return {
            "bad_speculation": self.bad_speculation,
            "byte_leakage": self.byte_leakage,
            "instruction_count": self.instruction_count,
            "leak_weight": self.leak_weight,
            "raw": self.raw,
            "capped": self.capped,
            "exception_stage": self.exception_stage,
        }


def bad_speculation(
    sample: CounterSample, recovery_event: str = "INT_MISC.RECOVERY_CYCLES_ANY"
) -> float:
    """Issued-but-squashed uop slots: issued - retired + 4 x recovery,
    clamped at zero because hardware jitter can push it negative."""
    issued = sample.require("UOPS_ISSUED.ANY")
    retired = sample.require("UOPS_RETIRED.RETIRE_SLOTS")
    recovery = sample.require(recovery_event)
    return max(0.0, issued - retired + 4.0 * recovery)


def compute_reward(
    bad_spec: float, leak_bytes: int, n: int, cfg: EnvConfig
) -> RewardBreakdown:
    """Per-instruction reward with the two caps."""
    if n < 1:
        raise ContractViolation(f"instruction count must be >= 1, got {n}")
    if leak_bytes < 0:
        raise ContractViolation(f"leak_bytes must be >= 0, got {leak_bytes}")
    bad = max(0.0, float(bad_spec))
    raw = (bad + cfg.leak_weight * leak_bytes) / n
    cap = 100.0 if leak_bytes == 0 else 500.0
    return RewardBreakdown(
        bad_speculation=bad,
        byte_leakage=leak_bytes,
        instruction_count=n,
        leak_weight=cfg.leak_weight,
        raw=raw,
        capped=min(raw, cap),
    )


def exception_breakdown(n: int, cfg: EnvConfig) -> RewardBreakdown:
    """Counter-stage fault: flat -10, episode over."""
    return RewardBreakdown(
        bad_speculation=0.0,
        byte_leakage=0,
        instruction_count=max(1, n),
        leak_weight=cfg.leak_weight,
        raw=-10.0,
        capped=-10.0,
        exception_stage=EXC_COUNTER,
    )


@dataclasses.dataclass(frozen=True)
class SequenceEvaluation:
    """One-shot measurement of a whole sequence under env reward rules."""

    breakdown: RewardBreakdown
    sample: Optional["CounterSample"]
    protocol: Optional["ProtocolResult"]
    exception: Optional[ExceptionKind]


def evaluate_sequence(
    seq: Sequence[ConcreteInstruction],
    backend: MeasurementBackend,
    cfg: EnvConfig,
) -> SequenceEvaluation:
    """Counter stage plus full leak protocol with environment semantics.

    A counter-stage fault yields the flat exception penalty; a
    leak-stage fault keeps the bad-speculation part but zeroes leakage.
    """
    n = len(seq)
    if n == 0:
        raise ContractViolation("cannot evaluate an empty sequence")
    counter = backend.counter_stage(seq, cfg)
    if counter.exception is not None:
        return SequenceEvaluation(
            breakdown=exception_breakdown(n, cfg),
            sample=None,
            protocol=None,
            exception=counter.exception,
        )
    sample = counter.sample
    bad = bad_speculation(sample, cfg.recovery_event)
    protocol = run_protocol(seq, backend, cfg)
    if protocol.exception is not None:
        breakdown = dataclasses.replace(
            compute_reward(bad, 0, n, cfg), exception_stage=EXC_LEAK
        )
        return SequenceEvaluation(
            breakdown=breakdown, sample=sample, protocol=protocol,
            exception=protocol.exception,
        )
    breakdown = compute_reward(bad, protocol.outcome.decoded_bytes, n, cfg)
    return SequenceEvaluation(
        breakdown=breakdown, sample=sample, protocol=protocol, exception=None
    )


class Environment:
    """Single-threaded episodic environment bound to one backend slot."""

    def __init__(
        self,
        catalog: Catalog,
        backend: MeasurementBackend,
        observer: Observer,
        cfg: EnvConfig,
    ) -> None:
        self.catalog = catalog
        self.backend = backend
        self.observer = observer
        self.cfg = cfg
        self.shape = action_space_shape(catalog)
        self.state = SequenceState(terminated=True)

    @property
    def obs_dim(self) -> int:
        return self.observer.obs_dim

    def seq_text(self) -> str:
        return "\n".join(render_asm(i) for i in self.state.instructions)

    def reset(self) -> Observation:
        self.state = SequenceState()
        return self.observer.observe("", None)

    def step(self, action: Action) -> tuple[Observation, float, bool, dict]:
        if self.state.terminated:
            raise ContractViolation("step() after the episode terminated; call reset()")

        info: dict = {}
        try:
            instr = resolve(
                self.catalog, action.set_idx, action.instr_idx, action.operand_idxs
            )
        except ActionDecodeError as exc:
            # Corrupted checkpoints can emit out-of-bounds indices; pay
            # the exception penalty rather than crash the run.
            self.state.terminated = True
            breakdown = exception_breakdown(max(1, len(self.state.instructions)), self.cfg)
            info["decode_error"] = str(exc)
            info["breakdown"] = breakdown
            return self.observer.observe(self.seq_text(), None), breakdown.capped, True, info

        self.state.instructions.append(instr)
        self.state.episode_step += 1
        seq = self.state.instructions
        n = len(seq)

        ev = evaluate_sequence(seq, self.backend, self.cfg)
        if ev.breakdown.exception_stage == EXC_COUNTER:
            self.state.terminated = True
            info.update(
                breakdown=ev.breakdown,
                exception=ev.exception.value if ev.exception else None,
                counters=None,
                trace=None,
            )
            return self.observer.observe(self.seq_text(), None), ev.breakdown.capped, True, info

        info.update(
            breakdown=ev.breakdown,
            exception=ev.exception.value if ev.exception else None,
            counters=ev.sample,
            trace=ev.protocol.trace if ev.protocol else None,
        )
        if ev.exception is None and ev.protocol is not None:
            info["leak_outcome"] = ev.protocol.outcome

        done = n >= self.cfg.max_len
        if done:
            self.state.terminated = True
        obs = self.observer.observe(self.seq_text(), ev.sample)
        return obs, ev.breakdown.capped, done, info


def make_environment(
    catalog: Catalog,
    backend: MeasurementBackend,
    observer: Observer,
    cfg: EnvConfig,
) -> Environment:
    shape = action_space_shape(catalog)
    if shape.n_sets < 1:
        raise ConfigError("catalog has no sets")
    return Environment(catalog, backend, observer, cfg)
