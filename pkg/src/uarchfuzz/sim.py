"""Deterministic synthetic CPU backend.

Planted rules stand in for real transient-execution mechanisms: when a
sequence contains a rule's pattern, the rule's effects show up in the
counters and (for leaking rules) in the leak protocol stages, exactly
as a real mechanism would. Everything is a pure function of
(sequence, config, scenario), so whole training runs are reproducible
bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from .backends import (
    BackendResult,
    CounterStageResult,
    ExceptionKind,
    LeakStageResult,
)
from .catalog import Catalog, ConcreteInstruction
from .config import EnvConfig
from .counters import CounterSample
from .errors import ConfigError
from .harness import BranchKind, ComparisonSpec

# Synthetic per-stage timing model (seconds). Chosen so leak rates are
# positive and constant across repetition counts, which keeps sweep
# outputs trivially predictable in tests.
_COUNTER_BASE_S = 20e-6
_COUNTER_PER_INSTR_S = 1e-6
_LEAK_EXEC_BASE_S = 10e-6
_LEAK_EXEC_PER_INSTR_S = 0.5e-6
_PROBE_PER_SLOT_S = 50e-9


@dataclass(frozen=True)
class PatternStep:
    """Predicate over one instruction: any specified field must match."""

    mnemonic: Optional[str] = None
    set_name: Optional[str] = None
    operand: Optional[tuple[int, str]] = None

    def __post_init__(self) -> None:
        if self.mnemonic is None and self.set_name is None and self.operand is None:
            raise ConfigError("pattern step with no predicate")

    def matches(self, instr: ConcreteInstruction) -> bool:
        if self.mnemonic is not None and instr.mnemonic != self.mnemonic:
            return False
        if self.set_name is not None and instr.set_name != self.set_name:
            return False
        if self.operand is not None:
            slot, text = self.operand
            if slot >= len(instr.operands) or instr.operands[slot] != text:
                return False
        return True


@dataclass(frozen=True)
class RuleEffects:
    recovery_cycles: int = 0
    machine_clears: int = 0
    leak_bytes: int = 0
    raises_exception: Optional[ExceptionKind] = None

    def __post_init__(self) -> None:
        if min(self.recovery_cycles, self.machine_clears, self.leak_bytes) < 0:
            raise ConfigError("rule effects must be non-negative")


@dataclass(frozen=True)
class PlantedRule:
    name: str
    pattern: tuple[PatternStep, ...]
    contiguous: bool = True
    effects: RuleEffects = field(default_factory=RuleEffects)

    def __post_init__(self) -> None:
        if not self.pattern:
            raise ConfigError(f"rule {self.name!r} has an empty pattern")

    def matches(self, seq: Sequence[ConcreteInstruction]) -> bool:
        steps = self.pattern
        if len(steps) > len(seq):
            return False
        if self.contiguous:
            return any(
                all(steps[j].matches(seq[i + j]) for j in range(len(steps)))
                for i in range(len(seq) - len(steps) + 1)
            )
        # Gapped: steps must match in order, not necessarily adjacent.
        j = 0
        for instr in seq:
            if j < len(steps) and steps[j].matches(instr):
                j += 1
        return j == len(steps)


@dataclass(frozen=True)
class SimScenario:
    name: str
    seed: int
    rules: tuple[PlantedRule, ...] = ()
    noise: int = 2

    def __post_init__(self) -> None:
        if self.noise < 0:
            raise ConfigError("noise bound must be >= 0")

    def leaking_rules(self) -> tuple[PlantedRule, ...]:
        return tuple(r for r in self.rules if r.effects.leak_bytes > 0)


def _hash_jitter(seed: int, tag: str, text: str, bound: int) -> int:
    """Deterministic jitter in [-bound, +bound] keyed by scenario seed and text."""
    if bound == 0:
        return 0
    h = hashlib.blake2b(
        f"{seed}|{tag}|{text}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(h, "little") % (2 * bound + 1) - bound


def seq_text(seq: Sequence[ConcreteInstruction]) -> str:
    from .catalog import render_asm

    return "\n".join(render_asm(i) for i in seq)


def _matched(scenario: SimScenario, seq: Sequence[ConcreteInstruction]) -> list[PlantedRule]:
    return [r for r in scenario.rules if r.matches(seq)]


def _counter_exception(matched: list[PlantedRule]) -> Optional[ExceptionKind]:
    for rule in matched:
        if rule.effects.raises_exception is not None:
            return rule.effects.raises_exception
    return None


def _counter_sample(
    scenario: SimScenario, seq: Sequence[ConcreteInstruction], matched: list[PlantedRule]
) -> CounterSample:
    n = len(seq)
    text = seq_text(seq)
    base = max(0, 4 * n + _hash_jitter(scenario.seed, "slots", text, scenario.noise))
    # Issued always runs a little ahead of retired, as on real parts; the
    # gap grows with length plus small text-keyed jitter so it cannot act
    # as a reward lottery that drowns planted-rule signal.
    gap = 0
    if n > 0:
        gap = max(0, 4 * n + _hash_jitter(scenario.seed, "gap", text, scenario.noise))
    recovery = sum(r.effects.recovery_cycles for r in matched)
    clears = sum(r.effects.machine_clears for r in matched)
    counts = {
        "UOPS_ISSUED.ANY": float(base + gap),
        "UOPS_RETIRED.RETIRE_SLOTS": float(base),
        "INT_MISC.RECOVERY_CYCLES_ANY": float(recovery),
        "MACHINE_CLEARS.COUNT": float(clears),
        "MACHINE_CLEARS.SMC": 0.0,
        "MACHINE_CLEARS.MEMORY_ORDERING": 0.0,
        "FP_ASSIST.ANY": 0.0,
        "OTHER_ASSISTS.ANY": 0.0,
        "CPU_CLK_UNHALTED.ONE_THREAD_ACTIVE": float(
            max(0, 100 + 10 * n + _hash_jitter(scenario.seed, "clk1", text, scenario.noise))
        ),
        "CPU_CLK_UNHALTED.THREAD": float(
            max(0, 120 + 12 * n + _hash_jitter(scenario.seed, "clk2", text, scenario.noise))
        ),
        "HLE_RETIRED.ABORTED_UNFRIENDLY": 0.0,
        "HW_INTERRUPTS.RECEIVED": 0.0,
    }
    return CounterSample(counts=counts, repeats=1, aggregation="median")


def _leak_bytes(cfg: EnvConfig, matched: list[PlantedRule]) -> int:
    total = sum(r.effects.leak_bytes for r in matched)
    return min(cfg.secret_len, total)


def positions_for(cfg: EnvConfig) -> int:
    """Probe positions per run: one per granularity-sized symbol of the pattern."""
    return -(-cfg.secret_len * 8 // cfg.granularity)


def counter_stage_elapsed(cfg: EnvConfig, n: int) -> float:
    return cfg.counter_repeats * (_COUNTER_BASE_S + _COUNTER_PER_INSTR_S * n)


def leak_stage_elapsed(cfg: EnvConfig, n: int) -> tuple[float, float]:
    exec_s = _LEAK_EXEC_BASE_S + _LEAK_EXEC_PER_INSTR_S * n
    probe_s = positions_for(cfg) * (2 ** cfg.granularity) * _PROBE_PER_SLOT_S
    return exec_s, probe_s


class SimBackend:
    """Stage-level backend over a scenario, with a synthetic run clock."""

    name = "sim"

    def __init__(self, scenario: SimScenario) -> None:
        self.scenario = scenario
        self._clock = 0.0

    def now(self) -> float:
        return self._clock

    def counter_stage(
        self, seq: Sequence[ConcreteInstruction], cfg: EnvConfig
    ) -> CounterStageResult:
        matched = _matched(self.scenario, seq)
        elapsed = counter_stage_elapsed(cfg, len(seq))
        self._clock += elapsed
        exc = _counter_exception(matched)
        if exc is not None:
            return CounterStageResult(sample=None, exception=exc, elapsed=elapsed)
        return CounterStageResult(
            sample=_counter_sample(self.scenario, seq, matched),
            exception=None,
            elapsed=elapsed,
        )

    def leak_stage(
        self,
        seq: Sequence[ConcreteInstruction],
        branch: BranchKind,
        fence: bool,
        comparison: ComparisonSpec,
        cfg: EnvConfig,
    ) -> LeakStageResult:
        del branch, comparison  # the sim leak model is branch-agnostic
        matched = _matched(self.scenario, seq)
        exec_s, probe_s = leak_stage_elapsed(cfg, len(seq))
        self._clock += exec_s + probe_s
        decoded = 0 if fence else _leak_bytes(cfg, matched)
        return LeakStageResult(
            matched=decoded >= cfg.match_min_bytes,
            decoded_bytes=decoded,
            matched_fraction=decoded / cfg.secret_len,
            exec_elapsed=exec_s,
            probe_elapsed=probe_s,
            exception=None,
        )


def evaluate(
    seq: Sequence[ConcreteInstruction], cfg: EnvConfig, scenario: SimScenario
) -> BackendResult:
    """One-shot evaluation: counter stage, then the full leak protocol.

    Pure: identical inputs always produce identical results.
    """
    from .leak import run_protocol

    backend = SimBackend(scenario)
    counter = backend.counter_stage(seq, cfg)
    if counter.exception is not None:
        return BackendResult(
            counters=None,
            exception=counter.exception,
            leak=None,
            elapsed=counter.elapsed,
            trace=None,
        )
    protocol = run_protocol(seq, backend, cfg)
    return BackendResult(
        counters=counter.sample,
        exception=protocol.exception,
        leak=protocol.outcome,
        elapsed=counter.elapsed + protocol.outcome.elapsed,
        trace=protocol.trace,
    )


# --- scenario construction ---------------------------------------------------


def _pick_instructions(catalog: Catalog, seed: int, tag: str, count: int):
    """Deterministically pick `count` distinct (set, mnemonic) pairs."""
    flat = [
        (s.name, i.mnemonic, i)
        for s in catalog.sets
        for i in s.instructions
    ]
    picked = []
    taken = set()
    k = 0
    while len(picked) < count:
        h = hashlib.blake2b(f"{seed}|{tag}|{k}".encode(), digest_size=8).digest()
        idx = int.from_bytes(h, "little") % len(flat)
        k += 1
        if idx in taken:
            continue
        taken.add(idx)
        picked.append(flat[idx])
        if k > 100 * count:
            raise ConfigError("catalog too small to pick distinct instructions")
    return picked


def _pick_from_small_sets(catalog: Catalog, seed: int, tag: str, count: int):
    """Pick one (set, mnemonic) per set, walking the smallest sets first.

    Planting rules in the smallest sets keeps the chance of a random
    emission non-vanishing, which is what makes the scenario learnable.
    """
    by_size = sorted(catalog.sets, key=lambda s: (len(s.instructions), s.name))
    if count > len(by_size):
        raise ConfigError("catalog has fewer sets than requested pattern steps")
    picked = []
    for k, iset in enumerate(by_size[:count]):
        h = hashlib.blake2b(f"{seed}|{tag}|{k}".encode(), digest_size=8).digest()
        instr = iset.instructions[int.from_bytes(h, "little") % len(iset.instructions)]
        picked.append((iset.name, instr.mnemonic, instr))
    if seed % 2:
        picked.reverse()
    return picked


def make_scenario(seed: int, difficulty: str, catalog: Optional[Catalog] = None) -> SimScenario:
    """Planted-rule scenarios of graded difficulty over the given catalog
    (the bundled synthetic one by default)."""
    if difficulty == "demo":
        return demo_scenario(seed)
    if difficulty not in ("easy", "medium", "hard"):
        raise ConfigError(f"unknown scenario difficulty {difficulty!r}")
    if catalog is None:
        from .fixtures import build_synthetic

        catalog = build_synthetic()

    if difficulty == "easy":
        (s1, m1, _), (s2, m2, _) = _pick_from_small_sets(catalog, seed, "easy", 2)
        rule = PlantedRule(
            name="planted-pair",
            pattern=(PatternStep(mnemonic=m1, set_name=s1),
                     PatternStep(mnemonic=m2, set_name=s2)),
            contiguous=True,
            effects=RuleEffects(recovery_cycles=50, machine_clears=1, leak_bytes=4),
        )
        return SimScenario(name="easy", seed=seed, rules=(rule,))

    if difficulty == "medium":
        picks = _pick_instructions(catalog, seed, "medium", 5)
        leak = PlantedRule(
            name="gapped-triple",
            pattern=tuple(
                PatternStep(mnemonic=m, set_name=s) for s, m, _ in picks[:3]
            ),
            contiguous=False,
            effects=RuleEffects(recovery_cycles=60, machine_clears=1, leak_bytes=4),
        )
        distractor = PlantedRule(
            name="counter-only-pair",
            pattern=tuple(
                PatternStep(mnemonic=m, set_name=s) for s, m, _ in picks[3:5]
            ),
            contiguous=True,
            effects=RuleEffects(recovery_cycles=25),
        )
        return SimScenario(name="medium", seed=seed, rules=(leak, distractor))

    picks = _pick_instructions(catalog, seed, "hard", 5)
    (s1, m1, i1), (s2, m2, _), (se, me, _), (sd1, md1, _), (sd2, md2, _) = picks
    # The leading step demands a specific operand choice when the picked
    # instruction has a register slot to constrain.
    operand = None
    if i1.operand_slots:
        slot0 = i1.operand_slots[0]
        cand_h = hashlib.blake2b(f"{seed}|hardop".encode(), digest_size=8).digest()
        operand = (0, slot0.candidates[int.from_bytes(cand_h, "little") % len(slot0.candidates)])
    leak = PlantedRule(
        name="operand-conditional-pair",
        pattern=(PatternStep(mnemonic=m1, set_name=s1, operand=operand),
                 PatternStep(mnemonic=m2, set_name=s2)),
        contiguous=True,
        effects=RuleEffects(recovery_cycles=80, machine_clears=2, leak_bytes=4),
    )
    trap = PlantedRule(
        name="exception-distractor",
        pattern=(PatternStep(mnemonic=me, set_name=se),),
        effects=RuleEffects(raises_exception=ExceptionKind.SEGFAULT),
    )
    distractor = PlantedRule(
        name="counter-only-pair",
        pattern=(PatternStep(mnemonic=md1, set_name=sd1),
                 PatternStep(mnemonic=md2, set_name=sd2)),
        contiguous=True,
        effects=RuleEffects(recovery_cycles=30),
    )
    return SimScenario(name="hard", seed=seed, rules=(leak, trap, distractor))


def demo_scenario(seed: int = 0) -> SimScenario:
    """Fixed rules mirroring the bundled corpus sequences, so replaying
    those files against the simulator classifies them as leaks."""
    rules = (
        PlantedRule(
            name="mmx-x87-pair",
            pattern=(PatternStep(mnemonic="PSUBQ"), PatternStep(mnemonic="FCOMIP")),
            contiguous=True,
            effects=RuleEffects(recovery_cycles=60, machine_clears=1, leak_bytes=4),
        ),
        PlantedRule(
            name="serialize-window",
            pattern=(PatternStep(mnemonic="SERIALIZE"), PatternStep(mnemonic="RDGSBASE")),
            contiguous=True,
            effects=RuleEffects(recovery_cycles=40, leak_bytes=2),
        ),
        PlantedRule(
            name="verw-window",
            pattern=(PatternStep(mnemonic="VERW"), PatternStep(mnemonic="LZCNT")),
            contiguous=True,
            effects=RuleEffects(recovery_cycles=40, leak_bytes=2),
        ),
    )
    return SimScenario(name="demo", seed=seed, rules=rules)


# --- scenario (de)serialization ----------------------------------------------


def scenario_to_json(scenario: SimScenario) -> dict:
    return {
        "name": scenario.name,
        "seed": scenario.seed,
        "noise": scenario.noise,
        "rules": [
            {
                "name": r.name,
                "contiguous": r.contiguous,
                "pattern": [
                    {
                        "mnemonic": p.mnemonic,
                        "set": p.set_name,
                        "operand": list(p.operand) if p.operand else None,
                    }
                    for p in r.pattern
                ],
                "effects": {
                    "recovery_cycles": r.effects.recovery_cycles,
                    "machine_clears": r.effects.machine_clears,
                    "leak_bytes": r.effects.leak_bytes,
                    "raises": r.effects.raises_exception.value
                    if r.effects.raises_exception
                    else None,
                },
            }
            for r in scenario.rules
        ],
    }


def scenario_from_json(data: dict) -> SimScenario:
    try:
        rules = []
        for robj in data.get("rules", []):
            pattern = tuple(
                PatternStep(
                    mnemonic=p.get("mnemonic"),
                    set_name=p.get("set"),
                    operand=tuple(p["operand"]) if p.get("operand") else None,
                )
                for p in robj["pattern"]
            )
            eff = robj.get("effects", {})
            raises = eff.get("raises")
            rules.append(
                PlantedRule(
                    name=str(robj["name"]),
                    pattern=pattern,
                    contiguous=bool(robj.get("contiguous", True)),
                    effects=RuleEffects(
                        recovery_cycles=int(eff.get("recovery_cycles", 0)),
                        machine_clears=int(eff.get("machine_clears", 0)),
                        leak_bytes=int(eff.get("leak_bytes", 0)),
                        raises_exception=ExceptionKind(raises) if raises else None,
                    ),
                )
            )
        return SimScenario(
            name=str(data.get("name", "scenario")),
            seed=int(data.get("seed", 0)),
            rules=tuple(rules),
            noise=int(data.get("noise", 2)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed scenario: {exc}") from exc


def save_scenario(scenario: SimScenario, path: str | Path) -> None:
    Path(path).write_text(json.dumps(scenario_to_json(scenario), indent=1) + "\n")


def load_scenario(path: str | Path) -> SimScenario:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return scenario_from_json(data)


def with_seed(scenario: SimScenario, seed: int) -> SimScenario:
    return replace(scenario, seed=seed)
