"""Leak verification: decision table, staged protocol, timing decode,
calibration, and rate computation."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uarchfuzz.backends import ExceptionKind, LeakStageResult, get_backend
from uarchfuzz.catalog import RegClass, resolve
from uarchfuzz.errors import CalibrationError, ConfigError, ContractViolation
from uarchfuzz.fixtures import load_run_catalog
from uarchfuzz.harness import BranchKind, COMPARISONS, select_comparisons
from uarchfuzz.leak import (
    TimingVector,
    calibrate_threshold,
    classify_trace,
    decode,
    leak_rate,
    match_pattern,
    run_protocol,
    secret_pattern,
)
from uarchfuzz.sim import make_scenario
from conftest import make_run_config


# --- decision table ----------------------------------------------------------


def test_classify_trace_accepts_exactly_one_row():
    # Leak := fires behind both polarities, suppressed by the fence in both.
    for row in itertools.product([False, True], repeat=4):
        expected = row == (True, True, False, False)
        assert classify_trace(*row) is expected


# --- staged protocol over a scripted backend ----------------------------------


def stage(matched, decoded=0, frac=0.0, exc=None):
    return LeakStageResult(
        matched=matched,
        decoded_bytes=decoded,
        matched_fraction=frac,
        exec_elapsed=0.01,
        probe_elapsed=0.002,
        exception=exc,
    )


class ScriptedBackend:
    """Returns canned per-(branch, fence) stage results and records calls."""

    name = "scripted"

    def __init__(self, script):
        self.script = script
        self.calls = []
        self._clock = 0.0

    def now(self):
        return self._clock

    def counter_stage(self, seq, cfg):
        raise AssertionError("protocol must not touch the counter stage")

    def leak_stage(self, seq, branch, fence, comparison, cfg):
        self.calls.append((branch, fence, comparison.reg_class))
        return self.script[(branch, fence)]


GPR_ONLY = (COMPARISONS[RegClass.GPR],)


def test_je_miss_costs_one_execution(env_cfg):
    backend = ScriptedBackend({(BranchKind.JE, False): stage(False)})
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.executions == 1
    assert not res.trace.classified_leak
    assert res.outcome.decoded_bytes == 0
    assert backend.calls == [(BranchKind.JE, False, RegClass.GPR)]


def test_jne_miss_costs_two_executions(env_cfg):
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 8, 1.0),
            (BranchKind.JNE, False): stage(False),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.executions == 2
    assert not res.trace.classified_leak
    assert res.trace.je_match and not res.trace.jne_match


def test_full_pass_runs_four_stages_in_order(env_cfg):
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 8, 1.0),
            (BranchKind.JNE, False): stage(True, 8, 1.0),
            (BranchKind.JE, True): stage(False),
            (BranchKind.JNE, True): stage(False),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.executions == 4
    assert res.trace.classified_leak
    assert [(b, f) for b, f, _ in backend.calls] == [
        (BranchKind.JE, False),
        (BranchKind.JNE, False),
        (BranchKind.JE, True),
        (BranchKind.JNE, True),
    ]


def test_unsuppressed_fence_je_rejects_after_three(env_cfg):
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 8, 1.0),
            (BranchKind.JNE, False): stage(True, 8, 1.0),
            (BranchKind.JE, True): stage(True, 8, 1.0),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.executions == 3
    assert not res.trace.classified_leak
    assert res.outcome.decoded_bytes == 0


def test_unsuppressed_fence_jne_rejects_after_four(env_cfg):
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 8, 1.0),
            (BranchKind.JNE, False): stage(True, 8, 1.0),
            (BranchKind.JE, True): stage(False),
            (BranchKind.JNE, True): stage(True, 8, 1.0),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.executions == 4
    assert not res.trace.classified_leak


def test_reported_bytes_are_the_weaker_polarity(env_cfg):
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 5, 5 / 8),
            (BranchKind.JNE, False): stage(True, 3, 3 / 8),
            (BranchKind.JE, True): stage(False),
            (BranchKind.JNE, True): stage(False),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.trace.classified_leak
    assert res.outcome.decoded_bytes == 3
    assert res.outcome.matched_fraction == pytest.approx(3 / 8)


def test_two_register_types_run_two_passes(env_cfg):
    comps = select_comparisons({"x87", "ZMM"})
    assert [c.reg_class for c in comps] == [RegClass.X87, RegClass.ZMM]
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 4, 0.5),
            (BranchKind.JNE, False): stage(True, 4, 0.5),
            (BranchKind.JE, True): stage(False),
            (BranchKind.JNE, True): stage(False),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=comps)
    assert res.executions == 8
    assert set(res.trace.per_type) == {"x87", "ZMM"}
    assert all(t.executions == 4 for t in res.trace.per_type.values())


def test_stage_exception_zeroes_the_outcome(env_cfg):
    backend = ScriptedBackend(
        {
            (BranchKind.JE, False): stage(True, 8, 1.0),
            (BranchKind.JNE, False): stage(False, exc=ExceptionKind.SEGFAULT),
        }
    )
    res = run_protocol([], backend, env_cfg, comparisons=GPR_ONLY)
    assert res.exception is ExceptionKind.SEGFAULT
    assert res.outcome.decoded_bytes == 0
    assert res.outcome.matched_fraction == 0.0
    assert not res.trace.classified_leak
    assert res.executions == 2


def test_select_comparisons_defaults_and_order():
    assert select_comparisons({RegClass.GPR}) == (COMPARISONS[RegClass.GPR],)
    # No register operands at all still needs some flag-setter: GPR.
    assert select_comparisons(frozenset()) == (COMPARISONS[RegClass.GPR],)
    ordered = select_comparisons({"ZMM", "GPR", "x87"})
    assert [c.reg_class for c in ordered] == [RegClass.GPR, RegClass.X87, RegClass.ZMM]
    with pytest.raises(ConfigError):
        select_comparisons({"vector"})


# --- timing decode -------------------------------------------------------------


def vec(slots, hits, hit=30.0, miss=300.0):
    return TimingVector(tuple(hit if s in hits else miss for s in range(slots)))


def test_decode_byte_granularity_single_slot():
    decoded = decode([vec(256, {3})], threshold=100.0, granularity=8)
    assert decoded.symbols == ((3,),)
    assert decoded.bytes_by_index == {0: 0x03}


def test_decode_no_hit_yields_nothing():
    decoded = decode([vec(256, set())], threshold=100.0, granularity=8)
    assert decoded.symbols == ((),)
    assert decoded.bytes_by_index == {}
    assert match_pattern(decoded, b"\x03") == (0, 0.0)


def test_decode_nibbles_assemble_most_significant_first():
    decoded = decode([vec(16, {1}), vec(16, {0})], threshold=100.0, granularity=4)
    assert decoded.bytes_by_index == {0: 0x10}


def test_decode_takes_lowest_hit_slot():
    decoded = decode([vec(256, {5, 2, 9})], threshold=100.0, granularity=8)
    assert decoded.bytes_by_index == {0: 0x02}


def test_decode_bits_assemble_a_byte():
    bits = [1, 0, 1, 0, 0, 0, 0, 1]
    timings = [vec(2, {b}) for b in bits]
    decoded = decode(timings, threshold=100.0, granularity=1)
    assert decoded.bytes_by_index == {0: 0xA1}


def test_decode_partial_byte_is_dropped():
    # Second nibble never decodes, so no byte is produced.
    decoded = decode([vec(16, {1}), vec(16, set())], threshold=100.0, granularity=4)
    assert decoded.bytes_by_index == {}


def test_decode_threshold_boundary_is_strict():
    decoded = decode([TimingVector((100.0,) + (300.0,) * 255)], 100.0, 8)
    assert decoded.bytes_by_index == {}


@settings(max_examples=50, deadline=None)
@given(
    data=st.lists(
        st.lists(st.floats(min_value=0.0, max_value=500.0), min_size=16, max_size=16),
        min_size=1,
        max_size=8,
    ),
    lo=st.floats(min_value=0.0, max_value=500.0),
    hi=st.floats(min_value=0.0, max_value=500.0),
)
def test_decode_is_monotone_in_threshold(data, lo, hi):
    if lo > hi:
        lo, hi = hi, lo
    timings = [TimingVector(tuple(row)) for row in data]
    narrow = decode(timings, lo, 4)
    wide = decode(timings, hi, 4)
    for a, b in zip(narrow.symbols, wide.symbols):
        assert set(a) <= set(b)


def test_decode_rejects_bad_granularity_and_shape():
    with pytest.raises(ContractViolation):
        decode([vec(4, set())], 100.0, 2)
    with pytest.raises(ContractViolation):
        decode([vec(8, set())], 100.0, 4)
    with pytest.raises(ContractViolation):
        TimingVector((-1.0, 2.0))


def test_match_pattern_counts_positional_equality():
    decoded = decode(
        [vec(256, {0xAB}), vec(256, {0xCD}), vec(256, set())], 100.0, 8
    )
    matched, frac = match_pattern(decoded, bytes([0xAB, 0x00, 0xEF]))
    assert (matched, frac) == (1, pytest.approx(1 / 3))
    with pytest.raises(ContractViolation):
        match_pattern(decoded, b"")


# --- calibration and rate ------------------------------------------------------


def test_calibrate_threshold_is_median_midpoint():
    assert calibrate_threshold([40.0], [200.0]) == 120.0
    assert calibrate_threshold([30.0, 40.0, 50.0], [100.0, 200.0, 300.0]) == 120.0


def test_calibrate_threshold_rejects_degenerate_modes():
    with pytest.raises(CalibrationError):
        calibrate_threshold([80.0, 80.0], [80.0, 80.0])
    with pytest.raises(CalibrationError):
        calibrate_threshold([], [200.0])
    with pytest.raises(CalibrationError):
        calibrate_threshold([40.0], [])


def test_leak_rate_bits_per_second():
    assert leak_rate(8000, 0.004) == pytest.approx(2_000_000.0)
    with pytest.raises(ContractViolation):
        leak_rate(8000, 0.0)


def test_secret_pattern_is_deterministic_and_sized():
    assert secret_pattern(7, 8) == secret_pattern(7, 8)
    assert secret_pattern(7, 8) != secret_pattern(8, 8)
    assert len(secret_pattern(7, 129)) == 129
    with pytest.raises(ContractViolation):
        secret_pattern(7, 0)


# --- protocol over the simulator ------------------------------------------------


def random_sequences(catalog, rng, count, max_len=3):
    out = []
    while len(out) < count:
        seq = []
        for _ in range(rng.integers(1, max_len + 1)):
            set_idx = int(rng.integers(len(catalog.sets)))
            iset = catalog.sets[set_idx]
            instr_idx = int(rng.integers(len(iset.instructions)))
            ops = tuple(int(rng.integers(4)) for _ in range(7))
            seq.append(resolve(catalog, set_idx, instr_idx, ops))
        out.append(seq)
    return out


def test_benign_sequences_never_classify(env_cfg):
    cfg = make_run_config(scenario="easy", scenario_seed=11)
    backend = get_backend(cfg)
    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    rng = np.random.default_rng(0)
    checked = 0
    for seq in random_sequences(catalog, rng, 140):
        if any(r.matches(seq) for r in backend.scenario.rules):
            continue
        res = run_protocol(seq, backend, cfg.env)
        assert not res.trace.classified_leak
        assert res.outcome.decoded_bytes == 0
        checked += 1
    assert checked >= 100


def test_sim_classifies_exactly_the_planted_matches(env_cfg):
    # Oracle equivalence: the protocol's verdict must agree with direct
    # rule matching, including the medium scenario's counter-only
    # distractor, which must never classify.
    cfg = make_run_config(scenario="medium", scenario_seed=5)
    backend = get_backend(cfg)
    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    scenario = backend.scenario
    rng = np.random.default_rng(1)

    def planted(rule):
        seq = []
        for step in rule.pattern:
            iset = next(s for s in catalog.sets if s.name == step.set_name)
            k = next(
                i for i, ins in enumerate(iset.instructions)
                if ins.mnemonic == step.mnemonic
            )
            seq.append(resolve(catalog, catalog.sets.index(iset), k, (0,) * 7))
        return seq

    candidates = [planted(r) for r in scenario.rules]
    candidates += random_sequences(catalog, rng, 40)
    for seq in candidates:
        leak_expected = any(
            r.matches(seq) for r in scenario.leaking_rules()
        )
        res = run_protocol(seq, backend, cfg.env)
        assert res.trace.classified_leak == leak_expected
        if leak_expected:
            assert res.outcome.decoded_bytes > 0


def test_distractor_moves_counters_not_the_verdict():
    cfg = make_run_config(scenario="medium", scenario_seed=5)
    backend = get_backend(cfg)
    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    scenario = backend.scenario
    distractors = [
        r for r in scenario.rules
        if r.effects.leak_bytes == 0 and r.effects.raises_exception is None
    ]
    assert distractors, "medium plants a counter-only distractor"
    rule = distractors[0]
    seq = []
    for step in rule.pattern:
        iset = next(s for s in catalog.sets if s.name == step.set_name)
        k = next(
            i for i, ins in enumerate(iset.instructions)
            if ins.mnemonic == step.mnemonic
        )
        seq.append(resolve(catalog, catalog.sets.index(iset), k, (0,) * 7))
    counter = backend.counter_stage(seq, cfg.env)
    assert counter.sample.counts["INT_MISC.RECOVERY_CYCLES_ANY"] >= rule.effects.recovery_cycles
    res = run_protocol(seq, backend, cfg.env)
    assert not res.trace.classified_leak
