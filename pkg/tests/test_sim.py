"""Simulated backend: planted rules, scenario generation, purity, and the
brute-force random-policy reward oracle."""

import dataclasses
import itertools
from collections import defaultdict

import numpy as np
import pytest

from uarchfuzz.backends import ExceptionKind, get_backend
from uarchfuzz.catalog import action_space_shape, parse_sequence, resolve
from uarchfuzz.config import RunConfig
from uarchfuzz.env import Action, evaluate_sequence, make_environment
from uarchfuzz.errors import ConfigError
from uarchfuzz.fixtures import load_run_catalog
from uarchfuzz.observe import make_observer
from uarchfuzz.sim import (
    PatternStep,
    PlantedRule,
    RuleEffects,
    SimScenario,
    evaluate,
    load_scenario,
    make_scenario,
    save_scenario,
    scenario_from_json,
    scenario_to_json,
)
from conftest import make_run_config


def easy_cfg(seed: int = 7) -> RunConfig:
    return make_run_config(scenario="easy", scenario_seed=seed)


# --- scenario construction ------------------------------------------------------


def test_same_seed_same_scenario():
    a = make_scenario(7, "easy")
    b = make_scenario(7, "easy")
    assert scenario_to_json(a) == scenario_to_json(b)


def test_different_seeds_differ():
    a = make_scenario(0, "easy")
    b = make_scenario(1, "easy")
    assert scenario_to_json(a) != scenario_to_json(b)


def test_easy_has_exactly_one_leaking_rule():
    sc = make_scenario(3, "easy")
    leaking = [r for r in sc.rules if r.effects.leak_bytes > 0]
    assert len(leaking) == 1
    assert len(leaking[0].pattern) == 2
    assert leaking[0].contiguous


def test_easy_plants_in_the_two_smallest_sets(synthetic_catalog):
    # Small sets keep random discovery probability workable.
    sizes = {s.name: len(s.instructions) for s in synthetic_catalog.sets}
    small_two = set(sorted(sizes, key=lambda n: (sizes[n], n))[:2])
    for seed in range(5):
        rule = make_scenario(seed, "easy").rules[0]
        assert {step.set_name for step in rule.pattern} == small_two


def test_medium_has_gapped_rule_and_distractor():
    sc = make_scenario(2, "medium")
    leak = [r for r in sc.rules if r.effects.leak_bytes > 0]
    counter_only = [r for r in sc.rules if r.effects.leak_bytes == 0]
    assert len(leak) == 1 and not leak[0].contiguous and len(leak[0].pattern) == 3
    assert counter_only


def test_hard_has_exception_rule():
    sc = make_scenario(5, "hard")
    assert any(r.effects.raises_exception is not None for r in sc.rules)
    leak = [r for r in sc.rules if r.effects.leak_bytes > 0]
    assert len(leak) == 1


def test_unknown_difficulty_rejected():
    with pytest.raises(ConfigError):
        make_scenario(0, "impossible")


def test_scenario_json_and_file_round_trip(tmp_path):
    sc = make_scenario(11, "hard")
    assert scenario_to_json(scenario_from_json(scenario_to_json(sc))) == scenario_to_json(sc)
    path = tmp_path / "scenario.json"
    save_scenario(sc, path)
    assert scenario_to_json(load_scenario(path)) == scenario_to_json(sc)


# --- rule application -----------------------------------------------------------


def planted_sequence(cfg: RunConfig):
    """The easy scenario's leaking pair as concrete instructions."""
    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    rule = make_scenario(cfg.scenario_seed, "easy", catalog).rules[0]
    out = []
    for step in rule.pattern:
        iset = next(s for s in catalog.sets if s.name == step.set_name)
        k = next(i for i, ins in enumerate(iset.instructions) if ins.mnemonic == step.mnemonic)
        set_idx = catalog.sets.index(iset)
        out.append(resolve(catalog, set_idx, k, (0,) * 7))
    return rule, out


def test_planted_pair_reports_rule_effects():
    cfg = easy_cfg()
    backend = get_backend(cfg)
    rule, seq = planted_sequence(cfg)
    ev = evaluate_sequence(seq, backend, cfg.env)
    assert ev.breakdown.byte_leakage == rule.effects.leak_bytes
    assert ev.protocol.trace.classified_leak
    # Recovery cycles feed bad speculation: 4x multiplier plus jitter.
    assert ev.breakdown.bad_speculation >= 4 * rule.effects.recovery_cycles


def test_rule_order_sensitivity():
    # Pattern (A, B) must not match the reversed emission.
    cfg = easy_cfg()
    backend = get_backend(cfg)
    _, seq = planted_sequence(cfg)
    ev = evaluate_sequence(list(reversed(seq)), backend, cfg.env)
    assert ev.breakdown.byte_leakage == 0
    assert not ev.protocol.trace.classified_leak


def test_empty_sequence_base_counters_no_leak(demo_cfg, demo_backend):
    res = evaluate([], demo_cfg.env, demo_backend.scenario)
    assert res.exception is None
    # No rule matched: no recovery, no clears, issued == retired.
    counts = res.counters.counts
    assert counts["INT_MISC.RECOVERY_CYCLES_ANY"] == 0.0
    assert counts["MACHINE_CLEARS.COUNT"] == 0.0
    assert counts["UOPS_ISSUED.ANY"] == counts["UOPS_RETIRED.RETIRE_SLOTS"]
    assert counts["CPU_CLK_UNHALTED.THREAD"] > 0
    assert res.leak.decoded_bytes == 0
    assert not res.trace.classified_leak


def test_exception_rule_sets_exception_and_no_leak(corpus_catalog):
    trap = PlantedRule(
        name="trap",
        pattern=(PatternStep(mnemonic="VERR"),),
        effects=RuleEffects(raises_exception=ExceptionKind.SEGFAULT),
    )
    sc = SimScenario(name="t", seed=0, rules=(trap,))
    seq = parse_sequence(corpus_catalog, ["VERR AX"])
    res = evaluate(seq, RunConfig().env, sc)
    assert res.exception == ExceptionKind.SEGFAULT
    assert res.leak is None
    assert res.counters is None


def test_evaluate_is_pure(demo_cfg, demo_backend, corpus_catalog):
    seq = parse_sequence(corpus_catalog, ["PSUBQ MM2, [R15]", "FCOMIP ST4"])
    a = evaluate(seq, demo_cfg.env, demo_backend.scenario)
    b = evaluate(seq, demo_cfg.env, demo_backend.scenario)
    assert a == b


def test_counter_jitter_varies_with_sequence_text(demo_cfg, demo_backend, corpus_catalog):
    a = evaluate(parse_sequence(corpus_catalog, ["VERR AX"]), demo_cfg.env, demo_backend.scenario)
    b = evaluate(parse_sequence(corpus_catalog, ["RDTSCP"]), demo_cfg.env, demo_backend.scenario)
    assert a.counters.counts != b.counters.counts


# --- random-policy reward oracle -------------------------------------------------


def concrete_distribution(catalog):
    """Exact distribution of resolved instructions under uniform head sampling.

    Instruction indices wrap modulo set size, operand indices modulo each
    slot's candidate count, so probabilities are multiples of the head cells.
    """
    shape = action_space_shape(catalog)
    probs = defaultdict(float)
    for set_idx, iset in enumerate(catalog.sets):
        for head_idx in range(shape.max_set_size):
            spec = iset.instructions[head_idx % len(iset.instructions)]
            p = (1.0 / shape.n_sets) * (1.0 / shape.max_set_size)
            slot_dists = []
            for slot in spec.operand_slots:
                weights = defaultdict(float)
                for idx in range(shape.operand_head_size):
                    weights[slot.candidates[idx % len(slot.candidates)]] += (
                        1.0 / shape.operand_head_size
                    )
                slot_dists.append(list(weights.items()))
            if not slot_dists:
                probs[(spec.mnemonic, ())] += p
                continue
            for combo in itertools.product(*slot_dists):
                q = p
                for _, w in combo:
                    q *= w
                probs[(spec.mnemonic, tuple(c for c, _ in combo))] += q
    return probs


def expected_random_reward(cfg: RunConfig) -> float:
    """Brute force over every length-1 and length-2 resolved sequence."""
    from uarchfuzz.catalog import ConcreteInstruction

    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    backend = get_backend(cfg)
    by_key = {}
    for iset in catalog.sets:
        for ins in iset.instructions:
            by_key[ins.mnemonic] = ins

    def instr_of(key):
        mnemonic, ops = key
        spec = by_key[mnemonic]
        return ConcreteInstruction(
            mnemonic=mnemonic,
            set_name=spec.set_name,
            operands=ops,
            register_types=spec.register_types,
        )

    total = 0.0
    items = [(instr_of(k), p) for k, p in concrete_distribution(catalog).items()]
    for i1, p1 in items:
        total += p1 * evaluate_sequence([i1], backend, cfg.env).breakdown.capped
    for i1, p1 in items:
        for i2, p2 in items:
            total += p1 * p2 * evaluate_sequence([i1, i2], backend, cfg.env).breakdown.capped
    return total


@pytest.mark.slow
def test_random_policy_mean_matches_brute_force_within_2pct():
    cfg = make_run_config(
        scenario="easy",
        scenario_seed=7,
        env={"max_len": 2},
        observer={"dim": 16},
    )
    oracle = expected_random_reward(cfg)

    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    env = make_environment(catalog, get_backend(cfg), make_observer(cfg.observer), cfg.env)
    sizes = env.shape.head_sizes
    rng = np.random.default_rng(123)
    episodes = 100_000
    total = 0.0
    for _ in range(episodes):
        env.reset()
        done = False
        while not done:
            idxs = [int(rng.integers(s)) for s in sizes]
            _, reward, done, _ = env.step(Action.from_indices(idxs))
            total += reward
    measured = total / episodes
    assert oracle > 0
    assert abs(measured - oracle) / oracle < 0.02, (measured, oracle)
