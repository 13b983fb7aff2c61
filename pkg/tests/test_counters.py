"""Counter event table, per-microarchitecture aliases, and aggregation."""

import pytest

from uarchfuzz.counters import (
    EVENT_NAMES,
    EVENTS,
    RAPTOR_LAKE,
    SKYLAKE_X,
    CounterSample,
    aggregate,
    available_events,
    event_spec,
    resolve_event_name,
)
from uarchfuzz.errors import ConfigError


def test_event_table_has_the_published_twelve():
    assert len(EVENTS) == 12
    assert "UOPS_ISSUED.ANY" in EVENT_NAMES
    assert "INT_MISC.RECOVERY_CYCLES_ANY" in EVENT_NAMES


def test_every_event_has_a_description():
    for e in EVENTS:
        assert e.description.strip()


def test_skylake_names_are_canonical():
    for name in EVENT_NAMES:
        assert resolve_event_name(name, SKYLAKE_X) == name


def test_raptor_lake_fp_assist_alias():
    assert resolve_event_name("FP_ASSIST.ANY", RAPTOR_LAKE) == "ASSISTS.FP"
    assert resolve_event_name("OTHER_ASSISTS.ANY", RAPTOR_LAKE) == "ASSISTS.ANY"


def test_raptor_lake_drops_unavailable_events():
    assert resolve_event_name("HLE_RETIRED.ABORTED_UNFRIENDLY", RAPTOR_LAKE) is None
    assert resolve_event_name("HW_INTERRUPTS.RECEIVED", RAPTOR_LAKE) is None
    avail = available_events(RAPTOR_LAKE)
    assert "HLE_RETIRED.ABORTED_UNFRIENDLY" not in avail
    assert len(avail) == len(EVENTS) - 2


def test_unknown_event_and_uarch_are_config_errors():
    with pytest.raises(ConfigError):
        event_spec("NOT_AN_EVENT")
    with pytest.raises(ConfigError):
        resolve_event_name("UOPS_ISSUED.ANY", "alder_lake")


def test_sample_rejects_negative_counts():
    with pytest.raises(ConfigError):
        CounterSample(counts={"UOPS_ISSUED.ANY": -1.0})


def test_sample_absent_event_is_none_not_zero():
    s = CounterSample(counts={"UOPS_ISSUED.ANY": 5.0})
    assert s.get("MACHINE_CLEARS.COUNT") is None
    with pytest.raises(ConfigError):
        s.require("MACHINE_CLEARS.COUNT")


def test_aggregate_median():
    samples = [CounterSample(counts={"E": v}) for v in (3.0, 5.0, 100.0)]
    agg = aggregate(samples, "median")
    assert agg.counts["E"] == 5.0
    assert agg.repeats == 3


def test_aggregate_mean_and_common_events_only():
    a = CounterSample(counts={"E": 1.0, "F": 10.0})
    b = CounterSample(counts={"E": 3.0})
    agg = aggregate([a, b], "mean")
    assert agg.counts == {"E": 2.0}


def test_aggregate_rejects_empty_and_unknown_how():
    with pytest.raises(ConfigError):
        aggregate([])
    with pytest.raises(ConfigError):
        aggregate([CounterSample(counts={"E": 1.0})], "mode")
