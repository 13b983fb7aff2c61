"""Episode logs, training curves, and leak-rate sweeps.

Logs are JSON Lines: one self-contained record per episode, append-only,
so a run that dies mid-write loses at most its final line. The loader
mirrors that: a truncated final line is dropped with a warning, but a
corrupt line anywhere else is treated as real damage and refused.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backends import MeasurementBackend
from .catalog import ConcreteInstruction
from .config import EnvConfig
from .errors import ConfigError, ContractViolation, UarchFuzzError
from .leak import leak_rate, run_protocol
from . import plots

log = logging.getLogger(__name__)


# --- episode records ---------------------------------------------------------------


@dataclass(frozen=True)
class EpisodeRecord:
    timestamp: float
    index: int
    sequence: tuple[str, ...]
    step_rewards: tuple[float, ...]
    breakdowns: tuple[dict, ...]
    trace: Optional[dict] = None
    counters: Optional[dict] = None
    exception: Optional[str] = None

    @property
    def total_reward(self) -> float:
        return float(sum(self.step_rewards))

    @property
    def length(self) -> int:
        return len(self.sequence)

    @property
    def leak_bytes(self) -> int:
        return max((int(b.get("byte_leakage", 0)) for b in self.breakdowns), default=0)

    def to_json_obj(self) -> dict:
        out = dataclasses.asdict(self)
        out["sequence"] = list(self.sequence)
        out["step_rewards"] = list(self.step_rewards)
        out["breakdowns"] = list(self.breakdowns)
        return out

    @classmethod
    def from_json_obj(cls, obj: dict) -> "EpisodeRecord":
        try:
            return cls(
                timestamp=float(obj["timestamp"]),
                index=int(obj["index"]),
                sequence=tuple(str(s) for s in obj["sequence"]),
                step_rewards=tuple(float(r) for r in obj["step_rewards"]),
                breakdowns=tuple(dict(b) for b in obj["breakdowns"]),
                trace=obj.get("trace"),
                counters=obj.get("counters"),
                exception=obj.get("exception"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise UarchFuzzError(f"malformed episode record: {exc}") from exc


def append_episode(path: str | Path, record: EpisodeRecord) -> None:
    line = json.dumps(record.to_json_obj(), sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(line + "\n")


class EpisodeWriter:
    """Single-writer append handle for one run's episode log."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "a", encoding="utf-8")

    def write(self, record: EpisodeRecord) -> None:
        self._f.write(json.dumps(record.to_json_obj(), sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> "EpisodeWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_log(path: str | Path) -> list[EpisodeRecord]:
    """Read a JSONL episode log.

    A bad final line is assumed to be a truncated in-flight write and is
    dropped with a warning; a bad line anywhere else means the file is
    damaged and parsing fails hard, naming the line.
    """
    path = Path(path)
    records: list[EpisodeRecord] = []
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(EpisodeRecord.from_json_obj(json.loads(line)))
        except (json.JSONDecodeError, UarchFuzzError) as exc:
            if lineno == len(lines):
                log.warning("%s: dropping truncated final line %d (%s)", path, lineno, exc)
                break
            raise UarchFuzzError(f"{path}: corrupt record at line {lineno}: {exc}") from exc
    return records


# --- curves --------------------------------------------------------------------------


@dataclass(frozen=True)
class CurveSeries:
    values: np.ndarray
    mean: np.ndarray
    variance: np.ndarray


def running_stats(values: Sequence[float], window: int) -> tuple[np.ndarray, np.ndarray]:
    """Centered running mean and variance; the window shrinks at the edges."""
    if window < 1:
        raise ContractViolation(f"window must be >= 1, got {window}")
    vals = np.asarray(values, dtype=np.float64)
    n = len(vals)
    mean = np.empty(n)
    var = np.empty(n)
    before = (window - 1) // 2
    after = window // 2
    for i in range(n):
        chunk = vals[max(0, i - before) : min(n, i + after + 1)]
        mean[i] = chunk.mean()
        var[i] = chunk.var()
    return mean, var


def reward_curve(records: Sequence[EpisodeRecord], window: int) -> CurveSeries:
    values = np.array([r.total_reward for r in records], dtype=np.float64)
    mean, var = running_stats(values, window)
    return CurveSeries(values=values, mean=mean, variance=var)


def length_curve(records: Sequence[EpisodeRecord], window: int) -> CurveSeries:
    values = np.array([float(r.length) for r in records], dtype=np.float64)
    mean, var = running_stats(values, window)
    return CurveSeries(values=values, mean=mean, variance=var)


def scatter_points(records: Sequence[EpisodeRecord]) -> list[tuple[int, float, int]]:
    return [(r.index, r.total_reward, r.leak_bytes) for r in records]


# --- leak-rate sweeps ------------------------------------------------------------------


@dataclass(frozen=True)
class LeakRateSeries:
    """Rates along an iteration sweep at one granularity.

    Two bit-per-second bases are reported because figures in the wild
    disagree on which to use: ``rates`` uses end-to-end elapsed time
    (execute + probe), ``probe_rates`` counts only probe time.
    """

    label: str
    granularity: int
    n_values: tuple[int, ...]
    rates: tuple[float, ...]
    probe_rates: tuple[float, ...]
    mean: tuple[float, ...] = field(default=())
    variance: tuple[float, ...] = field(default=())

    def __post_init__(self) -> None:
        if any(b >= a for a, b in zip(self.n_values[1:], self.n_values)):
            raise ContractViolation("sweep N values must be strictly increasing")
        if not len(self.n_values) == len(self.rates) == len(self.probe_rates):
            raise ContractViolation("sweep arrays must have equal length")


def _rate_or_zero(bits: int, elapsed: float) -> float:
    if bits == 0:
        return 0.0
    return leak_rate(bits, elapsed)


def leak_rate_sweep(
    seq: Sequence[ConcreteInstruction],
    n_values: Sequence[int],
    granularities: Sequence[int],
    backend: MeasurementBackend,
    cfg: EnvConfig,
    label: str = "sweep",
    window: int = 5,
) -> list[LeakRateSeries]:
    """Run the full leak protocol over an N x granularity grid.

    Returns one series per granularity with bits/second on both elapsed
    bases plus running mean / rolling variance of the end-to-end rate.
    """
    ns = [int(n) for n in n_values]
    if not ns:
        raise ConfigError("sweep needs at least one N value")
    if any(b >= a for a, b in zip(ns[1:], ns)):
        raise ConfigError(f"sweep N values must be strictly increasing, got {ns}")
    if any(n < 1 for n in ns):
        raise ConfigError("sweep N values must be >= 1")

    out: list[LeakRateSeries] = []
    for g in granularities:
        rates: list[float] = []
        probe_rates: list[float] = []
        for n in ns:
            run_cfg = dataclasses.replace(cfg, leak_iterations=n, granularity=int(g))
            result = run_protocol(seq, backend, run_cfg)
            outcome = result.outcome
            bits = outcome.decoded_bytes * 8
            rates.append(_rate_or_zero(bits, outcome.elapsed))
            probe_rates.append(
                _rate_or_zero(bits, outcome.probe_elapsed)
                if outcome.probe_elapsed > 0
                else 0.0
            )
        mean, var = running_stats(rates, window)
        out.append(
            LeakRateSeries(
                label=f"{label} g={g}",
                granularity=int(g),
                n_values=tuple(ns),
                rates=tuple(rates),
                probe_rates=tuple(probe_rates),
                mean=tuple(float(m) for m in mean),
                variance=tuple(float(v) for v in var),
            )
        )
    return out


def series_to_json(series: LeakRateSeries) -> dict:
    return dataclasses.asdict(series)


# --- plot emission -----------------------------------------------------------------------


def emit_plot(series, path: str | Path, kind: str) -> Path:
    """Render one artifact kind to an SVG file and return its path."""
    path = Path(path)
    if kind == "reward":
        svg = plots.render_curve(
            series.values, series.mean, series.variance, "Episode reward", ylabel="reward"
        )
    elif kind == "length":
        svg = plots.render_curve(
            series.values, series.mean, series.variance,
            "Sequence length", ylabel="instructions",
        )
    elif kind == "scatter":
        svg = plots.render_scatter(series, "Reward by episode (leaks highlighted)")
    elif kind == "leakrate":
        rows = [
            (s.label, s.n_values, s.rates, s.mean, s.variance)
            for s in series
        ]
        svg = plots.render_rate_series(rows, "Leak rate sweep")
    else:
        raise ConfigError(f"unknown plot kind {kind!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path
