"""Request/response models for the HTTP service.

Run configuration travels as the same nested table structure the TOML
config file uses ({"run": {...}, "env": {...}, ...}); the core config
loader validates it, so the service and the CLI reject exactly the same
inputs with the same messages.
"""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class CapabilitiesResponse(BaseModel):
    ok: bool
    problems: list[str]
    details: dict


class ConfigDefaultsResponse(BaseModel):
    config: dict
    toml: str


class CatalogRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    catalog: str = "synthetic"
    denylist: str = "builtin"


class CatalogSetRow(BaseModel):
    name: str
    count: int


class CatalogResponse(BaseModel):
    sets: list[CatalogSetRow]
    total: int
    n_sets: int
    max_set_size: int
    operand_head_size: int


class DiscoveredLeak(BaseModel):
    episode: int
    reward: float
    leak_bytes: int
    lines: list[str]


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict = Field(default_factory=dict)
    total_steps: Optional[int] = None
    out_dir: Optional[str] = None


class TrainResponse(BaseModel):
    episodes: int
    total_steps: int
    updates: int
    elapsed_seconds: float
    mean_reward_last_100: float
    leak_episodes: int
    discovered: list[DiscoveredLeak]
    checkpoint_path: Optional[str]
    log_path: Optional[str]
    plot_paths: list[str]


class ReplayRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict = Field(default_factory=dict)
    sequence: list[str]


class LeakReport(BaseModel):
    decoded_bytes: int
    matched_fraction: float
    elapsed_seconds: float
    probe_elapsed_seconds: float
    granularity: int


class ReplayResponse(BaseModel):
    reward: float
    breakdown: dict
    trace: Optional[dict]
    counters: Optional[dict]
    exception: Optional[str]
    leak: Optional[LeakReport]
    sequence: list[str]


class LeakRateRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: dict = Field(default_factory=dict)
    sequence: list[str]
    n_values: list[int]
    granularities: list[int] = Field(default_factory=lambda: [1, 4, 8])
    label: str = "sweep"
    out_dir: Optional[str] = None


class LeakRateSeriesModel(BaseModel):
    label: str
    granularity: int
    n_values: list[int]
    rates: list[float]
    probe_rates: list[float]
    mean: list[float]
    variance: list[float]


class LeakRateResponse(BaseModel):
    series: list[LeakRateSeriesModel]
    series_paths: list[str]
    plot_path: Optional[str]


class AnalyzeRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    log_path: str
    out_dir: str
    window: int = 51


class AnalyzeResponse(BaseModel):
    episodes: int
    plot_paths: list[str]


class ErrorResponse(BaseModel):
    error: str
    detail: str
