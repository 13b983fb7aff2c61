"""Run configuration: typed dataclasses, TOML file loading, env-var
overrides, and a canonical hash used to stamp checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

GRANULARITIES = (1, 4, 8)
DEFAULT_COUNTER_SCALE = 1.0 / math.log1p(1e6)


@dataclass(frozen=True)
class EnvConfig:
    """Episode and measurement parameters."""

    max_len: int = 10
    leak_weight: float = 300.0
    counter_repeats: int = 10
    leak_iterations: int = 100
    granularity: int = 4
    seed: int = 0
    secret_len: int = 8
    match_min_bytes: int = 1
    recovery_event: str = "INT_MISC.RECOVERY_CYCLES_ANY"
    aggregation: str = "median"

    def __post_init__(self) -> None:
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(
                f"granularity must be one of {GRANULARITIES}, got {self.granularity}"
            )
        if self.leak_iterations < 1:
            raise ConfigError("leak_iterations must be >= 1")
        if self.counter_repeats < 1:
            raise ConfigError("counter_repeats must be >= 1")
        if self.secret_len < 1:
            raise ConfigError("secret_len must be >= 1")
        if self.match_min_bytes < 1:
            raise ConfigError("match_min_bytes must be >= 1")
        if self.aggregation not in ("median", "mean"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


@dataclass(frozen=True)
class ObserverConfig:
    """Observation vector construction."""

    embedder: str = "local"
    dim: int = 256
    embed_seed: int = 0
    dynamic_gain: float = 1.0
    counter_scale: float = DEFAULT_COUNTER_SCALE
    counter_scales: Mapping[str, float] = field(default_factory=dict)
    endpoint: str = ""
    model_id: str = "text-embedding-3-small"
    api_key_env: str = "UARCHFUZZ_EMBED_API_KEY"
    cache_dir: str = ""

    def __post_init__(self) -> None:
        if self.embedder not in ("local", "remote"):
            raise ConfigError(f"embedder must be 'local' or 'remote', got {self.embedder!r}")
        if self.dim < 16:
            raise ConfigError(f"embedding dim must be >= 16, got {self.dim}")
        if self.embedder == "remote" and not self.endpoint:
            raise ConfigError("remote embedder requires an endpoint")


@dataclass(frozen=True)
class TrainConfig:
    """PPO hyperparameters. Defaults mirror the common published ones."""

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    rollout_len: int = 512
    learning_rate: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    max_grad_norm: float = 0.5
    hidden: int = 64
    total_steps: int = 50_000
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.clip_eps <= 0:
            raise ConfigError(f"clip_eps must be > 0, got {self.clip_eps}")
        if self.rollout_len < 1 or self.minibatch_size < 1 or self.epochs < 1:
            raise ConfigError("rollout_len, minibatch_size and epochs must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    """Everything one training/replay/sweep run needs."""

    backend: str = "sim"
    catalog: str = "synthetic"
    denylist: str = "builtin"
    scenario: str = "easy"
    scenario_path: str = ""
    scenario_seed: int = 0
    uarch: str = "auto"
    cores: tuple[int, ...] = (0,)
    log_dir: str = "runs"
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.backend not in ("sim", "hw"):
            raise ConfigError(f"backend must be 'sim' or 'hw', got {self.backend!r}")
        if not self.cores:
            raise ConfigError("cores must name at least one evaluation slot")
        if self.scenario not in ("easy", "medium", "hard", "demo") and not self.scenario_path:
            raise ConfigError(
                f"scenario must be easy|medium|hard|demo or come from scenario_path, "
                f"got {self.scenario!r}"
            )

    def with_master_seed(self, seed: int) -> "RunConfig":
        """Spread one master seed over every seeded component."""
        return dataclasses.replace(
            self,
            seed=seed,
            scenario_seed=seed + 1,
            env=dataclasses.replace(self.env, seed=seed + 2),
            train=dataclasses.replace(self.train, seed=seed + 3),
            observer=dataclasses.replace(self.observer, embed_seed=seed + 4),
        )


_SECTION_TYPES = {"env": EnvConfig, "observer": ObserverConfig, "train": TrainConfig}

# Environment variables that override the corresponding [run] key.
_ENV_OVERRIDES = {
    "UARCHFUZZ_BACKEND": ("backend", str),
    "UARCHFUZZ_SEED": ("seed", int),
    "UARCHFUZZ_LOG_DIR": ("log_dir", str),
    "UARCHFUZZ_EMBED_ENDPOINT": ("observer.endpoint", str),
}


def _build_section(cls, data: Mapping, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in data.items()})
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def from_dict(data: Mapping) -> RunConfig:
    sections = {}
    run_keys = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{key}] must be a table")
            sections[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key == "run":
            if not isinstance(value, Mapping):
                raise ConfigError("[run] must be a table")
            run_keys = dict(value)
        else:
            raise ConfigError(f"unknown top-level section [{key}]")
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"env", "observer", "train"}
    unknown = set(run_keys) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [run]: {', '.join(sorted(unknown))}")
    if "cores" in run_keys:
        run_keys["cores"] = tuple(int(c) for c in run_keys["cores"])
    try:
        return RunConfig(**run_keys, **sections)
    except TypeError as exc:
        raise ConfigError(f"[run]: {exc}") from exc


def apply_env_overrides(cfg: RunConfig, environ: Mapping[str, str] = os.environ) -> RunConfig:
    for var, (dotted, cast) in _ENV_OVERRIDES.items():
        if var not in environ:
            continue
        try:
            value = cast(environ[var])
        except ValueError as exc:
            raise ConfigError(f"{var}: {exc}") from exc
        if "." in dotted:
            section, name = dotted.split(".", 1)
            sub = dataclasses.replace(getattr(cfg, section), **{name: value})
            cfg = dataclasses.replace(cfg, **{section: sub})
        else:
            cfg = dataclasses.replace(cfg, **{dotted: value})
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(raw.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return apply_env_overrides(from_dict(data))


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["cores"] = list(out["cores"])
    out["observer"]["counter_scales"] = dict(out["observer"]["counter_scales"])
    return out


def config_to_sections(cfg: RunConfig) -> dict:
    """Dict in the same sectioned shape from_dict and the TOML file use."""
    d = config_to_dict(cfg)
    sections = {name: d.pop(name) for name in ("env", "observer", "train")}
    return {"run": d, **sections}


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def render_toml(cfg: RunConfig) -> str:
    """Full config as a TOML document, defaults included."""
    d = config_to_dict(cfg)
    lines = ["[run]"]
    for key in ("backend", "catalog", "denylist", "scenario", "scenario_path",
                "scenario_seed", "uarch", "cores", "log_dir", "seed"):
        lines.append(f"{key} = {_toml_value(d[key])}")
    for section in ("env", "observer", "train"):
        lines.append("")
        lines.append(f"[{section}]")
        for key, value in d[section].items():
            if key == "counter_scales":
                continue
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
