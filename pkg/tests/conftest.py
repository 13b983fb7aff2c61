"""Shared fixtures: bundled catalogs, sim-backed configs, and environments."""

import dataclasses

import pytest

from uarchfuzz.backends import get_backend
from uarchfuzz.config import EnvConfig, RunConfig
from uarchfuzz.env import make_environment
from uarchfuzz.fixtures import load_run_catalog, resolve_catalog
from uarchfuzz.observe import make_observer


@pytest.fixture(scope="session")
def synthetic_catalog():
    return resolve_catalog("synthetic")


@pytest.fixture(scope="session")
def corpus_catalog():
    return resolve_catalog("corpus")


@pytest.fixture(scope="session")
def skylake_catalog():
    return resolve_catalog("skylake")


@pytest.fixture(scope="session")
def raptorlake_catalog():
    return resolve_catalog("raptorlake")


@pytest.fixture
def env_cfg():
    return EnvConfig()


def make_run_config(**overrides) -> RunConfig:
    """Sim-backend RunConfig with per-section overrides (env=, train=, ...)."""
    cfg = RunConfig()
    section_fields = {"env", "observer", "train"}
    sections = {k: overrides.pop(k) for k in list(overrides) if k in section_fields}
    cfg = dataclasses.replace(cfg, **overrides)
    for name, changes in sections.items():
        cfg = dataclasses.replace(cfg, **{name: dataclasses.replace(getattr(cfg, name), **changes)})
    return cfg


@pytest.fixture
def demo_cfg():
    # Fixed demo rules match the bundled corpus mnemonics.
    return make_run_config(catalog="corpus", scenario="demo")


@pytest.fixture
def demo_backend(demo_cfg):
    return get_backend(demo_cfg)


def build_env(cfg: RunConfig):
    # Same resolution path the trainer uses: named catalog, then denylist.
    catalog = load_run_catalog(cfg.catalog, cfg.denylist)
    backend = get_backend(cfg)
    observer = make_observer(cfg.observer)
    return make_environment(catalog, backend, observer, cfg.env)
