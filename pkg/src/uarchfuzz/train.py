"""Training driver: parallel environment slots feeding one PPO updater.

One environment instance runs per configured core slot. Slots share the
policy parameters (snapshotted per rollout step) and a single updater
owns them exclusively during gradient steps. All sampling flows through
one seeded generator in fixed slot order, so a sim-backend run is fully
deterministic: same config and seed, same episode log, same checkpoint.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ppo
from .analytics import EpisodeRecord, EpisodeWriter
from .backends import MeasurementBackend, get_backend
from .catalog import Catalog, action_space_shape
from .config import RunConfig, config_hash
from .env import Action, Environment, make_environment
from .errors import UarchFuzzError
from .fixtures import load_run_catalog
from .observe import Observer, make_observer

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpisodeSummary:
    index: int
    reward: float
    length: int
    leak_bytes: int
    lines: tuple[str, ...]
    end_step: int


@dataclass
class TrainProgress:
    total_steps: int
    updates: int
    episodes: list[EpisodeSummary]
    params: ppo.Params


@dataclass(frozen=True)
class TrainResult:
    params: ppo.Params
    episodes: tuple[EpisodeSummary, ...]
    total_steps: int
    updates: int
    elapsed: float
    checkpoint_path: Optional[Path]
    log_path: Optional[Path]
    final_stats: Optional[ppo.LossStats]


def head_sizes_for(catalog: Catalog) -> tuple[int, ...]:
    shape = action_space_shape(catalog)
    return (shape.n_sets, shape.max_set_size) + (shape.operand_head_size,) * 7


def checkpoint_meta(config: RunConfig, catalog: Catalog, obs_dim: int) -> dict:
    return {
        "head_sizes": list(head_sizes_for(catalog)),
        "obs_dim": obs_dim,
        "hidden": config.train.hidden,
        "config_hash": config_hash(config),
    }


@dataclass
class _Slot:
    """One worker environment plus its in-flight episode accumulation."""

    env: Environment
    obs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    step_rewards: list[float] = field(default_factory=list)
    breakdowns: list[dict] = field(default_factory=list)
    trace: Optional[dict] = None
    counters: Optional[dict] = None
    exception: Optional[str] = None

    def begin_episode(self) -> None:
        self.obs = self.env.reset().concat()
        self.step_rewards = []
        self.breakdowns = []
        self.trace = None
        self.counters = None
        self.exception = None


class Trainer:
    def __init__(
        self,
        config: RunConfig,
        *,
        catalog: Optional[Catalog] = None,
        backend: Optional[MeasurementBackend] = None,
        observer: Optional[Observer] = None,
        run_dir: Optional[str | Path] = None,
        stop_condition: Optional[Callable[[TrainProgress], bool]] = None,
        on_leak: Optional[Callable[[EpisodeSummary], None]] = None,
    ) -> None:
        self.config = config
        self.catalog = catalog if catalog is not None else load_run_catalog(
            config.catalog, config.denylist
        )
        self.backend = backend if backend is not None else get_backend(config)
        self.observer = observer if observer is not None else make_observer(config.observer)
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.stop_condition = stop_condition
        self.on_leak = on_leak

        n_slots = max(1, len(config.cores))
        self.slots = [
            _Slot(env=make_environment(self.catalog, self.backend, self.observer, config.env))
            for _ in range(n_slots)
        ]
        self.head_sizes = head_sizes_for(self.catalog)
        self.obs_dim = self.slots[0].env.obs_dim
        self.rng = np.random.default_rng(config.train.seed)
        self.params = ppo.init_params(
            self.obs_dim, self.head_sizes, config.train.hidden, self.rng
        )
        self.adam = ppo.AdamState.for_params(self.params)
        self.episodes: list[EpisodeSummary] = []
        self.total_steps = 0
        self.updates = 0
        self._writer: Optional[EpisodeWriter] = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self._writer = EpisodeWriter(self.run_dir / "episodes.jsonl")

    def make_env(self) -> Environment:
        """Fresh environment over the same catalog/backend/observer.

        Evaluation rollouts (baselines, greedy probes) must never touch
        the training slots: resetting a slot env mid-episode corrupts
        its in-flight trajectory.
        """
        return make_environment(self.catalog, self.backend, self.observer, self.config.env)

    # -- episode bookkeeping --------------------------------------------------

    def _finish_episode(self, slot: _Slot) -> None:
        lines = tuple(slot.env.seq_text().splitlines())
        summary = EpisodeSummary(
            index=len(self.episodes),
            reward=float(sum(slot.step_rewards)),
            length=len(lines),
            leak_bytes=max((int(b.get("byte_leakage", 0)) for b in slot.breakdowns), default=0),
            lines=lines,
            end_step=self.total_steps,
        )
        self.episodes.append(summary)
        if self._writer is not None:
            self._writer.write(
                EpisodeRecord(
                    timestamp=self.backend.now(),
                    index=summary.index,
                    sequence=lines,
                    step_rewards=tuple(slot.step_rewards),
                    breakdowns=tuple(slot.breakdowns),
                    trace=slot.trace,
                    counters=slot.counters,
                    exception=slot.exception,
                )
            )
        if summary.leak_bytes > 0 and self.on_leak is not None:
            self.on_leak(summary)
        slot.begin_episode()

    def _record_step(self, slot: _Slot, reward: float, info: dict) -> None:
        slot.step_rewards.append(float(reward))
        breakdown = info.get("breakdown")
        slot.breakdowns.append(breakdown.to_dict() if breakdown is not None else {})
        trace = info.get("trace")
        if trace is not None:
            slot.trace = dataclasses.asdict(trace)
        counters = info.get("counters")
        if counters is not None:
            slot.counters = {k: float(v) for k, v in counters.counts.items()}
        exc = info.get("exception")
        if exc is not None:
            slot.exception = getattr(exc, "value", str(exc))

    # -- rollout + update -----------------------------------------------------

    def collect_rollout(self) -> dict[str, np.ndarray]:
        tc = self.config.train
        n_slots = len(self.slots)
        iters = max(1, -(-tc.rollout_len // n_slots))
        buf_obs = [[] for _ in range(n_slots)]
        buf_act = [[] for _ in range(n_slots)]
        buf_lp = [[] for _ in range(n_slots)]
        buf_val = [[] for _ in range(n_slots)]
        buf_rew = [[] for _ in range(n_slots)]
        buf_done = [[] for _ in range(n_slots)]

        for _ in range(iters):
            for i, slot in enumerate(self.slots):
                indices, logprob, value = ppo.sample_action(self.params, slot.obs, self.rng)
                obs_before = slot.obs
                observation, reward, done, info = slot.env.step(Action.from_indices(indices))
                self.total_steps += 1
                self._record_step(slot, reward, info)
                buf_obs[i].append(obs_before)
                buf_act[i].append(indices)
                buf_lp[i].append(logprob)
                buf_val[i].append(value)
                buf_rew[i].append(reward)
                buf_done[i].append(1.0 if done else 0.0)
                if done:
                    self._finish_episode(slot)
                else:
                    slot.obs = observation.concat()

        adv_all, ret_all = [], []
        for i, slot in enumerate(self.slots):
            if buf_done[i][-1]:
                bootstrap = 0.0
            else:
                _, bootstrap = ppo.policy_forward(self.params, slot.obs)
                bootstrap = float(bootstrap)
            adv, ret = ppo.compute_gae(
                np.array(buf_rew[i]),
                np.array(buf_val[i]),
                np.array(buf_done[i]),
                tc.gamma,
                tc.gae_lambda,
                bootstrap_value=bootstrap,
            )
            adv_all.append(adv)
            ret_all.append(ret)

        return {
            "obs": np.concatenate([np.stack(b) for b in buf_obs]),
            "actions": np.concatenate([np.stack(b) for b in buf_act]),
            "logprobs": np.concatenate([np.array(b) for b in buf_lp]),
            "values": np.concatenate([np.array(b) for b in buf_val]),
            "rewards": np.concatenate([np.array(b) for b in buf_rew]),
            "advantages": np.concatenate(adv_all),
            "returns": np.concatenate(ret_all),
        }

    def _save_checkpoint(self, name: str) -> Optional[Path]:
        if self.run_dir is None:
            return None
        path = self.run_dir / name
        ppo.save_checkpoint(
            self.params, path, meta=checkpoint_meta(self.config, self.catalog, self.obs_dim)
        )
        return path

    def train(self, total_steps: Optional[int] = None) -> TrainResult:
        tc = self.config.train
        budget = total_steps if total_steps is not None else tc.total_steps
        started = time.monotonic()
        for slot in self.slots:
            slot.begin_episode()
        final_stats: Optional[ppo.LossStats] = None
        try:
            while self.total_steps < budget:
                rollout = self.collect_rollout()
                result = ppo.update(self.params, rollout, tc, self.rng, self.adam)
                if result.aborted:
                    log.warning(
                        "update %d aborted on non-finite loss; keeping previous params",
                        self.updates,
                    )
                else:
                    self.params = result.params
                final_stats = result.stats
                self.updates += 1
                if tc.checkpoint_interval > 0 and self.updates % tc.checkpoint_interval == 0:
                    self._save_checkpoint(f"checkpoint-{self.total_steps:08d}.ckpt")
                if self.stop_condition is not None and self.stop_condition(
                    TrainProgress(self.total_steps, self.updates, self.episodes, self.params)
                ):
                    break
        finally:
            if self._writer is not None:
                self._writer.close()
        checkpoint_path = self._save_checkpoint("checkpoint-final.ckpt")
        return TrainResult(
            params=self.params,
            episodes=tuple(self.episodes),
            total_steps=self.total_steps,
            updates=self.updates,
            elapsed=time.monotonic() - started,
            checkpoint_path=checkpoint_path,
            log_path=self.run_dir / "episodes.jsonl" if self.run_dir else None,
            final_stats=final_stats,
        )


# -- reference policies -------------------------------------------------------------


def random_policy_baseline(
    env: Environment, episodes: int, rng: np.random.Generator
) -> float:
    """Mean episode reward of uniform sampling over the action space."""
    if episodes < 1:
        raise UarchFuzzError("baseline needs at least one episode")
    highs = head_sizes_for(env.catalog)
    totals = []
    for _ in range(episodes):
        env.reset()
        total, done = 0.0, False
        while not done:
            indices = [int(rng.integers(0, h)) for h in highs]
            _, reward, done, _ = env.step(Action.from_indices(indices))
            total += reward
        totals.append(total)
    return float(np.mean(totals))


def greedy_rollout(
    params: ppo.Params, env: Environment
) -> tuple[tuple[str, ...], float, int]:
    """Deterministic argmax rollout; returns (lines, total reward, leak bytes)."""
    obs = env.reset().concat()
    total, leak, done = 0.0, 0, False
    while not done:
        indices = ppo.greedy_action(params, obs)
        observation, reward, done, info = env.step(Action.from_indices(indices))
        total += reward
        breakdown = info.get("breakdown")
        if breakdown is not None:
            leak = max(leak, int(breakdown.byte_leakage))
        obs = observation.concat()
    return tuple(env.seq_text().splitlines()), total, leak


def run_training(
    config: RunConfig,
    *,
    run_dir: Optional[str | Path] = None,
    total_steps: Optional[int] = None,
    stop_condition: Optional[Callable[[TrainProgress], bool]] = None,
    on_leak: Optional[Callable[[EpisodeSummary], None]] = None,
) -> TrainResult:
    trainer = Trainer(
        config,
        run_dir=run_dir,
        stop_condition=stop_condition,
        on_leak=on_leak,
    )
    return trainer.train(total_steps=total_steps)
