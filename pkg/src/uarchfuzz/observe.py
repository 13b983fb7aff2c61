"""Observation construction: static sequence embedding concatenated
with the normalized dynamic counter vector (static part first).

The local embedder is a seeded signed-hash bag of token n-grams; it is
deterministic and dependency-free. The remote embedder calls an
external embedding HTTP API with an on-disk cache and silently degrades
to the local embedder when the service is unreachable.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

import numpy as np

from .config import ObserverConfig
from .counters import EVENT_NAMES, CounterSample
from .errors import ConfigError

log = logging.getLogger("uarchfuzz.observe")

ABSENT_SENTINEL = -1.0


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    source: str  # "local-hash" | "remote-service"


@dataclass(frozen=True)
class Observation:
    static: EmbeddingVector
    dynamic: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.static.values, self.dynamic])

    @property
    def length(self) -> int:
        return len(self.static.values) + len(self.dynamic)


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


def _l2(values: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(values))
    return values / norm if norm > 0 else values


class LocalEmbedder:
    """Hashed bag of token n-grams (n = 1..3), signed-hash folded into
    `dim` buckets, L2-normalized. Deterministic in (text, seed)."""

    source = "local-hash"

    def __init__(self, dim: int = 256, seed: int = 0) -> None:
        if dim < 16:
            raise ConfigError(f"embedding dim must be >= 16, got {dim}")
        self.dim = dim
        self.seed = seed
        self._key = hashlib.blake2b(
            f"embed-seed-{seed}".encode(), digest_size=16
        ).digest()

    def embed(self, text: str) -> EmbeddingVector:
        values = np.zeros(self.dim, dtype=np.float64)
        tokens = text.replace(",", " ").split()
        for n in (1, 2, 3):
            for i in range(len(tokens) - n + 1):
                gram = " ".join(tokens[i : i + n])
                h = int.from_bytes(
                    hashlib.blake2b(
                        f"{n}|{gram}".encode(), key=self._key, digest_size=8
                    ).digest(),
                    "little",
                )
                sign = 1.0 if h & (1 << 63) == 0 else -1.0
                values[h % self.dim] += sign
        return EmbeddingVector(values=_l2(values), source=self.source)


class RemoteEmbedder:
    """HTTP embedding client with cache and local fallback.

    Request shape: POST {model, input} -> {embedding: [...]} (the
    `data[0].embedding` envelope is also accepted). Responses are
    truncated to `dim` and re-normalized; shorter responses are a
    configuration error. Network or auth failures degrade to the local
    embedder with a logged downgrade, never an exception.
    """

    source = "remote-service"

    def __init__(
        self,
        cfg: ObserverConfig,
        client=None,
        environ: Optional[dict] = None,
    ) -> None:
        import os

        self.cfg = cfg
        self.dim = cfg.dim
        self._client = client
        self._environ = os.environ if environ is None else environ
        self._fallback = LocalEmbedder(cfg.dim, cfg.embed_seed)
        self._cache_dir = Path(cfg.cache_dir) if cfg.cache_dir else None
        if self._cache_dir:
            self._cache_dir.mkdir(parents=True, exist_ok=True)

    def _cache_path(self, text: str) -> Optional[Path]:
        if self._cache_dir is None:
            return None
        key = hashlib.sha256(f"{self.cfg.model_id}|{text}".encode()).hexdigest()
        return self._cache_dir / f"{key}.json"

    def _request(self, text: str) -> list[float]:
        import httpx

        client = self._client
        headers = {}
        api_key = self._environ.get(self.cfg.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload = {"model": self.cfg.model_id, "input": text}
        if client is None:
            with httpx.Client(timeout=10.0) as c:
                resp = c.post(self.cfg.endpoint, json=payload, headers=headers)
        else:
            resp = client.post(self.cfg.endpoint, json=payload, headers=headers)
        resp.raise_for_status()
        data = resp.json()
        if "embedding" in data:
            return list(data["embedding"])
        return list(data["data"][0]["embedding"])

    def embed(self, text: str) -> EmbeddingVector:
        if not text.strip():
            return EmbeddingVector(
                values=np.zeros(self.dim, dtype=np.float64), source=self.source
            )
        cache = self._cache_path(text)
        if cache is not None and cache.exists():
            values = np.asarray(json.loads(cache.read_text()), dtype=np.float64)
            return EmbeddingVector(values=values, source=self.source)
        try:
            raw = self._request(text)
        except Exception as exc:  # noqa: BLE001 - degrade on any transport error
            log.warning("remote embedding failed (%s); using local embedder", exc)
            return self._fallback.embed(text)
        if len(raw) < self.dim:
            raise ConfigError(
                f"remote embedding has dimension {len(raw)} < configured {self.dim}"
            )
        values = _l2(np.asarray(raw[: self.dim], dtype=np.float64))
        if cache is not None:
            cache.write_text(json.dumps(values.tolist()))
        return EmbeddingVector(values=values, source=self.source)


def embed_local(seq_text: str, dim: int = 256, seed: int = 0) -> EmbeddingVector:
    return LocalEmbedder(dim, seed).embed(seq_text)


def normalize_counters(
    sample: Optional[CounterSample],
    events: Sequence[str],
    scales: Optional[dict] = None,
    default_scale: float = 1.0 / math.log1p(1e6),
) -> np.ndarray:
    """log1p-compressed counts, one entry per event in the given order;
    events absent from the sample read as the -1 sentinel."""
    out = np.zeros(len(events), dtype=np.float64)
    scales = scales or {}
    for i, name in enumerate(events):
        value = sample.get(name) if sample is not None else None
        if value is None:
            out[i] = ABSENT_SENTINEL
        else:
            out[i] = math.log1p(value) * scales.get(name, default_scale)
    return out


class Observer:
    """Builds observations with a constant layout for a whole run."""

    def __init__(
        self,
        embedder: Embedder,
        events: Sequence[str] = EVENT_NAMES,
        dynamic_gain: float = 1.0,
        scales: Optional[dict] = None,
        default_scale: float = 1.0 / math.log1p(1e6),
    ) -> None:
        self.embedder = embedder
        self.events = tuple(events)
        self.dynamic_gain = dynamic_gain
        self.scales = dict(scales or {})
        self.default_scale = default_scale

    @property
    def obs_dim(self) -> int:
        return self.embedder.dim + len(self.events)

    def observe(self, seq_text: str, sample: Optional[CounterSample]) -> Observation:
        static = self.embedder.embed(seq_text)
        if sample is None:
            # Nothing executed yet: zero counters, not absence sentinels.
            dynamic = np.zeros(len(self.events), dtype=np.float64)
        else:
            dynamic = self.dynamic_gain * normalize_counters(
                sample, self.events, self.scales, self.default_scale
            )
        return Observation(static=static, dynamic=dynamic)


def make_observer(cfg: ObserverConfig, events: Sequence[str] = EVENT_NAMES) -> Observer:
    if cfg.embedder == "remote":
        embedder: Embedder = RemoteEmbedder(cfg)
    else:
        embedder = LocalEmbedder(cfg.dim, cfg.embed_seed)
    return Observer(
        embedder,
        events=events,
        dynamic_gain=cfg.dynamic_gain,
        scales=dict(cfg.counter_scales),
        default_scale=cfg.counter_scale,
    )
