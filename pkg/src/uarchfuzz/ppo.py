"""From-scratch PPO over a factorized discrete action space.

The policy is a shared two-layer tanh trunk with nine independent
categorical heads (set, instruction, seven operand slots) and a linear
value head. Everything is numpy with hand-written gradients, which
keeps the dependency surface tiny and makes the analytic gradient
directly checkable against finite differences.

Surplus operand heads (slots beyond the chosen instruction's arity) are
still sampled and still contribute to logprob and entropy; the decoder
simply ignores their indices. This keeps the factorization fixed-shape.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .errors import CheckpointError, ContractViolation

Params = dict[str, np.ndarray]

CHECKPOINT_MAGIC = b"UAFZCKPT"
CHECKPOINT_VERSION = 1


# --- parameters ---------------------------------------------------------------


def init_params(
    obs_dim: int, head_sizes: Sequence[int], hidden: int, rng: np.random.Generator
) -> Params:
    def dense(n_in: int, n_out: int, scale: float) -> np.ndarray:
        return rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out))

    params: Params = {
        "w1": dense(obs_dim, hidden, np.sqrt(2.0)),
        "b1": np.zeros(hidden),
        "w2": dense(hidden, hidden, np.sqrt(2.0)),
        "b2": np.zeros(hidden),
        "vw": dense(hidden, 1, 1.0),
        "vb": np.zeros(1),
    }
    for h, size in enumerate(head_sizes):
        # Near-uniform initial policies help early exploration.
        params[f"head_w{h}"] = dense(hidden, size, 0.01)
        params[f"head_b{h}"] = np.zeros(size)
    return params


def head_sizes_of(params: Params) -> tuple[int, ...]:
    sizes = []
    h = 0
    while f"head_b{h}" in params:
        sizes.append(len(params[f"head_b{h}"]))
        h += 1
    return tuple(sizes)


def flatten_params(params: Params) -> tuple[np.ndarray, list[tuple[str, tuple[int, ...]]]]:
    spec = [(name, params[name].shape) for name in sorted(params)]
    flat = np.concatenate([params[name].ravel() for name, _ in spec])
    return flat, spec


def unflatten_params(flat: np.ndarray, spec: Sequence[tuple[str, tuple[int, ...]]]) -> Params:
    params: Params = {}
    offset = 0
    for name, shape in spec:
        size = int(np.prod(shape)) if shape else 1
        params[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != len(flat):
        raise CheckpointError("parameter payload size mismatch")
    return params


# --- forward pass ---------------------------------------------------------------


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward(params: Params, obs: np.ndarray):
    h1 = np.tanh(obs @ params["w1"] + params["b1"])
    h2 = np.tanh(h1 @ params["w2"] + params["b2"])
    n_heads = len(head_sizes_of(params))
    logps = [
        _log_softmax(h2 @ params[f"head_w{h}"] + params[f"head_b{h}"])
        for h in range(n_heads)
    ]
    values = (h2 @ params["vw"] + params["vb"]).ravel()
    return h1, h2, logps, values


def policy_forward(params: Params, obs: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-head probability vectors and state values for a batch (or a
    single observation, which is promoted to a batch of one)."""
    single = obs.ndim == 1
    batch = obs[None, :] if single else obs
    expected = params["w1"].shape[0]
    if batch.shape[1] != expected:
        raise ContractViolation(
            f"observation length {batch.shape[1]} does not match network input {expected}"
        )
    _, _, logps, values = _forward(params, batch)
    probs = [np.exp(lp) for lp in logps]
    if single:
        return [p[0] for p in probs], values[0]
    return probs, values


def sample_action(
    params: Params, obs: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float, float]:
    """Sample one index per head; returns (indices, joint logprob, value)."""
    probs, value = policy_forward(params, obs)
    indices = np.empty(len(probs), dtype=np.int64)
    logprob = 0.0
    for h, p in enumerate(probs):
        idx = int(rng.choice(len(p), p=p / p.sum()))
        indices[h] = idx
        logprob += float(np.log(max(p[idx], 1e-300)))
    return indices, logprob, float(value)


def greedy_action(params: Params, obs: np.ndarray) -> np.ndarray:
    probs, _ = policy_forward(params, obs)
    return np.array([int(np.argmax(p)) for p in probs], dtype=np.int64)


def action_logprob(params: Params, obs: np.ndarray, indices: np.ndarray) -> float:
    _, _, logps, _ = _forward(params, obs[None, :])
    return float(sum(lp[0, int(indices[h])] for h, lp in enumerate(logps)))


# --- GAE ------------------------------------------------------------------------


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    dones: np.ndarray,
    gamma: float,
    lam: float,
    bootstrap_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Standard generalized advantage estimation over one rollout stream."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not len(rewards) == len(values) == len(dones):
        raise ContractViolation("rewards, values and dones must have equal length")
    T = len(rewards)
    adv = np.zeros(T)
    last = 0.0
    next_value = bootstrap_value
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = values[t]
    return adv, adv + values


# --- loss and gradient ------------------------------------------------------------


@dataclass(frozen=True)
class LossStats:
    loss: float
    policy_loss: float
    value_loss: float
    entropy: float
    clip_fraction: float
    approx_kl: float


def ppo_loss_and_grad(
    params: Params,
    obs: np.ndarray,
    actions: np.ndarray,
    old_logprob: np.ndarray,
    advantages: np.ndarray,
    returns: np.ndarray,
    cfg: TrainConfig,
) -> tuple[float, Params, LossStats]:
    """Clipped-surrogate loss and its analytic gradient.

    loss = -E[min(r A, clip(r, 1-eps, 1+eps) A)] + c_v E[(V - R)^2]
           - c_ent E[sum_h H_h],  r = exp(logp_new - logp_old).
    """
    B = obs.shape[0]
    h1, h2, logps, values = _forward(params, obs)
    n_heads = len(logps)
    rows = np.arange(B)

    lp_new = np.zeros(B)
    for h in range(n_heads):
        lp_new += logps[h][rows, actions[:, h]]
    ratio = np.exp(lp_new - old_logprob)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * advantages
    surrogate = np.minimum(unclipped, clipped)
    policy_loss = -surrogate.mean()

    value_err = values - returns
    value_loss = float((value_err**2).mean())

    probs = [np.exp(lp) for lp in logps]
    head_entropies = [-(p * lp).sum(axis=1) for p, lp in zip(probs, logps)]
    entropy = float(np.mean(np.sum(head_entropies, axis=0)))

    loss = float(policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy)

    # Backward. The min() picks the unclipped branch wherever
    # unclipped <= clipped; only that branch depends on the logprob.
    active = (unclipped <= clipped).astype(np.float64)
    dlp = -(advantages * ratio * active) / B

    grads: Params = {name: np.zeros_like(arr) for name, arr in params.items()}
    dh2 = np.zeros_like(h2)

    dv = (2.0 * cfg.value_coef / B) * value_err
    grads["vw"] = h2.T @ dv[:, None]
    grads["vb"] = np.array([dv.sum()])
    dh2 += dv[:, None] @ params["vw"].T

    for h in range(n_heads):
        p, lp = probs[h], logps[h]
        onehot = np.zeros_like(p)
        onehot[rows, actions[:, h]] = 1.0
        dlogits = dlp[:, None] * (onehot - p)
        dlogits += (cfg.entropy_coef / B) * p * (lp + head_entropies[h][:, None])
        grads[f"head_w{h}"] = h2.T @ dlogits
        grads[f"head_b{h}"] = dlogits.sum(axis=0)
        dh2 += dlogits @ params[f"head_w{h}"].T

    dz2 = dh2 * (1.0 - h2**2)
    grads["w2"] = h1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    dh1 = dz2 @ params["w2"].T
    dz1 = dh1 * (1.0 - h1**2)
    grads["w1"] = obs.T @ dz1
    grads["b1"] = dz1.sum(axis=0)

    stats = LossStats(
        loss=loss,
        policy_loss=float(policy_loss),
        value_loss=value_loss,
        entropy=entropy,
        clip_fraction=float((np.abs(ratio - 1.0) > cfg.clip_eps).mean()),
        approx_kl=float((old_logprob - lp_new).mean()),
    )
    return loss, grads, stats


# --- optimizer --------------------------------------------------------------------


@dataclass
class AdamState:
    m: Params
    v: Params
    t: int = 0

    @classmethod
    def for_params(cls, params: Params) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def clip_grad_norm(grads: Params, max_norm: float) -> Params:
    if max_norm <= 0:
        return grads
    total = float(np.sqrt(sum(float((g**2).sum()) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def adam_step(
    params: Params,
    grads: Params,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Params:
    state.t += 1
    out: Params = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = state.m[k] / (1 - beta1**state.t)
        vhat = state.v[k] / (1 - beta2**state.t)
        out[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out


@dataclass(frozen=True)
class UpdateResult:
    params: Params
    stats: LossStats
    aborted: bool = False


def update(
    params: Params,
    rollout: Mapping[str, np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
    adam: AdamState,
) -> UpdateResult:
    """Epochs of shuffled minibatch steps over one collected rollout.

    Advantages are normalized per rollout. A non-finite loss aborts the
    whole update and keeps the previous parameters.
    """
    obs = rollout["obs"]
    actions = rollout["actions"].astype(np.int64)
    old_logprob = rollout["logprobs"]
    advantages = rollout["advantages"]
    returns = rollout["returns"]

    adv_std = advantages.std()
    norm_adv = (advantages - advantages.mean()) / (adv_std + 1e-8)

    B = len(obs)
    last_stats: Optional[LossStats] = None
    for _ in range(cfg.epochs):
        perm = rng.permutation(B)
        for start in range(0, B, cfg.minibatch_size):
            idx = perm[start : start + cfg.minibatch_size]
            loss, grads, stats = ppo_loss_and_grad(
                params,
                obs[idx],
                actions[idx],
                old_logprob[idx],
                norm_adv[idx],
                returns[idx],
                cfg,
            )
            if not np.isfinite(loss):
                return UpdateResult(params=params, stats=stats, aborted=True)
            grads = clip_grad_norm(grads, cfg.max_grad_norm)
            params = adam_step(params, grads, adam, cfg.learning_rate)
            last_stats = stats
    assert last_stats is not None
    return UpdateResult(params=params, stats=last_stats)


# --- checkpointing -----------------------------------------------------------------


def save_checkpoint(params: Params, path: str | Path, meta: Optional[dict] = None) -> str:
    """Versioned binary checkpoint; returns the payload digest.

    Layout: magic, u32 header length, JSON header (version, array specs,
    metadata, payload digest), then the float64 little-endian payload.
    The write is atomic (temp file + rename), so a crash never leaves a
    half-written checkpoint behind.
    """
    flat, spec = flatten_params(params)
    payload = flat.astype("<f8").tobytes()
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "version": CHECKPOINT_VERSION,
        "arrays": [[name, list(shape)] for name, shape in spec],
        "meta": meta or {},
        "payload_sha256": digest,
        "payload_bytes": len(payload),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(header_bytes).to_bytes(4, "little"))
        f.write(header_bytes)
        f.write(payload)
    os.replace(tmp, path)
    return digest


def load_checkpoint(
    path: str | Path, expected_meta: Optional[dict] = None
) -> tuple[Params, dict]:
    """Load and verify; any integrity or compatibility problem refuses
    the whole file rather than partially loading."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(blob[off : off + 4], "little")
    off += 4
    try:
        header = json.loads(blob[off : off + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    off += header_len
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')}"
        )
    payload = blob[off:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header says {header['payload_bytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (corrupted file)")
    meta = header.get("meta", {})
    if expected_meta:
        for key, want in expected_meta.items():
            got = meta.get(key)
            if _canon_meta(got) != _canon_meta(want):
                raise CheckpointError(
                    f"{path}: checkpoint {key} is {got!r}, this run needs {want!r}"
                )
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    spec = [(name, tuple(shape)) for name, shape in header["arrays"]]
    return unflatten_params(flat, spec), meta


def _canon_meta(value):
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return value
