"""Actor-critic training of ABR policies and the per-condition model zoo.

Training is A3C in structure: several workers collect rollouts in parallel
against a per-iteration snapshot of the shared parameters and compute
gradients locally; application is serialized through one Adam pair, so runs
are reproducible (bit-identical at any worker count, required at 1).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .clustering import GENERAL, UNCERTAIN, ConditionLabel
from .policies import (
    GreedyPolicy,
    Observation,
    PolicyModel,
    SamplingPolicy,
    actor_logits,
    critic_values,
)
from .simulator import QoEParams, VideoManifest, run_episode
from .traces import ResampledTrace


class TrainingError(ValueError):
    pass


class EmptyRollout(TrainingError):
    pass


class NoTraces(TrainingError):
    pass


class ZooMissingEntry(KeyError):
    pass


@dataclass
class TrainConfig:
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    entropy_weight: float = 0.5
    workers: int = 16
    gamma: float = 0.99
    episodes: int = 400  # total rollouts per model
    seed: int = 0
    eval_every: int = 10  # iterations between validation passes
    eval_episodes: int = 4
    conv_channels: int = 128
    hidden: int = 128
    # Optional per-rollout advantage standardization before the policy
    # gradient; off by default (raw advantage scale trains better here).
    normalize_advantages: bool = False

    def __post_init__(self):
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise TrainingError("learning rates must be > 0")
        if self.entropy_weight < 0:
            raise TrainingError("entropy weight must be >= 0")
        if not 0 < self.gamma <= 1:
            raise TrainingError("gamma must lie in (0, 1]")
        if self.workers < 1:
            raise TrainingError("need at least one worker")


@dataclass
class Rollout:
    """One episode's (observation, action, reward, value estimate) sequence."""

    observations: list[Observation]
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray

    def __len__(self):
        return len(self.actions)


def collect_rollout(
    model: PolicyModel,
    manifest: VideoManifest,
    trace: ResampledTrace,
    qoe_params: QoEParams,
    rng: np.random.Generator,
) -> Rollout:
    """Run one stochastic episode and attach batched critic value estimates."""
    observations: list[Observation] = []
    base = SamplingPolicy(model, rng)

    def recording_policy(obs):
        observations.append(obs)
        return base(obs)

    log = run_episode(manifest, trace, recording_policy, qoe_params)
    rewards = np.array([c.qoe for c in log.chunks])
    actions = np.array([c.bitrate_index for c in log.chunks], dtype=np.int64)
    with nn.no_grad():
        values = critic_values(model, observations).data[:, 0].copy()
    return Rollout(observations, actions, rewards, values)


def compute_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    """Discounted suffix sums to episode end."""
    if len(rewards) == 0:
        raise EmptyRollout("no rewards")
    out = np.empty_like(np.asarray(rewards, dtype=np.float64))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def compute_advantages(rollout: Rollout, gamma: float) -> np.ndarray:
    """A_t = (discounted return to end) - V(s_t)."""
    if len(rollout) == 0:
        raise EmptyRollout("empty rollout")
    return compute_returns(rollout.rewards, gamma) - rollout.values


def a3c_losses(
    model: PolicyModel,
    rollout: Rollout,
    advantages: np.ndarray,
    entropy_weight: float,
    gamma: float,
):
    """Actor and critic losses for one rollout.

    actor = -sum(log pi(a_t) * A_t) - beta * sum(entropy); advantages enter
    as constants.  critic = sum((R_t - V)^2).  Returned separately so each
    network trains under its own learning rate.
    """
    if len(advantages) != len(rollout):
        raise nn.ShapeMismatch("advantages do not match rollout length")
    returns = compute_returns(rollout.rewards, gamma)

    logits = actor_logits(model, rollout.observations)
    logp = nn.log_softmax(logits)
    picked = nn.gather_rows(logp, rollout.actions)
    pg_term = nn.tsum(nn.mul(picked, nn.Tensor(advantages)))
    probs = nn.softmax(logits)
    entropy = -nn.tsum(nn.mul(probs, logp))
    actor_loss = nn.add(nn.mul(pg_term, -1.0), nn.mul(entropy, -entropy_weight))

    values = critic_values(model, rollout.observations)
    err = nn.add(nn.Tensor(returns[:, None]), nn.mul(values, -1.0))
    critic_loss = nn.tsum(nn.square(err))

    stats = {
        "mean_reward": float(rollout.rewards.mean()),
        "mean_entropy": float(entropy.item() / len(rollout)),
        "actor_loss": float(actor_loss.item()),
        "critic_loss": float(critic_loss.item()),
    }
    return actor_loss, critic_loss, stats


def _worker_gradients(snapshot, config, manifests, traces, qoe_params, seed_key):
    """Rollout + gradients against a private copy of the snapshot params."""
    local = PolicyModel(
        n_rates=len(manifests[0].ladder_kbps),
        seed=config.seed,
        conv_channels=config.conv_channels,
        hidden=config.hidden,
    )
    local.load_state_dict(snapshot)
    rng = np.random.default_rng(seed_key)
    trace = traces[rng.integers(len(traces))]
    manifest = manifests[rng.integers(len(manifests))]
    rollout = collect_rollout(local, manifest, trace, qoe_params, rng)
    advantages = compute_advantages(rollout, config.gamma)
    if config.normalize_advantages:
        advantages = (advantages - advantages.mean()) / max(advantages.std(), 1e-8)
    actor_loss, critic_loss, stats = a3c_losses(local, rollout, advantages, config.entropy_weight, config.gamma)
    nn.backward(actor_loss)
    nn.backward(critic_loss)
    actor_grads = {k: p.grad.copy() for k, p in local.actor.parameters().items()}
    critic_grads = {k: p.grad.copy() for k, p in local.critic.parameters().items()}
    return actor_grads, critic_grads, stats


def evaluate_policy(model: PolicyModel, manifests, traces, qoe_params) -> float:
    """Mean per-chunk QoE of the greedy policy over all (trace, manifest) pairs."""
    policy = GreedyPolicy(model)
    qoes = []
    for trace in traces:
        for manifest in manifests:
            log = run_episode(manifest, trace, policy, qoe_params)
            qoes.extend(c.qoe for c in log.chunks)
    return float(np.mean(qoes))


def train_model(
    config: TrainConfig,
    traces: list[ResampledTrace],
    manifests: list[VideoManifest] | VideoManifest,
    qoe_params: QoEParams = QoEParams(),
    log: list | None = None,
) -> PolicyModel:
    """Train one policy on a trace subset; returns the best-validation model.

    With 0 episodes the freshly initialized model is returned unchanged.
    Validation uses a held-out 20% slice when the subset has >= 5 traces,
    otherwise the training traces themselves.
    """
    if not traces:
        raise NoTraces("cannot train on an empty trace subset")
    if isinstance(manifests, VideoManifest):
        manifests = [manifests]

    model = PolicyModel(
        n_rates=len(manifests[0].ladder_kbps),
        seed=config.seed,
        conv_channels=config.conv_channels,
        hidden=config.hidden,
    )
    if config.episodes <= 0:
        return model

    split_rng = np.random.default_rng([config.seed, 0xE7A1])
    if len(traces) >= 5:
        order = split_rng.permutation(len(traces))
        n_val = max(1, len(traces) // 5)
        val_traces = [traces[i] for i in order[:n_val]]
        train_traces = [traces[i] for i in order[n_val:]]
    else:
        train_traces = list(traces)
        val_traces = list(traces)
    val_traces = val_traces[: config.eval_episodes]

    opt_actor = nn.Adam(model.actor.parameters(), lr=config.actor_lr)
    opt_critic = nn.Adam(model.critic.parameters(), lr=config.critic_lr)

    best_state = model.state_dict()
    best_qoe = evaluate_policy(model, manifests, val_traces, qoe_params)

    iterations = max(1, config.episodes // config.workers)
    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    try:
        for it in range(iterations):
            snapshot = model.state_dict()
            jobs = [
                (snapshot, config, manifests, train_traces, qoe_params, [config.seed, it, w])
                for w in range(config.workers)
            ]
            if pool is not None:
                results = list(pool.map(lambda args: _worker_gradients(*args), jobs))
            else:
                results = [_worker_gradients(*job) for job in jobs]

            stats_acc = []
            for actor_grads, critic_grads, stats in results:  # serialized application
                for k, p in model.actor.parameters().items():
                    p.grad[...] = actor_grads[k]
                opt_actor.step()
                for k, p in model.critic.parameters().items():
                    p.grad[...] = critic_grads[k]
                opt_critic.step()
                stats_acc.append(stats)

            record = {
                "iteration": it,
                "mean_reward": float(np.mean([s["mean_reward"] for s in stats_acc])),
                "mean_entropy": float(np.mean([s["mean_entropy"] for s in stats_acc])),
                "actor_loss": float(np.mean([s["actor_loss"] for s in stats_acc])),
                "critic_loss": float(np.mean([s["critic_loss"] for s in stats_acc])),
            }
            if it % config.eval_every == config.eval_every - 1 or it == iterations - 1:
                qoe = evaluate_policy(model, manifests, val_traces, qoe_params)
                record["val_qoe"] = qoe
                if qoe > best_qoe:
                    best_qoe = qoe
                    best_state = model.state_dict()
            if log is not None:
                log.append(record)
    finally:
        if pool is not None:
            pool.shutdown()

    model.load_state_dict(best_state)
    return model


@dataclass
class ZooEntry:
    label_key: str
    model: PolicyModel | None
    fallback: bool  # resolves to the general model
    path: str = ""


@dataclass
class ModelZoo:
    """Per-condition policies plus the General and Uncertain models."""

    entries: dict[str, ZooEntry] = field(default_factory=dict)

    def resolve(self, label: ConditionLabel) -> PolicyModel:
        entry = self.entries.get(label.key)
        if entry is None or entry.fallback or entry.model is None:
            general = self.entries.get(GENERAL.key)
            if general is None or general.model is None:
                raise ZooMissingEntry(f"no model for {label.key!r} and no general fallback")
            return general.model
        return entry.model

    @property
    def labels(self) -> list[str]:
        return sorted(self.entries)


def train_zoo(
    config: TrainConfig,
    labeled_traces: list[tuple[ResampledTrace, ConditionLabel]],
    k: int,
    manifests: list[VideoManifest] | VideoManifest,
    qoe_params: QoEParams = QoEParams(),
    log: list | None = None,
) -> ModelZoo:
    """Train k cluster models plus General and Uncertain.

    Labels with no traces fall back to General and are flagged as such in
    the zoo index.
    """
    if not labeled_traces:
        raise NoTraces("empty labeled corpus")
    if isinstance(manifests, VideoManifest):
        manifests = [manifests]

    by_label: dict[str, list[ResampledTrace]] = {}
    for trace, label in labeled_traces:
        by_label.setdefault(label.key, []).append(trace)
    all_traces = [t for t, _ in labeled_traces]

    zoo = ModelZoo()
    wanted = [GENERAL] + [ConditionLabel.cluster(i) for i in range(k)] + [UNCERTAIN]
    for offset, label in enumerate(wanted):
        subset = all_traces if label == GENERAL else by_label.get(label.key, [])
        if not subset:
            zoo.entries[label.key] = ZooEntry(label.key, None, fallback=True)
            continue
        sub_config = TrainConfig(**{**config.__dict__, "seed": config.seed + 1000 * offset})
        sub_log: list = []
        model = train_model(sub_config, subset, manifests, qoe_params, log=sub_log)
        if log is not None:
            log.extend({**rec, "label": label.key} for rec in sub_log)
        zoo.entries[label.key] = ZooEntry(label.key, model, fallback=False)
    return zoo


def save_zoo(zoo: ModelZoo, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for key, entry in sorted(zoo.entries.items()):
        if entry.fallback or entry.model is None:
            index[key] = {"path": None, "fallback": True}
            continue
        path = directory / f"{key}.ckpt"
        nn.save_params(path, entry.model.state_dict(), meta=entry.model.meta())
        index[key] = {"path": path.name, "fallback": False}
    (directory / "zoo.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_zoo(directory: str | Path) -> ModelZoo:
    directory = Path(directory)
    index = json.loads((directory / "zoo.json").read_text())
    zoo = ModelZoo()
    for key, rec in index.items():
        if rec["fallback"]:
            zoo.entries[key] = ZooEntry(key, None, fallback=True)
            continue
        state, meta = nn.load_params(directory / rec["path"])
        model = PolicyModel.from_meta(meta)
        model.load_state_dict(state)
        zoo.entries[key] = ZooEntry(key, model, fallback=False, path=rec["path"])
    return zoo
