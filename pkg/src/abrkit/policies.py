"""ABR policies: rule baselines and the actor-critic policy network.

A policy is any callable mapping an :class:`Observation` to a ladder index.
The learned policy follows the compact two-headed layout used throughout the
evaluation: one kernel-4 conv over each 8-step history, scalar features
through small FC layers, a 128-wide merge, then a softmax head (actor) or a
scalar head (critic).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import Tensor

HISTORY_LEN = 8
# Normalization scales: ladder-top throughput (Mbit/s), a slow-chunk download
# time (s), and the buffer cap (s).  Components are clipped to [-5, 5].
THROUGHPUT_SCALE_MBPS = 2.64
DOWNLOAD_TIME_SCALE_S = 10.0
BUFFER_SCALE_S = 60.0
FEATURE_CLIP = 5.0


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    """Raw player/network state for one bitrate decision."""

    throughput_hist: np.ndarray  # (8,) Mbit/s, oldest first, zero-padded
    download_hist: np.ndarray  # (8,) seconds, oldest first, zero-padded
    next_sizes: np.ndarray  # (n_rates,) bits for the upcoming chunk
    buffer: float  # seconds of video buffered
    last_bitrate_index: int
    chunks_remaining: int
    total_chunks: int
    max_chunk_size: float  # bits; manifest-wide maximum
    ladder_kbps: tuple[int, ...]

    def features(self) -> dict[str, np.ndarray]:
        """Normalized network inputs, every component clipped to [-5, 5]."""
        clip = lambda a: np.clip(a, -FEATURE_CLIP, FEATURE_CLIP)
        ladder = np.array(self.ladder_kbps, dtype=np.float64)
        return {
            "throughput": clip(np.asarray(self.throughput_hist, dtype=np.float64) / THROUGHPUT_SCALE_MBPS),
            "download": clip(np.asarray(self.download_hist, dtype=np.float64) / DOWNLOAD_TIME_SCALE_S),
            "sizes": clip(np.asarray(self.next_sizes, dtype=np.float64) / self.max_chunk_size),
            "scalars": clip(
                np.array(
                    [
                        self.buffer / BUFFER_SCALE_S,
                        ladder[self.last_bitrate_index] / ladder[-1],
                        self.chunks_remaining / max(self.total_chunks, 1),
                    ]
                )
            ),
        }


def stack_features(observations: list[Observation]) -> dict[str, np.ndarray]:
    feats = [o.features() for o in observations]
    return {k: np.stack([f[k] for f in feats]) for k in feats[0]}


# ---------------------------------------------------------------------------
# rule baselines


class FixedPolicy:
    """Always request the same ladder index."""

    def __init__(self, index: int, n_rates: int = 5):
        if not 0 <= index < n_rates:
            raise PolicyError(f"fixed index {index} outside ladder of {n_rates}")
        self.index = index

    def __call__(self, obs: Observation) -> int:
        return self.index


class RateBasedPolicy:
    """Harmonic-mean throughput estimator over the last 5 nonzero samples;
    picks the largest ladder rate at or below the estimate."""

    window = 5

    def __call__(self, obs: Observation) -> int:
        recent = [v for v in obs.throughput_hist if v > 0][-self.window :]
        if not recent:
            return 0
        estimate = len(recent) / sum(1.0 / v for v in recent)
        ladder_mbps = [kbps / 1000.0 for kbps in obs.ladder_kbps]
        best = 0
        for i, rate in enumerate(ladder_mbps):
            if rate <= estimate:
                best = i
        return best


class BufferBasedPolicy:
    """Linear buffer-to-ladder map: reservoir 5 s, cushion up to 35 s."""

    reservoir = 5.0
    cushion = 30.0

    def __call__(self, obs: Observation) -> int:
        n = len(obs.ladder_kbps)
        if obs.buffer <= self.reservoir:
            return 0
        if obs.buffer >= self.reservoir + self.cushion:
            return n - 1
        frac = (obs.buffer - self.reservoir) / self.cushion
        return min(int(frac * (n - 1)), n - 1)


# ---------------------------------------------------------------------------
# actor-critic networks


class _DecisionNet(nn.Module):
    """Shared trunk: conv over each history, FCs on scalars, 128-wide merge."""

    def __init__(self, rng: np.random.Generator, n_rates: int, conv_channels: int, hidden: int, head_dim: int, head_scale: float):
        super().__init__()
        k = 4  # history conv kernel (valid padding, so even K is fine)
        self.conv_thr = nn.Conv1d(1, conv_channels, k, rng, padding="valid")
        self.conv_dl = nn.Conv1d(1, conv_channels, k, rng, padding="valid")
        self.conv_sz = nn.Conv1d(1, conv_channels, k, rng, padding="valid")
        self.fc_buffer = nn.Linear(1, hidden, rng)
        self.fc_last = nn.Linear(1, hidden, rng)
        self.fc_remaining = nn.Linear(1, hidden, rng)
        conv_out = conv_channels * (HISTORY_LEN - k + 1) * 2 + conv_channels * (n_rates - k + 1)
        self.merge = nn.Linear(conv_out + 3 * hidden, hidden, rng)
        self.head = nn.Linear(hidden, head_dim, rng, w_scale=head_scale)

    def __call__(self, feats: dict[str, np.ndarray]) -> Tensor:
        n = feats["throughput"].shape[0]

        def conv_branch(conv, arr):
            x = Tensor(arr[:, None, :])  # (N, 1, L)
            y = nn.relu(conv(x))
            return nn.reshape(y, (n, y.shape[1] * y.shape[2]))

        def scalar_branch(fc, col):
            return nn.relu(fc(Tensor(col[:, None])))

        parts = [
            conv_branch(self.conv_thr, feats["throughput"]),
            conv_branch(self.conv_dl, feats["download"]),
            conv_branch(self.conv_sz, feats["sizes"]),
            scalar_branch(self.fc_buffer, feats["scalars"][:, 0]),
            scalar_branch(self.fc_last, feats["scalars"][:, 1]),
            scalar_branch(self.fc_remaining, feats["scalars"][:, 2]),
        ]
        merged = nn.relu(self.merge(nn.concat(parts, axis=1)))
        return self.head(merged)


class PolicyModel:
    """Actor (softmax over the ladder) and critic (scalar value) pair."""

    def __init__(self, n_rates: int = 5, seed: int = 0, conv_channels: int = 128, hidden: int = 128):
        self.n_rates = n_rates
        self.seed = seed
        self.conv_channels = conv_channels
        self.hidden = hidden
        rng = np.random.default_rng([seed, 0])
        # Small head init keeps the fresh actor near-uniform.
        self.actor = _DecisionNet(rng, n_rates, conv_channels, hidden, head_dim=n_rates, head_scale=0.01)
        rng_c = np.random.default_rng([seed, 1])
        self.critic = _DecisionNet(rng_c, n_rates, conv_channels, hidden, head_dim=1, head_scale=0.01)

    def set_training(self, flag: bool) -> None:
        self.actor.set_training(flag)
        self.critic.set_training(flag)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"actor.{k}": v for k, v in self.actor.state_dict().items()}
        state.update({f"critic.{k}": v for k, v in self.critic.state_dict().items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.actor.load_state_dict({k[len("actor.") :]: v for k, v in state.items() if k.startswith("actor.")})
        self.critic.load_state_dict({k[len("critic.") :]: v for k, v in state.items() if k.startswith("critic.")})

    def clone(self) -> "PolicyModel":
        other = PolicyModel(self.n_rates, self.seed, self.conv_channels, self.hidden)
        other.load_state_dict(self.state_dict())
        return other

    def meta(self) -> dict:
        return {
            "n_rates": self.n_rates,
            "seed": self.seed,
            "conv_channels": self.conv_channels,
            "hidden": self.hidden,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "PolicyModel":
        return cls(
            n_rates=meta["n_rates"],
            seed=meta["seed"],
            conv_channels=meta["conv_channels"],
            hidden=meta["hidden"],
        )


def actor_logits(model: PolicyModel, observations: list[Observation]) -> Tensor:
    return model.actor(stack_features(observations))


def actor_forward(model: PolicyModel, obs: Observation) -> np.ndarray:
    """Action distribution over the ladder for one observation."""
    with nn.no_grad():
        probs = nn.softmax(actor_logits(model, [obs])).data[0]
    return probs


def critic_forward(model: PolicyModel, obs: Observation) -> float:
    with nn.no_grad():
        value = model.critic(stack_features([obs])).data[0, 0]
    return float(value)


def critic_values(model: PolicyModel, observations: list[Observation]) -> Tensor:
    return model.critic(stack_features(observations))


def greedy_action(model: PolicyModel, obs: Observation) -> int:
    """Argmax action; ties resolve to the lowest ladder index."""
    return int(np.argmax(actor_forward(model, obs)))


def sample_action(model: PolicyModel, obs: Observation, rng: np.random.Generator) -> int:
    probs = actor_forward(model, obs)
    return int(rng.choice(len(probs), p=probs / probs.sum()))


class GreedyPolicy:
    """Evaluation-time wrapper: deterministic argmax of the actor."""

    def __init__(self, model: PolicyModel):
        self.model = model

    def __call__(self, obs: Observation) -> int:
        return greedy_action(self.model, obs)


class SamplingPolicy:
    """Training-time wrapper: draws from the actor distribution."""

    def __init__(self, model: PolicyModel, rng: np.random.Generator):
        self.model = model
        self.rng = rng

    def __call__(self, obs: Observation) -> int:
        return sample_action(self.model, obs, self.rng)
