"""Deterministic chunk-level HTTP adaptive streaming simulator.

Download timing integrates a 1 Hz throughput trace (wrapping at its end),
buffer dynamics follow the standard download-blocks-playback model with a
capped buffer and sleep, and every chunk is scored with the linear QoE form:
bitrate utility (Mbit/s) - rebuffer penalty - bitrate-change penalty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .traces import ResampledTrace

DEFAULT_LADDER_KBPS = (135, 340, 835, 1350, 2640)
DEFAULT_CHUNK_SECONDS = 4.0
BUFFER_CAP_SECONDS = 60.0
RTT_SECONDS = 0.08
ZERO_BANDWIDTH_LIMIT_SECONDS = 120.0


class SimulatorError(ValueError):
    pass


class InvalidJitter(SimulatorError):
    pass


class EpisodeFinished(SimulatorError):
    pass


class ZeroBandwidthStall(SimulatorError):
    pass


@dataclass(frozen=True)
class QoEParams:
    """Linear per-chunk QoE: utility_Mbps - mu*rebuffer_s - |rate change|."""

    rebuffer_penalty: float = 2.64
    smoothness_penalty: float = 1.0

    def __post_init__(self):
        if self.rebuffer_penalty < 0 or self.smoothness_penalty < 0:
            raise SimulatorError("QoE penalties must be >= 0")


@dataclass(frozen=True)
class VideoManifest:
    """Chunk sizes (bits) for every chunk and ladder rate."""

    ladder_kbps: tuple[int, ...]
    chunk_seconds: float
    sizes: np.ndarray  # (total_chunks, n_rates)
    manifest_id: str = "manifest"

    def __post_init__(self):
        object.__setattr__(self, "sizes", np.asarray(self.sizes, dtype=np.float64))
        if list(self.ladder_kbps) != sorted(set(self.ladder_kbps)):
            raise SimulatorError("bitrate ladder must be strictly increasing")
        if self.sizes.ndim != 2 or self.sizes.shape[1] != len(self.ladder_kbps):
            raise SimulatorError("sizes must be (chunks, rates)")
        if not (np.diff(self.sizes, axis=1) > 0).all():
            raise SimulatorError("sizes must increase across the ladder")

    @property
    def total_chunks(self) -> int:
        return self.sizes.shape[0]

    @property
    def n_rates(self) -> int:
        return len(self.ladder_kbps)

    def rate_mbps(self, index: int) -> float:
        return self.ladder_kbps[index] / 1000.0

    @property
    def max_chunk_size(self) -> float:
        return float(self.sizes.max())


def generate_manifest(
    ladder_kbps=DEFAULT_LADDER_KBPS,
    chunk_seconds: float = DEFAULT_CHUNK_SECONDS,
    total_chunks: int = 60,
    jitter: float = 0.1,
    seed: int = 0,
    manifest_id: str = "manifest",
) -> VideoManifest:
    """Synthesize chunk sizes: nominal bitrate*duration with a per-chunk
    jitter factor shared across the ladder (keeps sizes monotone)."""
    if total_chunks < 1:
        raise SimulatorError("need at least one chunk")
    if not 0.0 <= jitter <= 0.2:
        raise InvalidJitter(f"jitter {jitter} outside [0, 0.2]")
    rng = np.random.default_rng(seed)
    factors = 1.0 + rng.uniform(-jitter, jitter, size=total_chunks)
    nominal = np.array(ladder_kbps, dtype=np.float64) * 1000.0 * chunk_seconds
    sizes = factors[:, None] * nominal[None, :]
    return VideoManifest(tuple(ladder_kbps), chunk_seconds, sizes, manifest_id)


@dataclass(frozen=True)
class SimState:
    """Player state between chunk requests."""

    wall_clock: float = 0.0
    buffer: float = 0.0
    last_bitrate_index: int = 0
    chunks_sent: int = 0
    trace_cursor: float = 0.0


@dataclass(frozen=True)
class ChunkResult:
    bitrate_index: int
    download_time: float  # seconds, includes RTT
    rebuffer_time: float
    sleep_time: float
    buffer_after: float
    throughput_mbps: float  # chunk bits / download time
    qoe: float

    def to_record(self) -> dict:
        return {
            "bitrate_index": self.bitrate_index,
            "download_time": self.download_time,
            "rebuffer_time": self.rebuffer_time,
            "sleep_time": self.sleep_time,
            "buffer_after": self.buffer_after,
            "throughput_mbps": self.throughput_mbps,
            "qoe": self.qoe,
        }


def download_chunk(state: SimState, trace: ResampledTrace, size_bits: float) -> tuple[float, float]:
    """Time to fetch ``size_bits`` starting at the state's trace cursor.

    Integrates bandwidth second-by-second (pro-rating partial seconds), wraps
    the trace at its end, and adds a fixed round trip.  Returns
    (download_time, new_cursor); the cursor excludes the RTT.
    """
    if size_bits <= 0:
        raise SimulatorError("chunk size must be positive")
    values = trace.values
    n = len(values)
    cursor = state.trace_cursor
    remaining = size_bits
    elapsed = 0.0
    zero_run = 0.0
    while True:
        idx = int(cursor) % n
        frac = cursor - np.floor(cursor)
        slot = 1.0 - frac  # time left in this one-second bin
        rate_bps = values[idx] * 1e6
        if rate_bps <= 0:
            zero_run += slot
            if zero_run > ZERO_BANDWIDTH_LIMIT_SECONDS:
                raise ZeroBandwidthStall(f"no bandwidth for over {ZERO_BANDWIDTH_LIMIT_SECONDS} s")
            elapsed += slot
            cursor = np.floor(cursor) + 1.0
            continue
        zero_run = 0.0
        bits_here = rate_bps * slot
        if bits_here >= remaining:
            dt = remaining / rate_bps
            elapsed += dt
            cursor += dt
            break
        remaining -= bits_here
        elapsed += slot
        cursor = np.floor(cursor) + 1.0
    return elapsed + RTT_SECONDS, cursor


def step(
    state: SimState,
    manifest: VideoManifest,
    trace: ResampledTrace,
    action: int,
    qoe_params: QoEParams = QoEParams(),
    buffer_cap: float = BUFFER_CAP_SECONDS,
) -> tuple[ChunkResult, SimState]:
    """Download the next chunk at ladder index ``action`` and advance the player."""
    if state.chunks_sent >= manifest.total_chunks:
        raise EpisodeFinished(f"all {manifest.total_chunks} chunks sent")
    if not 0 <= action < manifest.n_rates:
        raise SimulatorError(f"action {action} outside ladder of {manifest.n_rates}")

    size = float(manifest.sizes[state.chunks_sent, action])
    d, cursor = download_chunk(state, trace, size)

    rebuffer = max(d - state.buffer, 0.0)
    buffer_after = max(state.buffer - d, 0.0) + manifest.chunk_seconds
    sleep = max(buffer_after - buffer_cap, 0.0)
    buffer_after -= sleep
    cursor += sleep  # the bandwidth pattern keeps moving while the player waits

    rate = manifest.rate_mbps(action)
    if state.chunks_sent == 0:
        smooth = 0.0
    else:
        smooth = abs(rate - manifest.rate_mbps(state.last_bitrate_index))
    qoe = rate - qoe_params.rebuffer_penalty * rebuffer - qoe_params.smoothness_penalty * smooth

    result = ChunkResult(
        bitrate_index=action,
        download_time=d,
        rebuffer_time=rebuffer,
        sleep_time=sleep,
        buffer_after=buffer_after,
        throughput_mbps=size / 1e6 / d,
        qoe=qoe,
    )
    new_state = SimState(
        wall_clock=state.wall_clock + d + sleep,
        buffer=buffer_after,
        last_bitrate_index=action,
        chunks_sent=state.chunks_sent + 1,
        trace_cursor=cursor,
    )
    return result, new_state


@dataclass
class EpisodeLog:
    """Results of one episode plus the context needed to re-derive QoE."""

    manifest_id: str
    trace_id: str
    ladder_kbps: tuple[int, ...]
    qoe_params: QoEParams
    chunks: list[ChunkResult] = field(default_factory=list)
    final_wall_clock: float = 0.0

    def to_jsonl(self) -> str:
        header = {
            "manifest_id": self.manifest_id,
            "trace_id": self.trace_id,
            "ladder_kbps": list(self.ladder_kbps),
            "rebuffer_penalty": self.qoe_params.rebuffer_penalty,
            "smoothness_penalty": self.qoe_params.smoothness_penalty,
            "final_wall_clock": self.final_wall_clock,
        }
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps(c.to_record(), sort_keys=True) for c in self.chunks]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "EpisodeLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = json.loads(lines[0])
        log = cls(
            manifest_id=header["manifest_id"],
            trace_id=header["trace_id"],
            ladder_kbps=tuple(header["ladder_kbps"]),
            qoe_params=QoEParams(header["rebuffer_penalty"], header["smoothness_penalty"]),
            final_wall_clock=header.get("final_wall_clock", 0.0),
        )
        for ln in lines[1:]:
            rec = json.loads(ln)
            log.chunks.append(ChunkResult(**rec))
        return log

    def mean_qoe(self) -> float:
        return float(np.mean([c.qoe for c in self.chunks]))


def run_episode(
    manifest: VideoManifest,
    trace: ResampledTrace,
    policy,
    qoe_params: QoEParams = QoEParams(),
    on_chunk=None,
    history_len: int = 8,
) -> EpisodeLog:
    """Stream every chunk, asking ``policy(observation)`` for each bitrate.

    ``on_chunk(result, state)`` fires after each step (used by the session
    controller to feed its throughput ring).
    """
    from .policies import Observation  # local import; policies depend on this module

    state = SimState()
    log = EpisodeLog(manifest.manifest_id, trace.id, manifest.ladder_kbps, qoe_params)
    thr_hist = [0.0] * history_len
    dl_hist = [0.0] * history_len

    while state.chunks_sent < manifest.total_chunks:
        obs = Observation(
            throughput_hist=np.array(thr_hist),
            download_hist=np.array(dl_hist),
            next_sizes=manifest.sizes[state.chunks_sent].copy(),
            buffer=state.buffer,
            last_bitrate_index=state.last_bitrate_index,
            chunks_remaining=manifest.total_chunks - state.chunks_sent,
            total_chunks=manifest.total_chunks,
            max_chunk_size=manifest.max_chunk_size,
            ladder_kbps=manifest.ladder_kbps,
        )
        action = int(policy(obs))
        result, state = step(state, manifest, trace, action, qoe_params)
        log.chunks.append(result)
        thr_hist = thr_hist[1:] + [result.throughput_mbps]
        dl_hist = dl_hist[1:] + [result.download_time]
        if on_chunk is not None:
            on_chunk(result, state)
    log.final_wall_clock = state.wall_clock
    return log


def replay_episode(manifest: VideoManifest, trace: ResampledTrace, actions: list[int], qoe_params: QoEParams = QoEParams()):
    """Drive the simulator with a fixed action sequence; returns (log, final state)."""
    state = SimState()
    log = EpisodeLog(manifest.manifest_id, trace.id, manifest.ladder_kbps, qoe_params)
    for action in actions:
        result, state = step(state, manifest, trace, action, qoe_params)
        log.chunks.append(result)
    log.final_wall_clock = state.wall_clock
    return log, state
