"""Throughput trace loading, validation, synthesis, and 1 Hz resampling.

Trace files are plain text, one ``SECONDS BANDWIDTH_MBPS`` pair per line.
All downstream processing (segmentation, classification, simulation) runs on
the fixed 1 Hz grid produced by :func:`resample_1hz`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ARCHETYPE_NAMES = ("StableHigh", "StableLow", "Ramp", "Sawtooth", "Bursty")

# Synthesis never emits bandwidth below this, so download times stay finite.
BANDWIDTH_FLOOR_MBPS = 0.01


class TraceError(ValueError):
    """Base class for trace validation failures."""


class MalformedLine(TraceError):
    def __init__(self, line_number: int, line: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: expected 'SECONDS MBPS', got {line!r}")


class NonMonotonicTime(TraceError):
    pass


class NegativeBandwidth(TraceError):
    pass


class TooFewSamples(TraceError):
    pass


class EmptyAfterResample(TraceError):
    pass


class DurationTooShort(TraceError):
    pass


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class ThroughputTrace:
    """A validated time/bandwidth series (seconds, Mbit/s)."""

    id: str
    samples: tuple[tuple[float, float], ...]

    def __post_init__(self):
        _validate_samples(self.samples)

    @property
    def duration(self) -> float:
        """Covered time span: the last sample holds for one trailing gap."""
        times = [t for t, _ in self.samples]
        return (times[-1] - times[0]) + (times[-1] - times[-2])


@dataclass(frozen=True)
class ResampledTrace:
    """Bandwidth on an exact 1 s grid, derived from a ThroughputTrace."""

    id: str
    values: np.ndarray
    origin: str = ""

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1 or len(self.values) == 0:
            raise EmptyAfterResample(f"trace {self.id!r} has no full 1 s bins")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise NegativeBandwidth(f"trace {self.id!r} has invalid grid values")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TraceArchetype:
    """Parametric generator family for synthetic throughput traces.

    ``name`` selects the waveform; mean/amplitude are Mbit/s, period is
    seconds, noise_std is the Gaussian jitter applied on top.
    """

    name: str
    mean: float
    amplitude: float = 0.0
    period: float = 20.0
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in ARCHETYPE_NAMES:
            raise ValueError(f"unknown archetype {self.name!r}")
        if self.mean <= 0:
            raise ValueError("mean level must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise std must be >= 0")


def _validate_samples(samples) -> None:
    prev = None
    for t, bw in samples:
        if not (np.isfinite(t) and np.isfinite(bw)):
            raise NegativeBandwidth(f"non-finite sample ({t}, {bw})")
        if bw < 0:
            raise NegativeBandwidth(f"bandwidth {bw} < 0 at t={t}")
        if prev is None:
            if t < 0:
                raise NonMonotonicTime(f"first timestamp {t} < 0")
        elif t <= prev:
            raise NonMonotonicTime(f"timestamp {t} does not increase past {prev}")
        prev = t
    if len(samples) < 2:
        raise TooFewSamples(f"need at least 2 samples, got {len(samples)}")


def load_trace(path: str | Path) -> ThroughputTrace:
    """Parse a two-column trace file into a validated ThroughputTrace."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc

    samples = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise MalformedLine(i, line)
        try:
            t, bw = float(parts[0]), float(parts[1])
        except ValueError:
            raise MalformedLine(i, line) from None
        if not (np.isfinite(t) and np.isfinite(bw)):
            raise MalformedLine(i, line)
        samples.append((t, bw))
    return ThroughputTrace(id=path.stem, samples=tuple(samples))


def save_trace(trace: ThroughputTrace, path: str | Path) -> None:
    """Write a trace with fixed 6-decimal formatting; load round-trips it."""
    lines = [f"{t:.6f} {bw:.6f}\n" for t, bw in trace.samples]
    try:
        Path(path).write_text("".join(lines))
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def resample_1hz(trace: ThroughputTrace) -> ResampledTrace:
    """Project a trace onto a 1 s grid anchored at its first timestamp.

    Bandwidth is held constant between samples (zero-order hold; the last
    sample holds for one trailing inter-sample gap) and each grid value is
    the time-weighted mean over its [s, s+1) bin.  A trailing partial second
    is dropped.
    """
    times = np.array([t for t, _ in trace.samples])
    bws = np.array([bw for _, bw in trace.samples])
    end = times[-1] + (times[-1] - times[-2])
    n_bins = int(np.floor(end - times[0]))
    if n_bins < 1:
        raise EmptyAfterResample(f"trace {trace.id!r} covers less than 1 s")

    # Hold intervals: [times[i], times[i+1]) at bws[i], final one ends at `end`.
    starts = times
    stops = np.append(times[1:], end)
    values = np.empty(n_bins)
    for s in range(n_bins):
        lo = times[0] + s
        hi = lo + 1.0
        overlap = np.minimum(stops, hi) - np.maximum(starts, lo)
        overlap = np.clip(overlap, 0.0, None)
        values[s] = float(np.dot(overlap, bws))  # overlaps sum to exactly 1 s
    return ResampledTrace(id=trace.id, values=values, origin=trace.id)


def _triangle(phase: np.ndarray) -> np.ndarray:
    # Period-1 triangle wave in [-1, 1] with minima at integer phase.
    return 4.0 * np.abs(phase - np.floor(phase + 0.5)) - 1.0


def synthesize_trace(archetype: TraceArchetype, duration: float, trace_id: str | None = None) -> ThroughputTrace:
    """Generate a deterministic synthetic trace, one sample per second.

    StableHigh/StableLow emit mean +/- noise, Ramp drifts linearly across
    mean +/- amplitude, Sawtooth is a triangle wave, Bursty switches between
    two levels with mean dwell ``period`` seconds.
    """
    if duration < 60:
        raise DurationTooShort(f"duration {duration} < 60 s")
    n = int(duration)
    rng = np.random.default_rng(archetype.seed)
    t = np.arange(n, dtype=np.float64)

    name = archetype.name
    if name in ("StableHigh", "StableLow"):
        level = np.full(n, archetype.mean)
    elif name == "Ramp":
        level = archetype.mean + archetype.amplitude * (2.0 * t / max(n - 1, 1) - 1.0)
    elif name == "Sawtooth":
        level = archetype.mean + archetype.amplitude * _triangle(t / archetype.period)
    else:  # Bursty: two-level Markov switching, mean dwell = period
        p_switch = 1.0 / max(archetype.period, 1.0)
        flips = rng.random(n) < p_switch
        state = np.cumsum(flips) % 2
        level = archetype.mean + archetype.amplitude * np.where(state == 0, 1.0, -1.0)

    if archetype.noise_std > 0:
        level = level + rng.normal(0.0, archetype.noise_std, size=n)
    level = np.clip(level, BANDWIDTH_FLOOR_MBPS, None)

    tid = trace_id if trace_id is not None else f"{name.lower()}-seed{archetype.seed}"
    return ThroughputTrace(id=tid, samples=tuple(zip(t.tolist(), level.tolist())))


@dataclass
class CorpusEntry:
    """One synthetic trace recipe inside a corpus manifest."""

    trace_id: str
    archetype: TraceArchetype
    duration: float


@dataclass
class CorpusManifest:
    """Recipe list for a reproducible synthetic corpus, plus its split."""

    entries: list[CorpusEntry] = field(default_factory=list)
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "traces": [
                {
                    "trace_id": e.trace_id,
                    "archetype": e.archetype.name,
                    "parameters": {
                        "mean": e.archetype.mean,
                        "amplitude": e.archetype.amplitude,
                        "period": e.archetype.period,
                        "noise_std": e.archetype.noise_std,
                    },
                    "seed": e.archetype.seed,
                    "duration": e.duration,
                }
                for e in self.entries
            ],
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        doc = json.loads(text)
        entries = []
        for rec in doc["traces"]:
            p = rec["parameters"]
            arch = TraceArchetype(
                name=rec["archetype"],
                mean=p["mean"],
                amplitude=p["amplitude"],
                period=p["period"],
                noise_std=p["noise_std"],
                seed=rec["seed"],
            )
            entries.append(CorpusEntry(rec["trace_id"], arch, rec["duration"]))
        return cls(entries=entries, train_ids=list(doc.get("train_ids", [])), test_ids=list(doc.get("test_ids", [])))


def materialize_corpus(manifest: CorpusManifest) -> list[ThroughputTrace]:
    """Synthesize every trace named by the manifest, in manifest order."""
    return [synthesize_trace(e.archetype, e.duration, trace_id=e.trace_id) for e in manifest.entries]
