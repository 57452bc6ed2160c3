"""Segment traces into fixed windows and cluster them with K-means.

Segments are the unit of condition discovery: traces are tiled into
non-overlapping t-second windows, standardized per dimension, clustered by
Lloyd's algorithm (k-means++ init, restarts), and whole traces are labeled
by the most frequent segment cluster subject to a frequency threshold.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .traces import ResampledTrace

DEFAULT_SEGMENT_SECONDS = 20
DEFAULT_FREQUENCY_THRESHOLD = 2.0 / 3.0
KMEANS_MAX_ITER = 300
KMEANS_RESTARTS = 10


class ClusteringError(ValueError):
    pass


class TraceTooShort(ClusteringError):
    pass


class NotEnoughSegments(ClusteringError):
    pass


class DimensionMismatch(ClusteringError):
    pass


class EmptyCluster(ClusteringError):
    pass


class DegenerateSeparation(ClusteringError):
    """Two centroids coincide, so the separation ratio is undefined."""


class NoSegments(ClusteringError):
    pass


@dataclass(frozen=True)
class ConditionLabel:
    """A network condition: a concrete cluster, Uncertain, or General."""

    kind: str  # "cluster" | "uncertain" | "general"
    index: int | None = None

    def __post_init__(self):
        if self.kind not in ("cluster", "uncertain", "general"):
            raise ValueError(f"bad label kind {self.kind!r}")
        if (self.kind == "cluster") != (self.index is not None):
            raise ValueError("cluster labels carry an index, others do not")
        if self.index is not None and self.index < 0:
            raise ValueError("cluster index must be >= 0")

    @classmethod
    def cluster(cls, index: int) -> "ConditionLabel":
        return cls("cluster", index)

    @property
    def key(self) -> str:
        """Stable string form used in zoo indexes and logs."""
        return f"cluster-{self.index}" if self.kind == "cluster" else self.kind

    @classmethod
    def from_key(cls, key: str) -> "ConditionLabel":
        if key.startswith("cluster-"):
            return cls.cluster(int(key.split("-", 1)[1]))
        return cls(key)

    def __str__(self) -> str:
        return self.key


UNCERTAIN = ConditionLabel("uncertain")
GENERAL = ConditionLabel("general")


@dataclass(frozen=True)
class Segment:
    """One t-second window of a resampled trace."""

    trace_id: str
    start: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.values.ndim != 1:
            raise ClusteringError("segment values must be 1-D")


def segment_trace(trace: ResampledTrace, t: int = DEFAULT_SEGMENT_SECONDS) -> list[Segment]:
    """Tile a trace into floor(len/t) non-overlapping t-second segments."""
    if t < 2:
        raise ClusteringError(f"segment length {t} < 2")
    if len(trace) < t:
        raise TraceTooShort(f"trace {trace.id!r}: {len(trace)} s < one {t} s segment")
    n = len(trace) // t
    return [Segment(trace.id, i * t, trace.values[i * t : (i + 1) * t]) for i in range(n)]


@dataclass
class ClusterModel:
    """Fitted K-means model in per-dimension standardized feature space."""

    k: int
    centroids: np.ndarray  # (k, t), standardized space
    feature_mean: np.ndarray  # (t,)
    feature_std: np.ndarray  # (t,), strictly positive
    seed: int
    sse_history: list[float] = field(default_factory=list)  # winning restart
    restart_histories: list[list[float]] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.feature_mean) / self.feature_std

    def centroids_raw(self) -> np.ndarray:
        """Centroids mapped back to raw Mbit/s space."""
        return self.centroids * self.feature_std + self.feature_mean

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "centroids": self.centroids.tolist(),
                "feature_mean": self.feature_mean.tolist(),
                "feature_std": self.feature_std.tolist(),
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ClusterModel":
        doc = json.loads(text)
        return cls(
            k=doc["k"],
            centroids=np.array(doc["centroids"], dtype=np.float64),
            feature_mean=np.array(doc["feature_mean"], dtype=np.float64),
            feature_std=np.array(doc["feature_std"], dtype=np.float64),
            seed=doc["seed"],
        )

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def _segment_matrix(segments: list[Segment]) -> np.ndarray:
    dims = {len(s.values) for s in segments}
    if len(dims) != 1:
        raise DimensionMismatch(f"mixed segment lengths {sorted(dims)}")
    return np.stack([s.values for s in segments])


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:  # all remaining points coincide with a centroid
            centroids[j] = x[rng.integers(n)]
            continue
        probs = d2 / total
        centroids[j] = x[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, np.sum((x - centroids[j]) ** 2, axis=1))
    return centroids


def _assign(x: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Squared distances (n, k); ties go to the lower cluster index via argmin.
    d2 = np.sum((x[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(x)), labels]


def lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = KMEANS_MAX_ITER):
    """One Lloyd run from a k-means++ init.

    Returns (centroids, labels, sse_history); the history holds the SSE after
    each centroid update and is non-increasing.  Empty clusters are re-seeded
    with the point farthest from its assigned centroid.
    """
    centroids = _kmeans_pp_init(x, k, rng)
    labels, _ = _assign(x, centroids)
    history: list[float] = []
    for _ in range(max_iter):
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
            else:
                _, d2 = _assign(x, centroids)
                centroids[j] = x[int(np.argmax(d2))]
        new_labels, d2 = _assign(x, centroids)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return centroids, labels, history


def fit_kmeans(
    segments: list[Segment],
    k: int,
    seed: int = 0,
    restarts: int = KMEANS_RESTARTS,
) -> ClusterModel:
    """Fit K-means on standardized segment vectors, keeping the best of
    ``restarts`` Lloyd runs by SSE.

    k=1 is allowed for testing (centroid = mean); the pipeline uses k >= 2.
    """
    if k < 1:
        raise ClusteringError(f"k={k} < 1")
    if len(segments) < k:
        raise NotEnoughSegments(f"{len(segments)} segments < k={k}")

    raw = _segment_matrix(segments)
    mean = raw.mean(axis=0)
    std = raw.std(axis=0)
    std = np.where(std > 0, std, 1.0)  # zero-variance dims carry no signal
    x = (raw - mean) / std

    best = None
    histories: list[list[float]] = []
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        centroids, labels, history = lloyd(x, k, rng)
        histories.append(history)
        sse_val = history[-1] if history else 0.0
        if best is None or sse_val < best[0]:
            best = (sse_val, centroids, history)

    _, centroids, history = best
    return ClusterModel(
        k=k,
        centroids=centroids,
        feature_mean=mean,
        feature_std=std,
        seed=seed,
        sse_history=list(history),
        restart_histories=histories,
    )


def _check_dim(model: ClusterModel, x: np.ndarray) -> None:
    if x.shape[-1] != model.dim:
        raise DimensionMismatch(f"segment dim {x.shape[-1]} != model dim {model.dim}")


def sse(model: ClusterModel, segments: list[Segment], space: str = "standardized") -> float:
    """Sum of squared distances from each segment to its nearest centroid.

    ``space`` selects the metric space: "standardized" (the clustering
    objective) or "raw" (Mbit/s units, centroids mapped back).
    """
    raw = _segment_matrix(segments)
    _check_dim(model, raw)
    if space == "standardized":
        _, d2 = _assign(model.standardize(raw), model.centroids)
    elif space == "raw":
        _, d2 = _assign(raw, model.centroids_raw())
    else:
        raise ValueError(f"unknown space {space!r}")
    return float(d2.sum())


def dbi(model: ClusterModel, segments: list[Segment]) -> float:
    """Davies-Bouldin index in standardized space.

    Mean over clusters of the worst (S_i + S_j) / M_ij ratio, where S is the
    mean member-to-centroid distance and M the centroid separation.
    """
    if model.k < 2:
        raise ClusteringError("DBI needs k >= 2")
    raw = _segment_matrix(segments)
    _check_dim(model, raw)
    x = model.standardize(raw)

    sep = np.linalg.norm(model.centroids[:, None, :] - model.centroids[None, :, :], axis=2)
    off_diag = sep[~np.eye(model.k, dtype=bool)]
    if (off_diag == 0).any():
        raise DegenerateSeparation("two centroids coincide; separation ratio undefined")

    labels, _ = _assign(x, model.centroids)
    scatter = np.empty(model.k)
    for j in range(model.k):
        members = x[labels == j]
        if len(members) == 0:
            raise EmptyCluster(f"cluster {j} has no members")
        scatter[j] = np.linalg.norm(members - model.centroids[j], axis=1).mean()

    worst = np.zeros(model.k)
    for i in range(model.k):
        for j in range(model.k):
            if i != j:
                worst[i] = max(worst[i], (scatter[i] + scatter[j]) / sep[i, j])
    return float(worst.mean())


@dataclass
class KSweepReport:
    """SSE/DBI per candidate k, for manual elbow inspection."""

    seed: int
    entries: dict[int, tuple[float, float]] = field(default_factory=dict)  # k -> (sse, dbi)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "entries": {str(k): {"sse": v[0], "dbi": v[1]} for k, v in sorted(self.entries.items())},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "KSweepReport":
        doc = json.loads(text)
        entries = {int(k): (v["sse"], v["dbi"]) for k, v in doc["entries"].items()}
        return cls(seed=doc["seed"], entries=entries)


def sweep_k(segments: list[Segment], k_range=range(2, 9), seed: int = 0) -> KSweepReport:
    """Fit one model per k under a shared seed policy and report SSE/DBI."""
    report = KSweepReport(seed=seed)
    for k in k_range:
        model = fit_kmeans(segments, k, seed=seed)
        report.entries[k] = (sse(model, segments), dbi(model, segments))
    return report


def label_segment(model: ClusterModel, segment: Segment) -> ConditionLabel:
    """Nearest-centroid cluster in standardized space; ties take the lower index."""
    x = np.asarray(segment.values, dtype=np.float64)
    _check_dim(model, x)
    labels, _ = _assign(model.standardize(x)[None, :], model.centroids)
    return ConditionLabel.cluster(int(labels[0]))


def label_trace(
    model: ClusterModel,
    trace_segments: list[Segment],
    h: float = DEFAULT_FREQUENCY_THRESHOLD,
) -> ConditionLabel:
    """Label a whole trace by its most frequent segment cluster.

    Returns Uncertain when the winning frequency is below ``h`` or when the
    top frequency is tied between clusters.
    """
    if not trace_segments:
        raise NoSegments("cannot label a trace with no segments")
    counts: dict[int, int] = {}
    for seg in trace_segments:
        idx = label_segment(model, seg).index
        counts[idx] = counts.get(idx, 0) + 1
    top = max(counts.values())
    winners = [idx for idx, c in counts.items() if c == top]
    if len(winners) > 1:
        return UNCERTAIN
    if top / len(trace_segments) >= h:
        return ConditionLabel.cluster(winners[0])
    return UNCERTAIN


def export_labels_jsonl(model: ClusterModel, per_trace_segments: dict[str, list[Segment]]) -> str:
    """JSON-lines export of {trace_id, segment_start, label} records."""
    lines = []
    for trace_id in sorted(per_trace_segments):
        for seg in per_trace_segments[trace_id]:
            rec = {
                "trace_id": trace_id,
                "segment_start": seg.start,
                "label": label_segment(model, seg).key,
            }
            lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"
