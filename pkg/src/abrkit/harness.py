"""End-to-end experiment driver: corpus, clustering, training, evaluation.

Each stage reads its predecessor's artifacts from the output directory,
writes its own, and records the configuration used, so a fixed-seed pipeline
replays byte-identically.  Outputs are plain JSON/JSONL/CSV; plotting is
external.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import condition_net as cnet
from .clustering import (
    GENERAL,
    ConditionLabel,
    fit_kmeans,
    label_trace,
    export_labels_jsonl,
    segment_trace,
    sweep_k,
    ClusterModel,
)
from .policies import BufferBasedPolicy, FixedPolicy, GreedyPolicy, RateBasedPolicy
from .runtime import SessionController, classifier_from_net, run_session
from .simulator import EpisodeLog, QoEParams, VideoManifest, generate_manifest, run_episode
from .traces import CorpusEntry, CorpusManifest, TraceArchetype, materialize_corpus, resample_1hz, save_trace, load_trace
from .training import TrainConfig, load_zoo, save_zoo, train_zoo

STAGES = ("corpus", "cluster", "train-classifier", "train-zoo", "evaluate", "report")

DEFAULT_POLICIES = (
    "condition_aware",
    "general_only",
    "rate_based",
    "buffer_based",
    "fixed-0",
    "fixed-1",
    "fixed-2",
    "fixed-3",
    "fixed-4",
)


class HarnessError(ValueError):
    pass


class ConfigInvalid(HarnessError):
    pass


class MissingArtifact(HarnessError):
    def __init__(self, stage: str, path: Path):
        self.stage = stage
        super().__init__(f"stage {stage!r} needs missing artifact {path}")


class EmptyInput(HarnessError):
    pass


class TooFewChunks(HarnessError):
    pass


@dataclass
class ArchetypeSpec:
    archetype: str
    count: int
    duration: float
    mean: float
    amplitude: float = 0.0
    period: float = 20.0
    noise_std: float = 0.0


@dataclass
class ExperimentConfig:
    seed: int = 7
    k: int = 5
    segment_seconds: int = 20
    frequency_threshold: float = 2.0 / 3.0
    train_fraction: float = 0.8
    corpus: list[ArchetypeSpec] = field(default_factory=list)
    # 2 s chunks keep the corpus's 10 s oscillations visible in the
    # chunk-averaged throughput the client observes.
    manifest_chunks: int = 120
    manifest_jitter: float = 0.1
    chunk_seconds: float = 2.0
    qoe: QoEParams = field(default_factory=QoEParams)
    classifier: dict = field(default_factory=dict)  # ConditionNetConfig overrides
    rl: dict = field(default_factory=dict)  # TrainConfig overrides
    policies: tuple[str, ...] = DEFAULT_POLICIES

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigInvalid("train/test proportions must sum to 1 with both sides nonempty")
        if not self.corpus:
            self.corpus = default_corpus_spec()

    def to_json(self) -> str:
        doc = asdict(self)
        doc["qoe"] = {"rebuffer_penalty": self.qoe.rebuffer_penalty, "smoothness_penalty": self.qoe.smoothness_penalty}
        doc["policies"] = list(self.policies)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        if "corpus" in doc:
            doc["corpus"] = [ArchetypeSpec(**rec) for rec in doc["corpus"]]
        if "qoe" in doc:
            doc["qoe"] = QoEParams(**doc["qoe"])
        if "policies" in doc:
            doc["policies"] = tuple(doc["policies"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


def default_corpus_spec() -> list[ArchetypeSpec]:
    """Shape-separated corpus whose five conditions emerge from clustering.

    Windows are standardized per sample before classification, which erases
    absolute bandwidth level, so the default archetypes differ in temporal
    shape: flat plus three sawtooth timescales (the 40 s period tiles into
    alternating rising and falling windows, giving two clusters and a
    genuinely non-trivial next-window prediction), for five clusters total.
    Periods stay at or above 10 s so the shapes remain visible in the
    chunk-averaged throughput a streaming client actually observes.
    """
    return [
        ArchetypeSpec("StableHigh", count=12, duration=260, mean=3.4, noise_std=0.15),
        ArchetypeSpec("Sawtooth", count=12, duration=260, mean=2.0, amplitude=1.5, period=10, noise_std=0.1),
        ArchetypeSpec("Sawtooth", count=12, duration=260, mean=2.1, amplitude=1.6, period=20, noise_std=0.1),
        ArchetypeSpec("Sawtooth", count=12, duration=260, mean=2.2, amplitude=1.7, period=40, noise_std=0.1),
    ]


def five_archetype_corpus_spec() -> list[ArchetypeSpec]:
    """One trace family per archetype name (level-separated variant)."""
    return [
        ArchetypeSpec("StableHigh", count=10, duration=260, mean=4.5, noise_std=0.2),
        ArchetypeSpec("StableLow", count=10, duration=260, mean=0.7, noise_std=0.05),
        ArchetypeSpec("Ramp", count=10, duration=260, mean=2.2, amplitude=1.6, noise_std=0.1),
        ArchetypeSpec("Sawtooth", count=10, duration=260, mean=2.0, amplitude=1.4, period=10, noise_std=0.1),
        ArchetypeSpec("Bursty", count=10, duration=260, mean=2.8, amplitude=2.0, period=5, noise_std=0.15),
    ]


# ---------------------------------------------------------------------------
# summary statistics


def compute_cdf(values) -> list[tuple[float, float]]:
    """Empirical CDF points (sorted value, i/n), right-continuous."""
    values = list(values)
    if not values:
        raise EmptyInput("CDF of an empty sample")
    n = len(values)
    return [(float(v), (i + 1) / n) for i, v in enumerate(sorted(values))]


def qoe_std_per_trace(log: EpisodeLog) -> float:
    """Population standard deviation of one episode's per-chunk QoE."""
    if len(log.chunks) < 2:
        raise TooFewChunks(f"episode has {len(log.chunks)} chunks")
    return float(np.std([c.qoe for c in log.chunks]))


def decompose_log(log: EpisodeLog) -> dict[str, np.ndarray]:
    """Per-chunk utility/rebuffer/smoothness arrays re-derived from a log."""
    ladder = np.array(log.ladder_kbps, dtype=np.float64) / 1000.0
    idx = [c.bitrate_index for c in log.chunks]
    utility = ladder[idx]
    rebuffer = np.array([c.rebuffer_time for c in log.chunks])
    smooth = np.zeros(len(idx))
    for i in range(1, len(idx)):
        smooth[i] = abs(ladder[idx[i]] - ladder[idx[i - 1]])
    qoe = np.array([c.qoe for c in log.chunks])
    return {"utility": utility, "rebuffer": rebuffer, "smooth": smooth, "qoe": qoe}


@dataclass
class PolicySummary:
    policy: str
    mean_qoe: float
    mean_utility: float
    mean_rebuffer: float
    mean_smoothness: float
    per_trace_qoe: dict[str, float]
    per_trace_qoe_std: dict[str, float]
    n_chunks: int
    identity_gap: float  # |mean_qoe - (utility - mu*rebuffer - smooth)|


def summarize_policy(policy: str, logs: list[EpisodeLog], qoe_params: QoEParams) -> PolicySummary:
    parts = [decompose_log(log) for log in logs]
    qoe = np.concatenate([p["qoe"] for p in parts])
    utility = np.concatenate([p["utility"] for p in parts])
    rebuffer = np.concatenate([p["rebuffer"] for p in parts])
    smooth = np.concatenate([p["smooth"] for p in parts])
    reconstructed = (
        utility.mean()
        - qoe_params.rebuffer_penalty * rebuffer.mean()
        - qoe_params.smoothness_penalty * smooth.mean()
    )
    return PolicySummary(
        policy=policy,
        mean_qoe=float(qoe.mean()),
        mean_utility=float(utility.mean()),
        mean_rebuffer=float(rebuffer.mean()),
        mean_smoothness=float(smooth.mean()),
        per_trace_qoe={log.trace_id: log.mean_qoe() for log in logs},
        per_trace_qoe_std={log.trace_id: qoe_std_per_trace(log) for log in logs},
        n_chunks=int(len(qoe)),
        identity_gap=float(abs(qoe.mean() - reconstructed)),
    )


# ---------------------------------------------------------------------------
# pipeline stages


def _require(stage: str, path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(stage, path)
    return path


def _write_stage_config(out: Path, stage: str, config: ExperimentConfig) -> None:
    (out / f"config_{stage.replace('-', '_')}.json").write_text(config.to_json())


def build_corpus_manifest(config: ExperimentConfig) -> CorpusManifest:
    entries = []
    for row, spec in enumerate(config.corpus):
        for i in range(spec.count):
            trace_id = f"{spec.archetype.lower()}-r{row}-{i:03d}"
            arch = TraceArchetype(
                name=spec.archetype,
                mean=spec.mean,
                amplitude=spec.amplitude,
                period=spec.period,
                noise_std=spec.noise_std,
                seed=config.seed * 100000 + len(entries),
            )
            entries.append(CorpusEntry(trace_id, arch, spec.duration))

    ids = [e.trace_id for e in entries]
    rng = np.random.default_rng([config.seed, 0x5B117])
    order = rng.permutation(len(ids))
    n_train = int(round(config.train_fraction * len(ids)))
    n_train = min(max(n_train, 1), len(ids) - 1)
    train_ids = sorted(ids[i] for i in order[:n_train])
    test_ids = sorted(ids[i] for i in order[n_train:])
    return CorpusManifest(entries=entries, train_ids=train_ids, test_ids=test_ids)


def stage_corpus(config: ExperimentConfig, out: Path) -> None:
    out = Path(out)
    (out / "corpus" / "traces").mkdir(parents=True, exist_ok=True)
    manifest = build_corpus_manifest(config)
    for trace in materialize_corpus(manifest):
        save_trace(trace, out / "corpus" / "traces" / f"{trace.id}.txt")
    (out / "corpus" / "manifest.json").write_text(manifest.to_json())
    _write_stage_config(out / "corpus", "corpus", config)


def _load_split(out: Path, stage: str):
    manifest_path = _require(stage, out / "corpus" / "manifest.json")
    manifest = CorpusManifest.from_json(manifest_path.read_text())
    traces = {}
    for entry in manifest.entries:
        path = _require(stage, out / "corpus" / "traces" / f"{entry.trace_id}.txt")
        traces[entry.trace_id] = resample_1hz(load_trace(path))
    train = [traces[i] for i in manifest.train_ids]
    test = [traces[i] for i in manifest.test_ids]
    return manifest, train, test


def stage_cluster(config: ExperimentConfig, out: Path) -> None:
    out = Path(out)
    _, train, _ = _load_split(out, "cluster")
    per_trace = {tr.id: segment_trace(tr, config.segment_seconds) for tr in train}
    segments = [s for segs in per_trace.values() for s in segs]

    report = sweep_k(segments, range(2, 9), seed=config.seed)
    model = fit_kmeans(segments, config.k, seed=config.seed)

    trace_labels = {
        tr.id: label_trace(model, per_trace[tr.id], config.frequency_threshold).key for tr in train
    }

    cdir = out / "cluster"
    cdir.mkdir(parents=True, exist_ok=True)
    (cdir / "model.json").write_text(model.to_json())
    (cdir / "ksweep.json").write_text(report.to_json())
    (cdir / "labels.jsonl").write_text(export_labels_jsonl(model, per_trace))
    (cdir / "trace_labels.json").write_text(json.dumps(trace_labels, indent=2, sort_keys=True))
    _write_stage_config(cdir, "cluster", config)


def stage_train_classifier(config: ExperimentConfig, out: Path) -> None:
    out = Path(out)
    model = ClusterModel.from_json(_require("train-classifier", out / "cluster" / "model.json").read_text())
    _, train_traces, _ = _load_split(out, "train-classifier")

    overrides = dict(config.classifier)
    overrides.setdefault("classes", config.k)
    overrides.setdefault("input_len", config.segment_seconds)
    for key in ("kernel_sizes", "conv_channels", "fc_sizes"):
        if key in overrides:
            overrides[key] = tuple(overrides[key])
    net_config = cnet.ConditionNetConfig(**overrides)

    dataset = cnet.build_dataset(model, train_traces, t=config.segment_seconds, label_next_segment=net_config.label_next_segment)
    net, report = cnet.train(net_config, dataset, seed=config.seed)

    cdir = out / "classifier"
    cdir.mkdir(parents=True, exist_ok=True)
    cnet.save_classifier(cdir / "model.ckpt", net, cluster_fingerprint=model.fingerprint())
    (cdir / "report.json").write_text(report.to_json())
    _write_stage_config(cdir, "train-classifier", config)


def _training_manifest(config: ExperimentConfig) -> VideoManifest:
    return generate_manifest(
        chunk_seconds=config.chunk_seconds,
        total_chunks=config.manifest_chunks,
        jitter=config.manifest_jitter,
        seed=config.seed,
        manifest_id=f"video-seed{config.seed}",
    )


def stage_train_zoo(config: ExperimentConfig, out: Path) -> None:
    out = Path(out)
    trace_labels = json.loads(_require("train-zoo", out / "cluster" / "trace_labels.json").read_text())
    _, train_traces, _ = _load_split(out, "train-zoo")

    labeled = [(tr, ConditionLabel.from_key(trace_labels[tr.id])) for tr in train_traces]
    manifest = _training_manifest(config)
    train_config = TrainConfig(**{"seed": config.seed, **config.rl})

    log: list = []
    zoo = train_zoo(train_config, labeled, config.k, manifest, config.qoe, log=log)

    zdir = out / "zoo"
    save_zoo(zoo, zdir)
    with open(zdir / "training_log.jsonl", "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_stage_config(zdir, "train-zoo", config)


def _build_policy(name: str, zoo, net, config: ExperimentConfig):
    """Returns (policy callable, controller or None) for one eval row."""
    if name == "condition_aware":
        controller = SessionController(classifier_from_net(net), zoo, window_seconds=config.segment_seconds)
        return controller.decide, controller
    if name == "general_only":
        return GreedyPolicy(zoo.resolve(GENERAL)), None
    if name == "rate_based":
        return RateBasedPolicy(), None
    if name == "buffer_based":
        return BufferBasedPolicy(), None
    if name.startswith("fixed-"):
        return FixedPolicy(int(name.split("-", 1)[1])), None
    raise ConfigInvalid(f"unknown policy {name!r}")


def stage_evaluate(config: ExperimentConfig, out: Path) -> None:
    out = Path(out)
    zoo = load_zoo(_require("evaluate", out / "zoo"))
    net, _ = cnet.load_classifier(_require("evaluate", out / "classifier" / "model.ckpt"))
    _, _, test_traces = _load_split(out, "evaluate")
    manifest = _training_manifest(config)

    edir = out / "eval"
    for name in config.policies:
        pdir = edir / name
        pdir.mkdir(parents=True, exist_ok=True)
        for trace in test_traces:
            policy, controller = _build_policy(name, zoo, net, config)
            if controller is not None:
                log = run_session(manifest, trace, controller, config.qoe)
                text = log.to_jsonl() + controller.events_jsonl()
            else:
                log = run_episode(manifest, trace, policy, config.qoe)
                text = log.to_jsonl()
            (pdir / f"{trace.id}.jsonl").write_text(text)
    _write_stage_config(edir, "evaluate", config)


def _read_episode(path: Path) -> EpisodeLog:
    # Merged episode files carry tick-event records after the chunks;
    # chunk records are the ones with a bitrate index.
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    records = [json.loads(ln) for ln in lines]
    header = records[0]
    log = EpisodeLog(
        manifest_id=header["manifest_id"],
        trace_id=header["trace_id"],
        ladder_kbps=tuple(header["ladder_kbps"]),
        qoe_params=QoEParams(header["rebuffer_penalty"], header["smoothness_penalty"]),
        final_wall_clock=header.get("final_wall_clock", 0.0),
    )
    from .simulator import ChunkResult

    log.chunks = [ChunkResult(**rec) for rec in records[1:] if "bitrate_index" in rec]
    return log


def stage_report(config: ExperimentConfig, out: Path) -> dict:
    out = Path(out)
    edir = _require("report", out / "eval")
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)

    summary = {}
    for name in config.policies:
        pdir = _require("report", edir / name)
        logs = [_read_episode(p) for p in sorted(pdir.glob("*.jsonl"))]
        if not logs:
            raise MissingArtifact("report", pdir / "*.jsonl")
        ps = summarize_policy(name, logs, config.qoe)
        summary[name] = {
            "mean_qoe": ps.mean_qoe,
            "mean_utility_mbps": ps.mean_utility,
            "mean_rebuffer_s": ps.mean_rebuffer,
            "mean_smoothness_mbps": ps.mean_smoothness,
            "identity_gap": ps.identity_gap,
            "n_chunks": ps.n_chunks,
            "per_trace_qoe": ps.per_trace_qoe,
            "per_trace_qoe_std": ps.per_trace_qoe_std,
        }
        _write_cdf_csv(rdir / f"cdf_qoe_{name}.csv", compute_cdf(ps.per_trace_qoe.values()))
        _write_cdf_csv(rdir / f"cdf_qoe_std_{name}.csv", compute_cdf(ps.per_trace_qoe_std.values()))

    (rdir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_stage_config(rdir, "report", config)
    return summary


def _write_cdf_csv(path: Path, points: list[tuple[float, float]]) -> None:
    lines = ["value,fraction"] + [f"{v!r},{f!r}" for v, f in points]
    path.write_text("\n".join(lines) + "\n")


def read_cdf_csv(path: Path) -> list[tuple[float, float]]:
    lines = Path(path).read_text().splitlines()[1:]
    return [tuple(float(x) for x in ln.split(",")) for ln in lines if ln.strip()]


def run_stage(stage: str, config: ExperimentConfig, out: Path):
    fns = {
        "corpus": stage_corpus,
        "cluster": stage_cluster,
        "train-classifier": stage_train_classifier,
        "train-zoo": stage_train_zoo,
        "evaluate": stage_evaluate,
        "report": stage_report,
    }
    if stage not in fns:
        raise ConfigInvalid(f"unknown stage {stage!r}")
    return fns[stage](config, Path(out))


def run_pipeline(config: ExperimentConfig, out: Path) -> dict:
    """All six stages in order; returns the report summary."""
    for stage in STAGES[:-1]:
        run_stage(stage, config, out)
    return run_stage("report", config, out)
