"""1D-CNN network-condition classifier.

Each of the three conv stages runs three kernel scales (3/5/7) in parallel,
concatenates them, shuffles the channel groups, normalizes, applies
squeeze-and-excitation gating, adds a projected skip connection, and
max-pools at stride 1 so the 20-sample width is preserved end to end.
Windows are standardized per sample (mean/std of the window itself), so
inference needs no corpus statistics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .clustering import ClusterModel, ConditionLabel, TraceTooShort, label_segment, segment_trace
from .nn import Tensor
from .traces import ResampledTrace

STD_FLOOR = 1e-6


class ConditionNetError(ValueError):
    pass


class ClassMissing(ConditionNetError):
    pass


class DegenerateDataset(ConditionNetError):
    pass


@dataclass(frozen=True)
class ConditionNetConfig:
    input_len: int = 20
    kernel_sizes: tuple[int, ...] = (3, 5, 7)
    conv_channels: tuple[int, ...] = (64, 128, 256)  # per scale; stage width is 3x this
    fc_sizes: tuple[int, ...] = (256, 128)
    classes: int = 5
    batch_size: int = 80
    learning_rate: float = 1e-4
    epochs: int = 100
    dropout: float = 0.5
    se_reduction: int = 4
    # True: window S_i is labeled with the cluster of S_{i+1} (predict the
    # coming condition).  False: same-segment labeling, for comparison.
    label_next_segment: bool = True
    early_stop_acc: float | None = None

    def __post_init__(self):
        if self.classes < 2:
            raise ConditionNetError("need at least 2 classes")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConditionNetError("same-padding conv stages need odd kernels")


@dataclass(frozen=True)
class LabeledWindow:
    """One standardized history window and the cluster it should predict."""

    trace_id: str
    values: np.ndarray  # (input_len,) standardized
    label: int  # cluster index


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_accuracy: float = 0.0
    epochs_run: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "train_loss": self.train_loss,
                "val_accuracy": self.val_accuracy,
                "best_accuracy": self.best_accuracy,
                "epochs_run": self.epochs_run,
            },
            sort_keys=True,
        )


def standardize_window(values: np.ndarray) -> np.ndarray:
    """Mean-std standardization of one window, with a floored std.

    Idempotent on already-standardized windows, so callers may pass raw or
    standardized data.
    """
    v = np.asarray(values, dtype=np.float64)
    return (v - v.mean()) / max(v.std(), STD_FLOOR)


class _ConvStage(nn.Module):
    """One multi-scale stage: convs -> concat -> shuffle -> BN -> ReLU -> SE
    -> residual(+1x1 projection) -> stride-1 max pool."""

    def __init__(self, c_in: int, c_per_scale: int, kernel_sizes, rng, se_reduction: int):
        super().__init__()
        self.kernel_sizes = tuple(kernel_sizes)
        c_out = c_per_scale * len(kernel_sizes)
        self.convs = nn.ModuleList([nn.Conv1d(c_in, c_per_scale, k, rng) for k in kernel_sizes])
        self.shuffle_groups = len(kernel_sizes)
        self.bn = nn.BatchNorm1d(c_out)
        self.se = nn.SEBlock(c_out, rng, reduction=se_reduction)
        self.proj = nn.Conv1d(c_in, c_out, 1, rng)  # aligns channels for the skip
        self.pool_kernel = 2
        self.out_channels = c_out

    def __call__(self, x: Tensor) -> Tensor:
        y = nn.concat([conv(x) for conv in self.convs], axis=1)
        y = nn.channel_shuffle(y, self.shuffle_groups)
        y = nn.relu(self.bn(y))
        y = self.se(y)
        y = nn.residual_add(y, self.proj(x))
        return nn.max_pool1d(y, self.pool_kernel)


class ConditionNet(nn.Module):
    def __init__(self, config: ConditionNetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng([seed, 0xC1A])
        self.dropout_rng = np.random.default_rng([seed, 0xD0])

        stages = []
        c_in = 1
        for c in config.conv_channels:
            stage = _ConvStage(c_in, c, config.kernel_sizes, rng, config.se_reduction)
            stages.append(stage)
            c_in = stage.out_channels
        self.stages = nn.ModuleList(stages)

        flat = c_in * config.input_len
        fcs = []
        prev = flat
        for width in config.fc_sizes:
            fcs.append(nn.Linear(prev, width, rng))
            prev = width
        self.fcs = nn.ModuleList(fcs)
        self.drop = nn.Dropout(config.dropout, self.dropout_rng)
        self.head = nn.Linear(prev, config.classes, rng)

    def __call__(self, windows: np.ndarray) -> Tensor:
        """Logits for a batch of standardized windows (N, input_len)."""
        x = Tensor(np.asarray(windows, dtype=np.float64)[:, None, :])
        for stage in self.stages:
            x = stage(x)
        n = x.shape[0]
        x = nn.reshape(x, (n, x.shape[1] * x.shape[2]))
        for fc in self.fcs:
            x = self.drop(nn.relu(fc(x)))
        return self.head(x)


def build_dataset(model: ClusterModel, traces: list[ResampledTrace], t: int | None = None, label_next_segment: bool = True) -> list[LabeledWindow]:
    """Windows from consecutive segment pairs: standardized S_i labeled with
    the cluster of S_{i+1} (or of S_i when label_next_segment is off)."""
    t = t if t is not None else model.dim
    windows: list[LabeledWindow] = []
    for trace in traces:
        segments = segment_trace(trace, t)
        if len(segments) < 2:
            raise TraceTooShort(f"trace {trace.id!r} has fewer than 2 segments")
        labels = [label_segment(model, s).index for s in segments]
        for i in range(len(segments) - 1):
            target = labels[i + 1] if label_next_segment else labels[i]
            windows.append(LabeledWindow(trace.id, standardize_window(segments[i].values), target))
    return windows


def _split_by_trace(dataset: list[LabeledWindow], rng: np.random.Generator, train_fraction: float = 0.8):
    trace_ids = sorted({w.trace_id for w in dataset})
    order = rng.permutation(len(trace_ids))
    n_train = max(1, int(round(train_fraction * len(trace_ids))))
    if n_train == len(trace_ids) and len(trace_ids) > 1:
        n_train -= 1
    train_ids = {trace_ids[i] for i in order[:n_train]}
    train = [w for w in dataset if w.trace_id in train_ids]
    val = [w for w in dataset if w.trace_id not in train_ids]
    return train, val


def train(
    config: ConditionNetConfig,
    dataset: list[LabeledWindow],
    seed: int = 0,
) -> tuple[ConditionNet, TrainReport]:
    """Mini-batch Adam training with a per-trace 80/20 split.

    Loss is cross-entropy with inverse-frequency class weights; the returned
    parameters are the best-validation-accuracy snapshot.
    """
    if not dataset:
        raise DegenerateDataset("empty dataset")
    present = sorted({w.label for w in dataset})
    if len(present) < 2:
        raise ClassMissing(f"dataset covers {len(present)} class(es); need >= 2")
    counts = np.zeros(config.classes)
    for w in dataset:
        if w.label >= config.classes:
            raise ConditionNetError(f"label {w.label} >= classes {config.classes}")
        counts[w.label] += 1
    if any(0 < c < 2 for c in counts):
        raise DegenerateDataset("every present class needs at least 2 windows")
    weights = np.zeros(config.classes)
    nz = counts > 0
    weights[nz] = counts.sum() / (nz.sum() * counts[nz])

    rng = np.random.default_rng([seed, 0x5EED])
    train_set, val_set = _split_by_trace(dataset, rng)
    if not train_set or not val_set:
        raise DegenerateDataset("trace split left one side empty")

    net = ConditionNet(config, seed=seed)
    opt = nn.Adam(net.parameters(), lr=config.learning_rate)
    report = TrainReport()

    x_val = np.stack([w.values for w in val_set])
    y_val = np.array([w.label for w in val_set])

    best_state = net.state_dict()
    best_acc = -1.0
    for epoch in range(config.epochs):
        net.train()
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_set[i] for i in order[start : start + config.batch_size]]
            x = np.stack([w.values for w in batch])
            y = np.array([w.label for w in batch])
            logits = net(x)
            loss = nn.cross_entropy(logits, y, class_weights=weights)
            nn.backward(loss)
            opt.step()
            losses.append(loss.item())

        acc = accuracy(net, x_val, y_val)
        report.train_loss.append(float(np.mean(losses)))
        report.val_accuracy.append(acc)
        report.epochs_run = epoch + 1
        if acc > best_acc:
            best_acc = acc
            best_state = net.state_dict()
        if config.early_stop_acc is not None and acc >= config.early_stop_acc:
            break

    net.load_state_dict(best_state)
    net.eval()
    report.best_accuracy = best_acc
    return net, report


def accuracy(net: ConditionNet, windows: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    net.eval()
    hits = 0
    with nn.no_grad():
        for start in range(0, len(windows), batch_size):
            logits = net(windows[start : start + batch_size])
            hits += int((logits.data.argmax(axis=1) == labels[start : start + batch_size]).sum())
    return hits / len(windows)


def predict(net: ConditionNet, window: np.ndarray) -> tuple[ConditionLabel, float]:
    """Classify one 20 s window; returns (cluster label, softmax confidence).

    The window is standardized here (a no-op if already standardized).
    """
    v = standardize_window(window)
    if v.shape != (net.config.input_len,):
        raise nn.ShapeMismatch(f"window shape {v.shape} != ({net.config.input_len},)")
    net.eval()
    with nn.no_grad():
        probs = nn.softmax(net(v[None, :])).data[0]
    idx = int(np.argmax(probs))
    return ConditionLabel.cluster(idx), float(probs[idx])


def save_classifier(path, net: ConditionNet, cluster_fingerprint: str = "") -> None:
    cfg = net.config
    meta = {
        "config": {
            "input_len": cfg.input_len,
            "kernel_sizes": list(cfg.kernel_sizes),
            "conv_channels": list(cfg.conv_channels),
            "fc_sizes": list(cfg.fc_sizes),
            "classes": cfg.classes,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "epochs": cfg.epochs,
            "dropout": cfg.dropout,
            "se_reduction": cfg.se_reduction,
            "label_next_segment": cfg.label_next_segment,
        },
        "cluster_model": cluster_fingerprint,
    }
    nn.save_params(path, net.state_dict(), meta=meta)


def load_classifier(path) -> tuple[ConditionNet, dict]:
    state, meta = nn.load_params(path)
    cfg_doc = dict(meta["config"])
    cfg_doc["kernel_sizes"] = tuple(cfg_doc["kernel_sizes"])
    cfg_doc["conv_channels"] = tuple(cfg_doc["conv_channels"])
    cfg_doc["fc_sizes"] = tuple(cfg_doc["fc_sizes"])
    config = ConditionNetConfig(**cfg_doc)
    net = ConditionNet(config)
    net.load_state_dict(state)
    net.eval()
    return net, meta
