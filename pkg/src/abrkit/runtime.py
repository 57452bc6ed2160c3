"""Integrated streaming-session controller.

Every 20 s of session time the controller classifies the trailing
throughput window, runs the result through a 2-of-3 confidence gate, and
switches the active ABR model from the zoo accordingly.  Before 60 s of
history the general model answers all bitrate queries, but recognition
results are queued from the first window so the gate is warm when gating
begins.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .clustering import GENERAL, UNCERTAIN, ConditionLabel
from .policies import Observation, greedy_action
from .simulator import ChunkResult
from .training import ModelZoo, ZooMissingEntry

TICK_SECONDS = 20.0
WARMUP_SECONDS = 60.0
RING_SECONDS = 60.0


class SessionError(ValueError):
    pass


class ClassifierUnavailable(SessionError):
    pass


class ConfidenceGate:
    """Sliding-window admission of recognition results.

    A new result is admitted (becomes the active label) only when it equals
    at least two of the three most recent queued results; otherwise the
    active label is Uncertain for the coming window.  Every result is queued
    regardless.  ``include_current`` switches to the alternative reading in
    which the new result itself occupies a slot of the three.
    """

    def __init__(self, include_current: bool = False):
        self.window: deque[ConditionLabel] = deque(maxlen=3)
        self.include_current = include_current

    def update(self, result: ConditionLabel) -> tuple[bool, ConditionLabel]:
        if self.include_current:
            pool = list(self.window)[-2:] + [result]
        else:
            pool = list(self.window)
        admitted = sum(1 for r in pool if r == result) >= 2
        self.window.append(result)
        return admitted, (result if admitted else UNCERTAIN)


@dataclass
class TickEvent:
    clock: float
    result: ConditionLabel
    admitted: bool
    active: ConditionLabel

    def to_record(self) -> dict:
        return {
            "clock": self.clock,
            "result": self.result.key,
            "admitted": self.admitted,
            "active": self.active.key,
        }


@dataclass
class _Interval:
    start: float
    end: float
    rate_mbps: float


class SessionController:
    """Holds per-session state: the throughput ring, gate, and active model.

    ``classify`` maps a window of per-second throughput (length
    ``window_seconds``) to a ConditionLabel; the zoo supplies per-condition
    policies with a general fallback.
    """

    def __init__(
        self,
        classify,
        zoo: ModelZoo,
        window_seconds: int = int(TICK_SECONDS),
        tick_seconds: float = TICK_SECONDS,
        warmup_seconds: float = WARMUP_SECONDS,
        ring_seconds: float = RING_SECONDS,
        include_current: bool = False,
    ):
        if classify is None:
            raise ClassifierUnavailable("controller needs a classifier")
        self.classify = classify
        self.zoo = zoo
        self.window_seconds = window_seconds
        self.tick_seconds = tick_seconds
        self.warmup_seconds = warmup_seconds
        self.ring_seconds = ring_seconds
        self.gate = ConfidenceGate(include_current=include_current)
        self.clock = 0.0
        self.active: ConditionLabel = GENERAL
        self.intervals: list[_Interval] = []
        self.events: list[TickEvent] = []
        self._next_tick = tick_seconds

    # -- throughput ring -----------------------------------------------

    def _append_interval(self, duration: float, rate_mbps: float) -> None:
        if duration <= 0:
            return
        self.intervals.append(_Interval(self.clock, self.clock + duration, rate_mbps))
        self.clock += duration
        cutoff = self.clock - self.ring_seconds
        while self.intervals and self.intervals[0].end <= cutoff:
            self.intervals.pop(0)

    def ring_window(self, seconds: int | None = None) -> np.ndarray:
        """Trailing per-second mean throughput, oldest first."""
        seconds = seconds if seconds is not None else self.window_seconds
        out = np.zeros(seconds)
        t0 = self.clock - seconds
        for s in range(seconds):
            lo, hi = t0 + s, t0 + s + 1.0
            acc = 0.0
            weight = 0.0
            for iv in self.intervals:
                ov = min(iv.end, hi) - max(iv.start, lo)
                if ov > 0:
                    acc += ov * iv.rate_mbps
                    weight += ov
            out[s] = acc / weight if weight > 0 else 0.0
        return out

    # -- spec surface ----------------------------------------------------

    def observe(self, result: ChunkResult) -> None:
        """Fold one chunk into the ring and fire any 20 s ticks crossed.

        The chunk's measured rate (bits/download time) covers its download
        interval and holds across any buffer-cap sleep, so classification
        windows never contain gaps.
        """
        rate = result.throughput_mbps
        self._append_interval(result.download_time, rate)
        self._append_interval(result.sleep_time, rate)
        while self.clock >= self._next_tick:
            self._tick(self._next_tick)
            self._next_tick += self.tick_seconds

    def _tick(self, boundary: float) -> None:
        result = self.classify(self.ring_window())
        if boundary < self.warmup_seconds:
            # Warm-up: queue the result but keep the general model active.
            self.gate.window.append(result)
            self.events.append(TickEvent(boundary, result, False, self.active))
            return
        admitted, active = self.gate.update(result)
        self.active = active
        self.events.append(TickEvent(boundary, result, admitted, active))

    def decide(self, obs: Observation) -> int:
        """Greedy action of the active model (general during warm-up)."""
        label = self.active if self.clock >= self.warmup_seconds else GENERAL
        model = self.zoo.resolve(label)
        return greedy_action(model, obs)

    def events_jsonl(self) -> str:
        return "\n".join(json.dumps(e.to_record(), sort_keys=True) for e in self.events) + "\n"


def run_session(manifest, trace, controller: SessionController, qoe_params=None):
    """Run a full simulator episode under the controller's decisions."""
    from .simulator import QoEParams, run_episode

    qoe_params = qoe_params or QoEParams()
    return run_episode(
        manifest,
        trace,
        controller.decide,
        qoe_params,
        on_chunk=lambda result, state: controller.observe(result),
    )


def classifier_from_net(net):
    """Adapt a trained ConditionNet into the controller's classify callable."""
    from .condition_net import predict

    def classify(window: np.ndarray) -> ConditionLabel:
        label, _ = predict(net, window)
        return label

    return classify
