"""Condition-aware adaptive bitrate streaming toolkit.

Pieces: throughput trace handling (:mod:`abrkit.traces`), segment clustering
(:mod:`abrkit.clustering`), a from-scratch autodiff kernel
(:mod:`abrkit.nn`), the condition classifier (:mod:`abrkit.condition_net`),
a chunk-level simulator (:mod:`abrkit.simulator`), ABR policies and
actor-critic training (:mod:`abrkit.policies`, :mod:`abrkit.training`), the
confidence-gated session controller (:mod:`abrkit.runtime`), and the
experiment harness (:mod:`abrkit.harness`).
"""

__version__ = "0.1.0"
