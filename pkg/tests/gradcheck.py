"""Central finite-difference gradient oracle, independent of the kernel's
backward pass.  Loss closures must rebuild the forward graph on every call
so parameter perturbations take effect."""

import numpy as np

from abrkit import nn

EPS = 1e-3
TOL = 1e-4


def numeric_grad(build_loss, param, eps=EPS):
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = build_loss().item()
        flat[i] = orig - eps
        down = build_loss().item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def max_rel_error(build_loss, params, eps=EPS):
    """max over all parameter entries of |analytic - numeric| / (|numeric| + 1e-8)."""
    loss = build_loss()
    for p in params:
        p.zero_grad()
    nn.backward(loss)
    worst = 0.0
    for p in params:
        numeric = numeric_grad(build_loss, p, eps)
        rel = np.abs(p.grad - numeric) / (np.abs(numeric) + 1e-8)
        worst = max(worst, float(rel.max()))
    return worst


def assert_gradients_match(build_loss, params, eps=EPS, tol=TOL, what=""):
    worst = max_rel_error(build_loss, params, eps)
    assert worst <= tol, f"{what}: gradient mismatch, max rel err {worst:.3e} > {tol}"
    return worst


def generic_target_loss(forward, rng):
    """Loss builder probing all output directions: sum((out - target)^2).

    A random target keeps every gradient away from degenerate zeros (a plain
    sum of squares makes shift-parameter gradients vanish identically).
    """
    probe = {}

    def build():
        out = forward()
        if "target" not in probe:
            probe["target"] = rng.normal(size=out.shape)
        return nn.tsum(nn.square(out - nn.Tensor(probe["target"])))

    return build
