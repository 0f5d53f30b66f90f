"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import GradError, Parameters


class DivergedError(ArithmeticError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step, dict(self.m), dict(self.v))


def init_adam(params: Parameters, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = {p: np.zeros_like(params[p]) for p in params.trainable_paths()}
    return AdamState(lr, beta1, beta2, eps, 0, zeros, {p: z.copy() for p, z in zeros.items()})


def optimizer_step(params: Parameters, grads: dict, state: AdamState):
    """Return ``(new_params, new_state)``; inputs are left untouched.

    Raises :class:`DivergedError` before touching anything if a gradient is
    not finite.
    """
    for path in grads:
        if path not in params:
            raise GradError(f"gradient for unknown parameter {path!r}")
        if not params.is_trainable(path):
            raise GradError(f"gradient supplied for frozen parameter {path!r}")
    for path, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"diverged: non-finite gradient for {path!r}")

    new = state.copy()
    new.step = state.step + 1
    t = new.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    updates = {}
    for path, g in grads.items():
        m = b1 * state.m.get(path, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(path, 0.0) + (1.0 - b2) * g * g
        new.m[path] = m
        new.v[path] = v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        updates[path] = (params[path] - step).astype(params[path].dtype)
    return params.replace(updates), new


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total
