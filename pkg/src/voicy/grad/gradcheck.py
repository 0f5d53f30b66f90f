"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .engine import GradError, Parameters, Tape, Var
from .layers import (
    GRU,
    LSTM,
    Activation,
    BiRecurrent,
    Concat,
    Conv1d,
    Downsample,
    LayerSpec,
    Linear,
    MeanPool,
    Upsample,
    init_params,
    run_graph,
)

MAX_FULL_CHECK = 10_000


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_path: str | None
    worst_index: tuple | None
    n_checked: int

    def __float__(self):
        return self.max_relative_error


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def graph_loss(graph: Sequence[LayerSpec], inputs: Sequence[np.ndarray], probe_seed: int = 0):
    """Scalar loss ``sum(probe * graph(inputs))`` with a fixed random probe."""

    def loss_fn(tape: Tape) -> Var:
        xs = [tape.constant(np.asarray(v, dtype=tape.dtype)) for v in inputs]
        out = run_graph(tape, graph, xs[0], xs[1:])
        probe = np.random.default_rng(probe_seed).standard_normal(out.shape)
        return ops.weighted_sum(out, probe)

    return loss_fn


def _scalar_loss(loss_fn, params: Parameters) -> float:
    tape = Tape(params)
    return float(loss_fn(tape).value)


def sample_coordinates(params: Parameters, max_scalars: int, seed: int = 0) -> list[tuple[str, tuple]]:
    """Trainable ``(path, index)`` pairs to perturb.

    All of them when there are at most ``max_scalars``; otherwise a seeded
    subsample that takes one scalar from every tensor before filling the
    remainder uniformly, so small tensors such as biases are never skipped.
    """
    paths = params.trainable_paths()
    coords = [(path, idx) for path in paths for idx in np.ndindex(params[path].shape)]
    if len(coords) <= max_scalars:
        return coords
    rng = np.random.default_rng(seed)
    starts = np.cumsum([0] + [params[p].size for p in paths])
    picks = {int(rng.integers(lo, hi)) for lo, hi in zip(starts[:-1], starts[1:]) if hi > lo}
    rest = np.setdiff1d(np.arange(len(coords)), sorted(picks))
    fill = min(max(0, max_scalars - len(picks)), rest.size)
    picks.update(int(i) for i in rng.choice(rest, size=fill, replace=False))
    return [coords[i] for i in sorted(picks)]


def gradient_check_report(
    loss_fn: Callable[[Tape], Var],
    params: Parameters,
    eps: float = 1e-5,
    seed: int = 0,
    max_scalars: int = MAX_FULL_CHECK,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients with central differences.

    Every trainable scalar is perturbed unless there are more than
    ``max_scalars`` (see :func:`sample_coordinates`). The relative error of
    each scalar is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise GradError("eps must lie in [1e-6, 1e-3]")
    tape = Tape(params)
    analytic = tape.backward(loss_fn(tape))

    coords = sample_coordinates(params, max_scalars, seed)

    worst = (0.0, None, None)
    for path, idx in coords:
        base = params[path]
        plus, minus = base.copy(), base.copy()
        plus[idx] += eps
        minus[idx] -= eps
        f_plus = _scalar_loss(loss_fn, params.replace({path: plus}))
        f_minus = _scalar_loss(loss_fn, params.replace({path: minus}))
        numeric = (f_plus - f_minus) / (2.0 * eps)
        err = relative_error(float(analytic[path][idx]), numeric, floor)
        if err > worst[0] or worst[1] is None:
            worst = (err, path, idx)
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords))


def gradient_check(graph, params: Parameters, inputs=(), eps: float = 1e-5, **kwargs) -> float:
    """Worst relative error for a layer graph (or a ``loss_fn(tape)`` callable)."""
    loss_fn = graph if callable(graph) else graph_loss(graph, inputs)
    return gradient_check_report(loss_fn, params, eps, **kwargs).max_relative_error


def layer_kind_cases(seed: int = 0) -> list[tuple[str, list, list]]:
    """One small graph per layer kind, as ``(label, graph, inputs)``.

    Parameter-free kinds sit behind a linear layer so there is something to
    differentiate. Sizes stay well under 64 units and 16 steps.
    """
    rng = np.random.default_rng(seed)

    def x(t, d):
        return [rng.standard_normal((t, d))]

    cases = [
        ("linear", [Linear("lin", 6, 5)], x(7, 6)),
        ("conv1d", [Conv1d("conv", 4, 5, 3)], x(9, 4)),
        ("gru_cell", [GRU("gru", 4, 6)], x(8, 4)),
        ("lstm_cell", [LSTM("lstm", 4, 6)], x(8, 4)),
        ("bidirectional_recurrent/lstm", [BiRecurrent("bi", 4, 5, "lstm")], x(8, 4)),
        ("bidirectional_recurrent/gru", [BiRecurrent("bi", 4, 5, "gru")], x(8, 4)),
    ]
    for fn in ("tanh", "sigmoid", "relu"):
        cases.append((f"activation/{fn}", [Linear("lin", 4, 5), Activation("act", fn)], x(6, 4)))
    cases += [
        ("temporal_downsample", [Linear("lin", 4, 5), Downsample("down", 3)], x(10, 4)),
        ("temporal_upsample", [Linear("lin", 4, 5), Upsample("up", 3, 10)], x(4, 4)),
        ("concat", [Linear("lin", 4, 5), Concat("cat")], x(6, 4) + x(6, 3)),
        ("mean_pool_time", [Linear("lin", 4, 5), MeanPool("pool")], x(6, 4)),
    ]
    return cases


def check_layer_kinds(eps: float = 1e-5, seed: int = 0) -> dict[str, GradCheckReport]:
    out = {}
    for label, graph, inputs in layer_kind_cases(seed):
        params = init_params(graph, seed)
        # nonzero biases so their gradients are exercised off the origin
        rng = np.random.default_rng(seed + 1)
        params = params.replace({p: rng.normal(0, 0.1, v.shape) for p, v in params.items() if v.ndim == 1})
        out[label] = gradient_check_report(graph_loss(graph, inputs, seed), params, eps, seed)
    return out
