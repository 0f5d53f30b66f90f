"""Declarative layer graphs.

A graph is a sequence of :class:`LayerSpec` applied one after the other.
Parameter paths are ``"<layer name>.<weight>"``; bidirectional layers nest
one level deeper (``"<name>.fwd.Wx"``, ``"<name>.bwd.Wx"``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from .engine import GradError, Parameters, Tape, Var

LAYER_KINDS = (
    "linear",
    "conv1d",
    "gru_cell",
    "lstm_cell",
    "bidirectional_recurrent",
    "activation",
    "temporal_downsample",
    "temporal_upsample",
    "concat",
    "mean_pool_time",
)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise GradError(f"unknown layer kind {self.kind!r}")

    def opt(self, key, default=None):
        return self.options.get(key, default)


def Linear(name, in_dim, out_dim, bias=True):
    return LayerSpec("linear", name, {"in_dim": in_dim, "out_dim": out_dim, "bias": bias})


def Conv1d(name, in_dim, out_dim, kernel=5):
    return LayerSpec("conv1d", name, {"in_dim": in_dim, "out_dim": out_dim, "kernel": kernel})


def GRU(name, in_dim, hidden):
    return LayerSpec("gru_cell", name, {"in_dim": in_dim, "hidden": hidden})


def LSTM(name, in_dim, hidden):
    return LayerSpec("lstm_cell", name, {"in_dim": in_dim, "hidden": hidden})


def BiRecurrent(name, in_dim, hidden, cell="lstm"):
    return LayerSpec(
        "bidirectional_recurrent", name, {"in_dim": in_dim, "hidden": hidden, "cell": cell}
    )


def Activation(name, fn):
    return LayerSpec("activation", name, {"fn": fn})


def Downsample(name, factor):
    return LayerSpec("temporal_downsample", name, {"factor": factor})


def Upsample(name, factor, length=None):
    return LayerSpec("temporal_upsample", name, {"factor": factor, "length": length})


def Concat(name):
    return LayerSpec("concat", name)


def MeanPool(name):
    return LayerSpec("mean_pool_time", name)


def _recurrent_shapes(prefix, cell, in_dim, hidden):
    if cell in ("gru", "gru_cell"):
        return {
            f"{prefix}.Wx": (in_dim, 3 * hidden),
            f"{prefix}.Wh": (hidden, 3 * hidden),
            f"{prefix}.bx": (3 * hidden,),
            f"{prefix}.bh": (3 * hidden,),
        }
    if cell in ("lstm", "lstm_cell"):
        return {
            f"{prefix}.Wx": (in_dim, 4 * hidden),
            f"{prefix}.Wh": (hidden, 4 * hidden),
            f"{prefix}.b": (4 * hidden,),
        }
    raise GradError(f"unknown recurrent cell {cell!r}")


def parameter_shapes(spec: LayerSpec) -> dict[str, tuple]:
    kind, name = spec.kind, spec.name
    if kind == "linear":
        shapes = {f"{name}.W": (spec.opt("in_dim"), spec.opt("out_dim"))}
        if spec.opt("bias", True):
            shapes[f"{name}.b"] = (spec.opt("out_dim"),)
        return shapes
    if kind == "conv1d":
        k = spec.opt("kernel", 5)
        return {
            f"{name}.W": (k, spec.opt("in_dim"), spec.opt("out_dim")),
            f"{name}.b": (spec.opt("out_dim"),),
        }
    if kind in ("gru_cell", "lstm_cell"):
        return _recurrent_shapes(name, kind, spec.opt("in_dim"), spec.opt("hidden"))
    if kind == "bidirectional_recurrent":
        cell, d, h = spec.opt("cell", "lstm"), spec.opt("in_dim"), spec.opt("hidden")
        return {
            **_recurrent_shapes(f"{name}.fwd", cell, d, h),
            **_recurrent_shapes(f"{name}.bwd", cell, d, h),
        }
    return {}


def output_dim(spec: LayerSpec, in_dim: int) -> int:
    if spec.kind in ("linear", "conv1d"):
        return spec.opt("out_dim")
    if spec.kind in ("gru_cell", "lstm_cell"):
        return spec.opt("hidden")
    if spec.kind == "bidirectional_recurrent":
        return 2 * spec.opt("hidden")
    return in_dim


def path_seed(seed: int, path: str) -> int:
    digest = hashlib.sha256(f"{seed}:{path}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def glorot_uniform(shape: tuple, seed: int, path: str, dtype=np.float64) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) over the last two axes."""
    rng = np.random.default_rng(path_seed(seed, path))
    receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
    fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(
    graph: Sequence[LayerSpec], seed: int, dtype=np.float64, frozen: bool = False
) -> Parameters:
    values = {}
    for spec in graph:
        for path, shape in parameter_shapes(spec).items():
            if path in values:
                raise GradError(f"duplicate parameter path {path!r}")
            if len(shape) == 1:
                values[path] = np.zeros(shape, dtype=dtype)
            else:
                values[path] = glorot_uniform(shape, seed, path, dtype)
    return Parameters(values, frozen=values.keys() if frozen else ())


def _recurrent(tape: Tape, prefix: str, cell: str, x: Var, reverse: bool = False) -> Var:
    if cell in ("gru", "gru_cell"):
        return ops.gru(
            x,
            tape.param(f"{prefix}.Wx"),
            tape.param(f"{prefix}.Wh"),
            tape.param(f"{prefix}.bx"),
            tape.param(f"{prefix}.bh"),
            reverse=reverse,
            name=prefix,
        )
    return ops.lstm(
        x,
        tape.param(f"{prefix}.Wx"),
        tape.param(f"{prefix}.Wh"),
        tape.param(f"{prefix}.b"),
        reverse=reverse,
        name=prefix,
    )


def apply_layer(tape: Tape, spec: LayerSpec, x: Var, extra: Sequence[Var] = ()) -> Var:
    """Apply one layer; ``extra`` supplies the additional operands of ``concat``."""
    kind, name = spec.kind, spec.name
    if kind == "linear":
        b = tape.param(f"{name}.b") if spec.opt("bias", True) else None
        return ops.linear(x, tape.param(f"{name}.W"), b, name=name)
    if kind == "conv1d":
        return ops.conv1d(x, tape.param(f"{name}.W"), tape.param(f"{name}.b"), name=name)
    if kind in ("gru_cell", "lstm_cell"):
        return _recurrent(tape, name, kind, x)
    if kind == "bidirectional_recurrent":
        cell = spec.opt("cell", "lstm")
        fwd = _recurrent(tape, f"{name}.fwd", cell, x)
        bwd = _recurrent(tape, f"{name}.bwd", cell, x, reverse=True)
        return ops.concat([fwd, bwd])
    if kind == "activation":
        fn = spec.opt("fn")
        if fn not in ops.ACTIVATIONS:
            raise GradError(f"{name}: unknown activation {fn!r}")
        return ops.ACTIVATIONS[fn](x)
    if kind == "temporal_downsample":
        return ops.temporal_downsample(x, spec.opt("factor"))
    if kind == "temporal_upsample":
        factor = spec.opt("factor")
        length = spec.opt("length")
        if length is None:
            length = (1 if x.value.ndim == 1 else x.shape[0]) * factor
        return ops.temporal_upsample(x, factor, length)
    if kind == "concat":
        return ops.concat([x, *extra])
    if kind == "mean_pool_time":
        return ops.mean_pool_time(x)
    raise GradError(f"unhandled layer kind {kind!r}")


def run_graph(tape: Tape, graph: Sequence[LayerSpec], x: Var, extras: Sequence[Var] = ()) -> Var:
    extras = list(extras)
    for spec in graph:
        if spec.kind == "concat":
            n = spec.opt("n_extra", 1)
            taken, extras = extras[:n], extras[n:]
            if len(taken) != n:
                raise GradError(f"{spec.name}: concat needs {n} extra input(s)")
            x = apply_layer(tape, spec, x, taken)
        else:
            x = apply_layer(tape, spec, x)
    return x


def forward(graph: Sequence[LayerSpec], params: Parameters, *inputs, dtype=np.float64):
    """Run a sequential graph; returns ``(output, tape)``.

    The first input flows through the layers; any further inputs are consumed
    in order by ``concat`` layers.
    """
    if not inputs:
        raise GradError("forward needs at least one input")
    tape = Tape(params, dtype=dtype)
    xs = [tape.constant(np.asarray(v, dtype=dtype)) for v in inputs]
    out = run_graph(tape, graph, xs[0], xs[1:])
    tape.outputs = (out,)
    return out, tape


def backward(tape: Tape, loss_grad=None, output: Var | None = None) -> dict[str, np.ndarray]:
    """Gradients of every trainable parameter; frozen parameters get no entry."""
    if output is None:
        if not tape.outputs:
            raise GradError("tape has no recorded output")
        output = tape.outputs[0]
    return tape.backward(output, loss_grad)
