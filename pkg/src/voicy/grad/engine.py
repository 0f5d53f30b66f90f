"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records every node created during a forward pass together
with a closure that maps the node's output gradient to its parents'
gradients.  Layers are coarse: a whole recurrent sweep is a single node with
a hand-written backward-through-time, so the tape stays short.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np


class GradError(ValueError):
    pass


class Parameters:
    """Named parameter arrays with a per-entry trainable flag.

    Arrays are never mutated in place; updates produce a new ``Parameters``.
    """

    def __init__(self, values: Mapping[str, np.ndarray], frozen: Iterable[str] = ()):
        self._values = dict(values)
        self._frozen = frozenset(frozen)
        unknown = self._frozen - self._values.keys()
        if unknown:
            raise GradError(f"frozen paths not present: {sorted(unknown)}")

    def __getitem__(self, path: str) -> np.ndarray:
        try:
            return self._values[path]
        except KeyError:
            raise GradError(f"unknown parameter {path!r}") from None

    def __contains__(self, path):
        return path in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def paths(self) -> list[str]:
        return list(self._values)

    def is_trainable(self, path: str) -> bool:
        return path in self._values and path not in self._frozen

    @property
    def frozen(self) -> frozenset:
        return self._frozen

    def trainable_paths(self) -> list[str]:
        return [p for p in self._values if p not in self._frozen]

    def replace(self, updates: Mapping[str, np.ndarray]) -> "Parameters":
        values = dict(self._values)
        for path, value in updates.items():
            if path not in values:
                raise GradError(f"unknown parameter {path!r}")
            values[path] = value
        return Parameters(values, self._frozen)

    def merge(self, other: "Parameters") -> "Parameters":
        overlap = self._values.keys() & other._values.keys()
        if overlap:
            raise GradError(f"duplicate parameter paths: {sorted(overlap)[:5]}")
        return Parameters({**self._values, **other._values}, self._frozen | other._frozen)

    def freeze(self, paths: Iterable[str]) -> "Parameters":
        return Parameters(self._values, self._frozen | frozenset(paths))

    def astype(self, dtype) -> "Parameters":
        return Parameters({k: v.astype(dtype) for k, v in self._values.items()}, self._frozen)

    def n_scalars(self, trainable_only: bool = False) -> int:
        paths = self.trainable_paths() if trainable_only else self._values
        return sum(self._values[p].size for p in paths)


class Var:
    __slots__ = ("value", "index", "tape")

    def __init__(self, value: np.ndarray, index: int, tape: "Tape"):
        self.value = value
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, index={self.index})"


BackwardFn = Callable[[np.ndarray], tuple]


class Tape:
    def __init__(self, params: Parameters | None = None, dtype=np.float64):
        self.params = params if params is not None else Parameters({})
        self.dtype = np.dtype(dtype)
        self.outputs: tuple = ()
        self.consumed = False
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[BackwardFn | None] = []
        self._requires: list[bool] = []
        self._param_index: dict[str, int] = {}

    def __len__(self):
        return len(self._parents)

    def _push(self, value, parents: tuple[int, ...], fn: BackwardFn | None, requires: bool) -> Var:
        self._parents.append(parents)
        self._backward.append(fn if requires else None)
        self._requires.append(requires)
        return Var(value, len(self._parents) - 1, self)

    def constant(self, value) -> Var:
        return self._push(np.asarray(value, dtype=self.dtype), (), None, False)

    def param(self, path: str) -> Var:
        if path in self._param_index:
            idx = self._param_index[path]
            return Var(self.params[path], idx, self)
        var = self._push(self.params[path], (), None, self.params.is_trainable(path))
        self._param_index[path] = var.index
        return var

    def op(self, value, parents: tuple[Var, ...], fn: BackwardFn) -> Var:
        """Record ``value`` computed from ``parents``.

        ``fn(grad)`` must return one gradient (or ``None``) per parent.
        """
        for p in parents:
            if p.tape is not self:
                raise GradError("cannot mix variables from different tapes")
        requires = any(self._requires[p.index] for p in parents)
        return self._push(value, tuple(p.index for p in parents), fn, requires)

    def backward(self, output: Var, grad=None) -> dict[str, np.ndarray]:
        if self.consumed:
            raise GradError("tape already consumed by a previous backward pass")
        self.consumed = True
        if grad is None:
            if output.value.size != 1:
                raise GradError("implicit gradient requires a scalar output")
            grad = np.ones_like(output.value)
        grad = np.asarray(grad, dtype=output.value.dtype)
        if grad.shape != output.value.shape:
            raise GradError(f"loss_grad shape {grad.shape} != output shape {output.value.shape}")

        grads: list[np.ndarray | None] = [None] * len(self._parents)
        grads[output.index] = grad
        requires = self._requires
        for i in range(output.index, -1, -1):
            g = grads[i]
            fn = self._backward[i]
            if g is None or fn is None:
                continue
            parent_grads = fn(g)
            for p, pg in zip(self._parents[i], parent_grads):
                if pg is None or not requires[p]:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
            grads[i] = None

        result = {}
        for path in self.params.trainable_paths():
            idx = self._param_index.get(path)
            g = grads[idx] if idx is not None else None
            result[path] = g if g is not None else np.zeros_like(self.params[path])
        return result
