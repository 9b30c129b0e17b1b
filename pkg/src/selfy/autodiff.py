"""Tape-based reverse-mode differentiation and a finite-difference checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "grad", "tape", "requires_grad", "name")

    def __init__(self, value: np.ndarray, tape: "Tape | None" = None, requires_grad: bool = False, name: str = ""):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    out: Var
    inputs: tuple[Var, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Var] = field(default_factory=dict)

    def param(self, name: str, value: np.ndarray) -> Var:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        v = Var(value, self, requires_grad=True, name=name)
        self.params[name] = v
        return v

    def leaf(self, value: np.ndarray, requires_grad: bool = False, name: str = "") -> Var:
        return Var(np.asarray(value), self, requires_grad=requires_grad, name=name)

    def record(self, op: str, value: np.ndarray, inputs: Sequence[Var], backward) -> Var:
        inputs = tuple(inputs)
        needs = any(i.requires_grad for i in inputs)
        out = Var(value, self, requires_grad=needs)
        if needs:
            self.nodes.append(Node(op, out, inputs, backward))
        return out

    def release(self) -> None:
        """Drop recorded nodes so activations are freed without waiting for the cycle collector."""
        self.nodes.clear()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in self.params.items()
        }


def backward(tape: Tape, loss: Var) -> None:
    """Propagate d(loss) to every leaf with ``requires_grad``.

    Leaf gradients accumulate across calls; intermediate gradients do not.
    """
    if loss.value.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    owners: dict[int, Var] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.value.shape:
                raise RuntimeError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.value.shape}")
            key = id(inp)
            pending[key] = pending[key] + gi if key in pending else gi
            owners[key] = inp
    # reverse order guarantees everything left over is a leaf
    for key, g in pending.items():
        leaf = owners[key]
        if leaf.requires_grad:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradReport:
    max_rel_err: dict[str, float]
    coords_checked: dict[str, int]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def gradcheck(
    f: Callable[..., Var],
    inputs: Sequence[np.ndarray] | dict[str, np.ndarray],
    tol: float = 1e-6,
    h: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
    analytic: Callable[..., dict[str, np.ndarray]] | None = None,
) -> GradReport:
    """Compare tape gradients of ``f(tape, *vars) -> scalar Var`` with central differences.

    ``analytic`` overrides the gradient under test (used to inject faulty
    gradients in negative controls).
    """
    if isinstance(inputs, dict):
        names, arrays = list(inputs), [np.array(a, dtype=np.float64) for a in inputs.values()]
    else:
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        names = [f"input{i}" for i in range(len(arrays))]

    def evaluate(arrs, with_grad: bool):
        tape = Tape()
        vs = [tape.param(n, a) if with_grad else tape.leaf(a) for n, a in zip(names, arrs)]
        out = f(tape, *vs)
        if with_grad:
            backward(tape, out)
            return float(out.value), tape.grads()
        return float(out.value)

    if analytic is not None:
        grads = analytic(*arrays)
    else:
        _, grads = evaluate(arrays, True)

    rng = np.random.default_rng(seed)
    errs, counts = {}, {}
    for i, name in enumerate(names):
        size = arrays[i].size
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        worst = 0.0
        for c in coords:
            flat = arrays[i].reshape(-1)
            orig = flat[c]
            flat[c] = orig + h
            fp = evaluate(arrays, False)
            flat[c] = orig - h
            fm = evaluate(arrays, False)
            flat[c] = orig
            num = (fp - fm) / (2 * h)
            worst = max(worst, rel_err(float(grads[name].reshape(-1)[c]), num))
        errs[name] = worst
        counts[name] = len(coords)
    return GradReport(errs, counts, tol)
