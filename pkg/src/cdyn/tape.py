"""Reverse-mode differentiation over a fixed operator set, plus Adam and a
finite-difference gradient verifier.

The tape is a static graph: `input` declares a named parameter block (its
position defines the layout of the flat parameter vector), `constant` embeds
data, and the op builders append nodes whose arguments must reference
earlier nodes, so evaluation order is acyclic by construction. `forward`
caches every intermediate value; `backward` replays the graph in reverse and
returns the gradient of the marked loss with respect to the flat parameter
vector.

Operator set (closed): matmul, add, mul, tanh, leaky_relu, exp, log,
square, sum, mean, concat, slice, softplus. Convenience builders (neg, sub,
scale, abs) lower onto this set. add/mul support the numpy broadcasts
(B,n)+(1,n), (B,n)+(B,1), (B,n)+(1,1); everything is 2-D float64.

All functions here are pure given (inputs, seed); repeated execution is
bit-identical. One tape is single-threaded; independent tapes may run
concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ComputeError, ValidationError

LEAKY_SLOPE = 0.2


class TapeError(ValidationError):
    """Malformed graph or shape mismatch; message names the offending node."""


@dataclass
class _Node:
    op: str
    args: tuple[int, ...]
    shape: tuple[int, int]
    aux: object = None


def _check_2d(value: np.ndarray) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise TapeError(f"constant must be 2-D, got shape {arr.shape}")
    return arr


def _broadcast_shape(op: str, node_id: int, a: tuple[int, int], b: tuple[int, int]) -> tuple[int, int]:
    out = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise TapeError(f"node {node_id} ({op}): shapes {a} and {b} do not broadcast")
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# Forward rules: (node, arg_values) -> value. Kept in a module-level table so
# fault-injection tests can monkeypatch individual rules.
FORWARD_RULES: dict[str, Callable] = {
    "input": lambda node, vals: vals[0],
    "constant": lambda node, vals: node.aux,
    "matmul": lambda node, vals: vals[0] @ vals[1],
    "add": lambda node, vals: vals[0] + vals[1],
    "mul": lambda node, vals: vals[0] * vals[1],
    "tanh": lambda node, vals: np.tanh(vals[0]),
    "leaky_relu": lambda node, vals: np.where(vals[0] >= 0.0, vals[0], LEAKY_SLOPE * vals[0]),
    "exp": lambda node, vals: np.exp(vals[0]),
    "log": lambda node, vals: np.log(vals[0]),
    "square": lambda node, vals: vals[0] * vals[0],
    "softplus": lambda node, vals: np.logaddexp(0.0, vals[0]),
    "sum": lambda node, vals: np.array([[vals[0].sum()]]),
    "mean": lambda node, vals: np.array([[vals[0].mean()]]),
    "concat": lambda node, vals: np.concatenate(vals, axis=node.aux),
    "slice": lambda node, vals: vals[0][node.aux[0]:node.aux[1], node.aux[2]:node.aux[3]],
}


def _bw_matmul(node, values, grad, out):
    a, b = values[node.args[0]], values[node.args[1]]
    out(node.args[0], grad @ b.T)
    out(node.args[1], a.T @ grad)


def _bw_add(node, values, grad, out):
    for arg in node.args:
        out(arg, _unbroadcast(grad, values[arg].shape))


def _bw_mul(node, values, grad, out):
    a, b = values[node.args[0]], values[node.args[1]]
    out(node.args[0], _unbroadcast(grad * b, a.shape))
    out(node.args[1], _unbroadcast(grad * a, b.shape))


def _bw_concat(node, values, grad, out):
    axis = node.aux
    start = 0
    for arg in node.args:
        width = values[arg].shape[axis]
        if axis == 0:
            out(arg, grad[start:start + width, :])
        else:
            out(arg, grad[:, start:start + width])
        start += width


def _bw_slice(node, values, grad, out):
    r0, r1, c0, c1 = node.aux
    full = np.zeros_like(values[node.args[0]])
    full[r0:r1, c0:c1] = grad
    out(node.args[0], full)


BACKWARD_RULES: dict[str, Callable] = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "mul": _bw_mul,
    "tanh": lambda node, values, grad, out: out(
        node.args[0], grad * (1.0 - np.square(np.tanh(values[node.args[0]])))
    ),
    "leaky_relu": lambda node, values, grad, out: out(
        node.args[0], grad * np.where(values[node.args[0]] >= 0.0, 1.0, LEAKY_SLOPE)
    ),
    "exp": lambda node, values, grad, out: out(node.args[0], grad * np.exp(values[node.args[0]])),
    "log": lambda node, values, grad, out: out(node.args[0], grad / values[node.args[0]]),
    "square": lambda node, values, grad, out: out(node.args[0], grad * 2.0 * values[node.args[0]]),
    "softplus": lambda node, values, grad, out: out(node.args[0], grad * _sigmoid(values[node.args[0]])),
    "sum": lambda node, values, grad, out: out(
        node.args[0], np.full(values[node.args[0]].shape, float(grad[0, 0]))
    ),
    "mean": lambda node, values, grad, out: out(
        node.args[0],
        np.full(values[node.args[0]].shape, float(grad[0, 0]) / values[node.args[0]].size),
    ),
    "concat": _bw_concat,
    "slice": _bw_slice,
}


class Tape:
    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._input_segments: list[tuple[int, int, int]] = []  # (node_id, offset, size)
        self.n_params = 0
        self._loss: int | None = None
        self._values: list[np.ndarray | None] = []
        self._forward_done = False

    # -- graph construction ------------------------------------------------

    def _append(self, op: str, args: tuple[int, ...], shape: tuple[int, int], aux: object = None) -> int:
        nid = len(self._nodes)
        for a in args:
            if not (0 <= a < nid):
                raise TapeError(f"node {nid} ({op}): argument {a} does not reference an earlier node")
        self._nodes.append(_Node(op, args, shape, aux))
        self._values.append(None)
        return nid

    def input(self, shape: tuple[int, int]) -> int:
        shape = (int(shape[0]), int(shape[1]))
        size = shape[0] * shape[1]
        nid = self._append("input", (), shape)
        self._input_segments.append((nid, self.n_params, size))
        self.n_params += size
        return nid

    def constant(self, value) -> int:
        arr = _check_2d(value)
        return self._append("constant", (), arr.shape, arr)

    def matmul(self, a: int, b: int) -> int:
        sa, sb = self._nodes[a].shape, self._nodes[b].shape
        if sa[1] != sb[0]:
            raise TapeError(f"node {len(self._nodes)} (matmul): inner dims {sa} @ {sb} differ")
        return self._append("matmul", (a, b), (sa[0], sb[1]))

    def add(self, a: int, b: int) -> int:
        shape = _broadcast_shape("add", len(self._nodes), self._nodes[a].shape, self._nodes[b].shape)
        return self._append("add", (a, b), shape)

    def mul(self, a: int, b: int) -> int:
        shape = _broadcast_shape("mul", len(self._nodes), self._nodes[a].shape, self._nodes[b].shape)
        return self._append("mul", (a, b), shape)

    def _unary(self, op: str, a: int) -> int:
        return self._append(op, (a,), self._nodes[a].shape)

    def tanh(self, a: int) -> int:
        return self._unary("tanh", a)

    def leaky_relu(self, a: int) -> int:
        return self._unary("leaky_relu", a)

    def exp(self, a: int) -> int:
        return self._unary("exp", a)

    def log(self, a: int) -> int:
        return self._unary("log", a)

    def square(self, a: int) -> int:
        return self._unary("square", a)

    def softplus(self, a: int) -> int:
        return self._unary("softplus", a)

    def sum(self, a: int) -> int:
        return self._append("sum", (a,), (1, 1))

    def mean(self, a: int) -> int:
        return self._append("mean", (a,), (1, 1))

    def concat(self, parts: list[int], axis: int) -> int:
        if axis not in (0, 1):
            raise TapeError(f"node {len(self._nodes)} (concat): axis must be 0 or 1")
        if not parts:
            raise TapeError(f"node {len(self._nodes)} (concat): needs at least one part")
        other = 1 - axis
        base = self._nodes[parts[0]].shape
        total = 0
        for pid in parts:
            sp = self._nodes[pid].shape
            if sp[other] != base[other]:
                raise TapeError(
                    f"node {len(self._nodes)} (concat): shape {sp} incompatible with {base} on axis {axis}"
                )
            total += sp[axis]
        shape = (total, base[1]) if axis == 0 else (base[0], total)
        return self._append("concat", tuple(parts), shape, axis)

    def slice(self, a: int, r0: int, r1: int, c0: int, c1: int) -> int:
        sa = self._nodes[a].shape
        if not (0 <= r0 <= r1 <= sa[0] and 0 <= c0 <= c1 <= sa[1]):
            raise TapeError(f"node {len(self._nodes)} (slice): bounds {(r0, r1, c0, c1)} outside {sa}")
        return self._append("slice", (a,), (r1 - r0, c1 - c0), (r0, r1, c0, c1))

    # -- sugar lowering onto the closed op set ------------------------------

    def scale(self, a: int, s: float) -> int:
        return self.mul(a, self.constant([[float(s)]]))

    def neg(self, a: int) -> int:
        return self.scale(a, -1.0)

    def sub(self, a: int, b: int) -> int:
        return self.add(a, self.neg(b))

    def abs(self, a: int) -> int:
        # |x| = 1.25 * (lrelu(x) + lrelu(-x)) with slope 0.2; derivative at 0 is 0,
        # matching the L1 subgradient convention.
        return self.scale(self.add(self.leaky_relu(a), self.leaky_relu(self.neg(a))), 1.25)

    # -- execution -----------------------------------------------------------

    def mark_loss(self, a: int) -> None:
        if self._nodes[a].shape != (1, 1):
            raise TapeError(f"loss node {a} must be scalar, has shape {self._nodes[a].shape}")
        self._loss = a

    def shape(self, a: int) -> tuple[int, int]:
        return self._nodes[a].shape

    def value(self, a: int) -> np.ndarray:
        if not self._forward_done:
            raise TapeError("value requested before forward")
        return self._values[a]

    def forward(self, params: np.ndarray) -> float:
        if self._loss is None:
            raise TapeError("no loss node marked")
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != self.n_params:
            raise TapeError(f"parameter vector has {params.size} entries, tape expects {self.n_params}")
        values = self._values
        for nid, offset, size in self._input_segments:
            values[nid] = params[offset:offset + size].reshape(self._nodes[nid].shape)
        for nid, node in enumerate(self._nodes):
            op = node.op
            if op == "input":
                continue
            if op == "constant":
                values[nid] = node.aux
                continue
            rule = FORWARD_RULES[op]
            args = [values[a] for a in node.args]
            value = rule(node, args)
            if value.shape != node.shape:
                raise TapeError(f"node {nid} ({op}): produced shape {value.shape}, declared {node.shape}")
            values[nid] = value
        self._forward_done = True
        return float(values[self._loss][0, 0])

    def backward(self) -> np.ndarray:
        if not self._forward_done:
            raise TapeError("backward called before forward")
        values = self._values
        adjoints: list[np.ndarray | None] = [None] * len(self._nodes)
        adjoints[self._loss] = np.ones((1, 1))

        def accumulate(nid: int, contribution: np.ndarray) -> None:
            if adjoints[nid] is None:
                adjoints[nid] = contribution
            else:
                adjoints[nid] = adjoints[nid] + contribution

        for nid in range(len(self._nodes) - 1, -1, -1):
            grad = adjoints[nid]
            if grad is None:
                continue
            node = self._nodes[nid]
            if node.op in ("input", "constant"):
                continue
            BACKWARD_RULES[node.op](node, values, grad, accumulate)

        flat = np.zeros(self.n_params)
        for nid, offset, size in self._input_segments:
            g = adjoints[nid]
            if g is not None:
                flat[offset:offset + size] = g.ravel()
        return flat


def tape_forward(tape: Tape, inputs: np.ndarray) -> float:
    return tape.forward(inputs)


def tape_backward(tape: Tape) -> np.ndarray:
    return tape.backward()


def finite_diff_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
                      params: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    `loss_fn` must return (loss, gradient). Raises ComputeError if the loss is
    non-finite at any perturbed point.
    """
    if h <= 0:
        raise ValidationError("finite_diff_check: h must be positive")
    params = np.asarray(params, dtype=np.float64).ravel()
    if not np.all(np.isfinite(params)):
        raise ValidationError("finite_diff_check: parameters must be finite")
    _, grad = loss_fn(params)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    worst = 0.0
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + h
        f_plus, _ = loss_fn(work)
        work[i] = orig - h
        f_minus, _ = loss_fn(work)
        work[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ComputeError(f"finite_diff_check: non-finite loss at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
        if err > worst:
            worst = err
    return worst


@dataclass
class AdamState:
    """Adam accumulators; step increments by exactly one per update."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)  # type: ignore[assignment]
    v: np.ndarray = field(default=None)  # type: ignore[assignment]

    @classmethod
    def init(cls, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
                   m=np.zeros(n_params), v=np.zeros(n_params))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[np.ndarray, AdamState]:
    params = np.asarray(params, dtype=np.float64).ravel()
    grads = np.asarray(grads, dtype=np.float64).ravel()
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValidationError(
            f"adam_step: shape mismatch params {params.shape} grads {grads.shape} state {state.m.shape}"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise ComputeError(f"adam_step: non-finite gradient at coordinate {int(bad[0])}")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps=state.eps, step=step, m=m, v=v)
    return new_params, new_state
