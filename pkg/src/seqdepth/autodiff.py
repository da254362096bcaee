"""Reverse-mode differentiation over the tensor kernels.

Every op accepts either raw arrays or :class:`Node` objects. When at least one
argument is a Node the result is recorded on that node's :class:`Tape`;
otherwise the op just computes the array. Network code is therefore written
once and runs both untaped (inference, burn-in) and taped (training).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    DimensionMismatchError,
    GradientContractError,
    NumericalError,
    TapeIntegrityError,
)


class Node:
    __slots__ = ("id", "op", "inputs", "value", "grad", "tape", "name",
                 "requires_grad", "is_param", "_fwd", "_bwd")

    def __init__(self, tape, op, inputs, value, fwd=None, bwd=None,
                 requires_grad=False, name=None, is_param=False):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.name = name
        self.requires_grad = requires_grad
        self.is_param = is_param
        self._fwd = fwd
        self._bwd = bwd

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


class Tape:
    """Ordered record of the nodes created during one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def _add(self, node):
        self.nodes.append(node)
        return node

    def param(self, name, value) -> Node:
        """Leaf that receives a gradient. Reused when requested again under the same name."""
        node = self.params.get(name)
        if node is None or node.value is not value:
            node = self._add(Node(self, "param", (), value, requires_grad=True,
                                  name=name, is_param=True))
            self.params[name] = node
        return node

    def constant(self, value, name=None) -> Node:
        return self._add(Node(self, "const", (), value, name=name))

    def record(self, op, inputs, value, fwd, bwd) -> Node:
        for inp in inputs:
            if inp.tape is not self:
                raise TapeIntegrityError(f"{op}: input node {inp.id} belongs to another tape")
        req = any(inp.requires_grad for inp in inputs)
        return self._add(Node(self, op, tuple(inputs), value, fwd, bwd, req))

    def replay(self):
        """Recompute every non-leaf value from its inputs; returns the new values."""
        values = []
        for node in self.nodes:
            if node._fwd is None:
                values.append(node.value)
            else:
                values.append(node._fwd(*(values[i.id] for i in node.inputs)))
        return values

    def param_grads(self):
        return {name: node.grad for name, node in self.params.items()}


def _tape_of(args):
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeIntegrityError("op mixes nodes from different tapes")
    return tape


def value(x):
    return x.value if isinstance(x, Node) else x


def _lift(tape, args):
    return [a if isinstance(a, Node) else tape.constant(a) for a in args]


# Kink recording: ops with non-differentiable points log the side of the kink
# their inputs fall on, so the gradient checker can spot finite differences
# that straddle one.
_kink_log: list | None = None


@contextlib.contextmanager
def record_kinks():
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


def _log_kink(x):
    if _kink_log is not None:
        _kink_log.append(np.asarray(x) >= 0)


# -- primitive ops -----------------------------------------------------------

def conv2d(x, w, b, spec: T.ConvSpec):
    tape = _tape_of((x, w, b))
    xv, wv, bv = value(x), value(w), value(b)
    if tape is None:
        return T.conv2d(xv, wv, bv, spec)
    out, cols = T.conv2d(xv, wv, bv, spec, return_cols=True)
    in_shape = xv.shape
    o = wv.shape[0]

    def fwd(xv, wv, bv=None):
        return T.conv2d(xv, wv, bv, spec)

    def bwd(g, needs):
        g2 = g.reshape(o, -1)
        w2 = wv.reshape(o, -1)
        gx = gw = gb = None
        if needs[0]:
            gcols = w2.T @ g2
            if spec.kernel == (1, 1) and spec.stride == 1 and spec.pad == 0:
                gx = gcols.reshape(in_shape)
            else:
                gx = T.col2im(gcols, in_shape, spec.kernel, spec.stride, spec.pad)
        if needs[1]:
            gw = (g2 @ cols.T).reshape(wv.shape)
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=1)
        return gx, gw, gb

    inputs = _lift(tape, (x, w) if b is None else (x, w, b))
    return tape.record("conv2d", inputs, out, fwd, bwd)


def depth_to_space(x, block=2):
    if not isinstance(x, Node):
        return T.depth_to_space(x, block)

    def bwd(g, needs):
        return (T.space_to_depth(g, block),)

    return x.tape.record("depth_to_space", (x,), T.depth_to_space(x.value, block),
                         lambda v: T.depth_to_space(v, block), bwd)


def lrelu(x, alpha=0.1, variant="standard"):
    xv = value(x)
    _log_kink(xv)
    out = T.lrelu(xv, alpha, variant)
    if not isinstance(x, Node):
        return out
    a = xv.dtype.type(alpha)

    def bwd(g, needs):
        pos = xv >= 0  # kink at 0 takes the positive-branch slope
        if variant == "standard":
            return (np.where(pos, g, a * g),)
        return (np.where(pos, a * g, (a - 1) * g),)

    return x.tape.record("lrelu", (x,), out, lambda v: T.lrelu(v, alpha, variant), bwd)


def sigmoid(x):
    out = T.sigmoid(value(x))
    if not isinstance(x, Node):
        return out
    return x.tape.record("sigmoid", (x,), out, T.sigmoid,
                         lambda g, needs: (g * out * (1 - out),))


def tanh(x):
    out = np.tanh(value(x))
    if not isinstance(x, Node):
        return out
    return x.tape.record("tanh", (x,), out, np.tanh,
                         lambda g, needs: (g * (1 - out * out),))


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{op}: shape mismatch {a.shape} vs {b.shape}", "shape")


def add(a, b):
    tape = _tape_of((a, b))
    av, bv = value(a), value(b)
    _check_same(av, bv, "add")
    out = av + bv
    if tape is None:
        return out
    return tape.record("add", _lift(tape, (a, b)), out, np.add, lambda g, needs: (g, g))


def sub(a, b):
    tape = _tape_of((a, b))
    av, bv = value(a), value(b)
    _check_same(av, bv, "sub")
    out = av - bv
    if tape is None:
        return out
    return tape.record("sub", _lift(tape, (a, b)), out, np.subtract,
                       lambda g, needs: (g, -g if needs[1] else None))


def mul(a, b):
    tape = _tape_of((a, b))
    av, bv = value(a), value(b)
    _check_same(av, bv, "mul")
    out = av * bv
    if tape is None:
        return out

    def bwd(g, needs):
        return (g * bv if needs[0] else None, g * av if needs[1] else None)

    return tape.record("mul", _lift(tape, (a, b)), out, np.multiply, bwd)


def scale(x, s):
    xv = value(x)
    k = xv.dtype.type(s)
    out = xv * k
    if not isinstance(x, Node):
        return out
    return x.tape.record("scale", (x,), out, lambda v: v * k, lambda g, needs: (g * k,))


def channels(x, start, stop):
    """Channel slice ``x[start:stop]`` of a C x H x W tensor."""
    xv = value(x)
    out = xv[start:stop]
    if not isinstance(x, Node):
        return out
    shape, dtype = xv.shape, xv.dtype

    def bwd(g, needs):
        gx = np.zeros(shape, dtype=dtype)
        gx[start:stop] = g
        return (gx,)

    return x.tape.record("channels", (x,), out, lambda v: v[start:stop], bwd)


def total(x):
    """Sum of all elements, as a shape-(1,) tensor."""
    xv = value(x)
    out = np.array([xv.sum()], dtype=xv.dtype)
    if not isinstance(x, Node):
        return out
    shape = xv.shape
    return x.tape.record("sum", (x,), out,
                         lambda v: np.array([v.sum()], dtype=v.dtype),
                         lambda g, needs: (np.full(shape, g[0], dtype=g.dtype),))


def l1(yhat, y):
    """Sum of absolute differences, shape (1,). Subgradient at zero is 0."""
    tape = _tape_of((yhat, y))
    a, b = value(yhat), value(y)
    _check_same(a, b, "l1")
    diff = a - b
    _log_kink(diff)
    out = np.array([np.abs(diff).sum()], dtype=diff.dtype)
    if tape is None:
        return out

    def fwd(a, b):
        return np.array([np.abs(a - b).sum()], dtype=a.dtype)

    def bwd(g, needs):
        s = np.sign(diff) * g[0]
        return (s if needs[0] else None, -s if needs[1] else None)

    return tape.record("l1", _lift(tape, (yhat, y)), out, fwd, bwd)


def add_n(items):
    out = items[0]
    for it in items[1:]:
        out = add(out, it)
    return out


# -- reverse pass --------------------------------------------------------------

def backward(tape: Tape, loss: Node):
    """Accumulate d(loss)/d(node) for every node; return {param node id: grad}.

    Gradients from previous calls are discarded first, so repeated calls on
    the same tape give identical results.
    """
    if not isinstance(loss, Node) or loss.tape is not tape or \
            loss.id >= len(tape.nodes) or tape.nodes[loss.id] is not loss:
        raise TapeIntegrityError("loss node is not part of this tape")
    if loss.value.size != 1:
        raise GradientContractError(f"loss must be scalar, got shape {loss.value.shape}")

    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = node.grad
        if g is None or node._bwd is None or not node.requires_grad:
            continue
        needs = tuple(inp.requires_grad for inp in node.inputs)
        for inp, gi in zip(node.inputs, node._bwd(g, needs)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = gi
            else:
                inp.grad = inp.grad + gi
    for node in tape.nodes:
        if node.grad is None:
            node.grad = np.zeros_like(node.value)
    return {n.id: n.grad for n in tape.params.values()}


# -- finite-difference checker ---------------------------------------------------

@dataclass
class CheckEntry:
    input_index: int
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float
    kink: bool = False
    finite: bool = True


@dataclass
class CheckReport:
    tol: float
    epsilon: float
    entries: list[CheckEntry] = field(default_factory=list)

    @property
    def checked(self):
        return [e for e in self.entries if not e.kink]

    @property
    def n_kinks(self):
        return sum(e.kink for e in self.entries)

    @property
    def nonfinite(self):
        return [e for e in self.entries if not e.finite]

    @property
    def max_rel_error(self):
        errs = [e.rel_error for e in self.checked]
        return max(errs) if errs else 0.0

    @property
    def passed(self):
        return not self.nonfinite and bool(self.checked) and self.max_rel_error < self.tol

    def worst_by_input(self):
        out = {}
        for e in self.checked:
            out[e.input_index] = max(out.get(e.input_index, 0.0), e.rel_error)
        return out


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(builder, inputs, epsilon=1e-3, tol=1e-4, max_checks=256,
               seed=0, dtype=np.float64, wrt=None) -> CheckReport:
    """Compare reverse-mode gradients of ``builder(*inputs)`` with central differences.

    ``builder`` must be composed of this module's ops and return a scalar.
    Inputs are cast to ``dtype`` (float64 by default). At most ``max_checks``
    elements per input are probed, chosen at random. Elements whose finite
    difference crosses a kink of lrelu or l1 are flagged and excluded.
    """
    xs = [np.array(x, dtype=dtype) for x in inputs]
    wrt = range(len(xs)) if wrt is None else wrt
    tape = Tape()
    nodes = [tape.param(f"input{i}", x) if i in wrt else x for i, x in enumerate(xs)]
    loss = builder(*nodes)
    backward(tape, loss)
    rng = np.random.default_rng(seed)
    report = CheckReport(tol=tol, epsilon=epsilon)

    def evaluate():
        with record_kinks() as log:
            f = float(value(builder(*xs))[0])
        return f, log

    _, base_kinks = evaluate()
    for i in wrt:
        x = xs[i]
        g_ad = nodes[i].grad.reshape(-1)
        flat = x.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_checks else np.sort(rng.choice(n, max_checks, replace=False))
        for k in idx:
            orig = flat[k]
            flat[k] = orig + epsilon
            fp, kp = evaluate()
            flat[k] = orig - epsilon
            fm, km = evaluate()
            flat[k] = orig
            g_fd = (fp - fm) / (2 * epsilon)
            a = float(g_ad[k])
            finite = bool(np.isfinite(a) and np.isfinite(g_fd))
            kink = any(not np.array_equal(p, b) or not np.array_equal(m, b)
                       for p, m, b in zip(kp, km, base_kinks))
            err = relative_error(a, g_fd) if finite else float("inf")
            report.entries.append(CheckEntry(i, int(k), a, g_fd, err, kink, finite))
    return report


def assert_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")
