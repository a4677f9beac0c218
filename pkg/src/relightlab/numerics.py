"""Dense tensor arithmetic with reverse-mode autodiff, Adam, and a finite-difference oracle.

The op set is deliberately closed and small: affine, tanh, relu, softplus,
exp, log, elementwise add/mul/sub, scalar scale, sum/mean reductions, square,
elementwise minimum, and concatenation. Everything the training losses need
decomposes into these, which keeps the backward pass auditable.

Values are immutable ``Tensor`` objects (read-only numpy arrays, fp32 in
production, fp64 in test mode). A ``Tape`` records primitive applications in
topological order; ``backward`` walks it in reverse. Nodes behind
``stop_gradient`` receive a zero adjoint and propagate nothing upstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NumericsError",
    "ShapeMismatchError",
    "NonFiniteError",
    "Tensor",
    "Node",
    "Tape",
    "forward",
    "backward",
    "affine",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "square",
    "add",
    "sub",
    "mul",
    "scale",
    "minimum",
    "concat",
    "sum_all",
    "mean_all",
    "sum_rows",
    "stop_gradient",
    "neg",
    "clip",
    "AdamState",
    "adam_step",
    "finite_difference",
    "directional_derivative",
]

_ALLOWED_DTYPES = (np.float32, np.float64)


class NumericsError(Exception):
    """Base class for tensor-math errors."""


class ShapeMismatchError(NumericsError):
    """A primitive was applied to operands with incompatible extents."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class NonFiniteError(NumericsError):
    """A NaN or Inf appeared in a tensor value or gradient."""


def _all_finite(arr: np.ndarray) -> bool:
    # Single-reduction screen: a NaN or +/-Inf element always drives the sum
    # non-finite. A finite sum of overflow-scale values (~1e33+) could in
    # principle overflow too; values that large are a runaway worth erroring
    # on anyway. The exact two-pass check confirms before raising.
    if arr.size == 0:
        return True
    if math.isfinite(float(arr.sum())):
        return True
    return bool(np.isfinite(arr.min())) and bool(np.isfinite(arr.max()))


def _as_array(values, dtype) -> np.ndarray:
    # Always copy caller data: the result is frozen, and freezing a view of
    # the caller's array would lock them out of their own buffer.
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    if not _all_finite(arr):
        raise NonFiniteError("tensor holds non-finite elements")
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable dense value: a shape plus row-major real elements."""

    __slots__ = ("data",)

    def __init__(self, values, dtype=np.float32):
        if dtype not in _ALLOWED_DTYPES:
            raise NumericsError(f"unsupported dtype {dtype!r}; use float32 or float64")
        self.data = _as_array(values, dtype)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal: arr is a fresh op result; validate finiteness, freeze, skip copy.
        if not _all_finite(arr):
            raise NonFiniteError("op produced non-finite elements")
        t = cls.__new__(cls)
        if not arr.flags.c_contiguous or not arr.flags.owndata:
            arr = arr.copy(order="C")  # preserves 0-d shape, unlike ascontiguousarray
        arr.setflags(write=False)
        t.data = arr
        return t

    @classmethod
    def _borrow(cls, arr: np.ndarray, check: bool = True) -> "Tensor":
        # Internal: wrap a caller-owned array without copying or freezing it.
        # The caller promises not to mutate it while the tape is alive.
        if check and not _all_finite(arr):
            raise NonFiniteError("tensor holds non-finite elements")
        t = cls.__new__(cls)
        t.data = arr
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Node:
    """One value in a taped computation."""

    __slots__ = ("tape", "nid", "tensor", "needs_grad")

    def __init__(self, tape: "Tape", nid: int, tensor: Tensor, needs_grad: bool):
        self.tape = tape
        self.nid = nid
        self.tensor = tensor
        self.needs_grad = needs_grad

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple:
        return self.tensor.data.shape


@dataclass
class _Record:
    """A primitive application: op id, input node ids, output node id, backward closure."""

    op: str
    in_ids: tuple
    out_id: int
    backward_fn: object  # callable(out_adjoint, accumulate) -> None


class Tape:
    """Append-only record of primitive ops, in topological order (single writer)."""

    def __init__(self):
        self.records: list[_Record] = []
        self._next_id = 0
        self.leaves: list[Node] = []

    def _fresh_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def leaf(self, tensor: Tensor, requires_grad: bool = False) -> Node:
        """Register an input value (parameter or constant) on this tape."""
        if not isinstance(tensor, Tensor):
            raise NumericsError("leaf expects a Tensor")
        node = Node(self, self._fresh_id(), tensor, requires_grad)
        self.leaves.append(node)
        return node

    def constant(self, values, dtype=np.float32) -> Node:
        """Non-differentiable input. Arrays of the right dtype are borrowed
        un-checked (they are data-plumbing outputs, validated at their source);
        anything else goes through full Tensor validation."""
        if isinstance(values, np.ndarray) and values.dtype == dtype:
            return self.leaf(Tensor._borrow(values, check=False), requires_grad=False)
        return self.leaf(Tensor(values, dtype=dtype), requires_grad=False)

    def _emit(self, op: str, value: np.ndarray, inputs: tuple, backward_fn) -> Node:
        needs = any(n.needs_grad for n in inputs)
        node = Node(self, self._fresh_id(), Tensor._wrap(value), needs)
        if needs:
            self.records.append(_Record(op, tuple(n.nid for n in inputs), node.nid, backward_fn))
        return node


def _tape_of(op: str, *nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise NumericsError(f"{op}: operands belong to different tapes")
    return tape


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(op, f"operand extents {a.shape} vs {b.shape}")
    if a.value.dtype != b.value.dtype:
        raise ShapeMismatchError(op, f"operand dtypes {a.value.dtype} vs {b.value.dtype}")


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def affine(x: Node, w: Node, b: Node) -> Node:
    """x @ w + b for x of shape (B, n) or (n,), w (n, m), b (m,)."""
    tape = _tape_of("affine", x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if wv.ndim != 2 or bv.ndim != 1 or wv.shape[1] != bv.shape[0]:
        raise ShapeMismatchError("affine", f"weights {wv.shape} vs bias {bv.shape}")
    if xv.ndim not in (1, 2) or xv.shape[-1] != wv.shape[0]:
        raise ShapeMismatchError("affine", f"input {xv.shape} vs weights {wv.shape}")
    out = xv @ wv + bv

    def bwd(g, acc):
        if x.needs_grad:
            acc(x, g @ wv.T)
        if w.needs_grad:
            if xv.ndim == 1:
                acc(w, np.outer(xv, g))
            else:
                acc(w, xv.T @ g)
        if b.needs_grad:
            acc(b, g if g.ndim == 1 else g.sum(axis=0))

    return tape._emit("affine", out, (x, w, b), bwd)


def tanh(x: Node) -> Node:
    tape = _tape_of("tanh", x)
    y = np.tanh(x.value)

    def bwd(g, acc):
        acc(x, g * (1.0 - y * y))

    return tape._emit("tanh", y, (x,), bwd)


def relu(x: Node) -> Node:
    tape = _tape_of("relu", x)
    xv = x.value
    y = np.maximum(xv, 0.0)

    def bwd(g, acc):
        acc(x, g * (xv > 0.0))

    return tape._emit("relu", y, (x,), bwd)


def softplus(x: Node) -> Node:
    tape = _tape_of("softplus", x)
    xv = x.value
    # log(1+exp(x)) computed stably for large |x|
    y = np.logaddexp(0.0, xv).astype(xv.dtype)

    def bwd(g, acc):
        acc(x, g / (1.0 + np.exp(-xv)))

    return tape._emit("softplus", y, (x,), bwd)


def exp(x: Node) -> Node:
    tape = _tape_of("exp", x)
    y = np.exp(x.value)

    def bwd(g, acc):
        acc(x, g * y)

    return tape._emit("exp", y, (x,), bwd)


def log(x: Node) -> Node:
    tape = _tape_of("log", x)
    xv = x.value
    if np.any(xv <= 0.0):
        raise NumericsError("log: nonpositive argument")
    y = np.log(xv)

    def bwd(g, acc):
        acc(x, g / xv)

    return tape._emit("log", y, (x,), bwd)


def square(x: Node) -> Node:
    tape = _tape_of("square", x)
    xv = x.value

    def bwd(g, acc):
        acc(x, g * (2.0 * xv))

    return tape._emit("square", xv * xv, (x,), bwd)


def add(a: Node, b: Node) -> Node:
    tape = _tape_of("add", a, b)
    _same_shape("add", a, b)

    def bwd(g, acc):
        if a.needs_grad:
            acc(a, g)
        if b.needs_grad:
            acc(b, g)

    return tape._emit("add", a.value + b.value, (a, b), bwd)


def sub(a: Node, b: Node) -> Node:
    tape = _tape_of("sub", a, b)
    _same_shape("sub", a, b)

    def bwd(g, acc):
        if a.needs_grad:
            acc(a, g)
        if b.needs_grad:
            acc(b, -g)

    return tape._emit("sub", a.value - b.value, (a, b), bwd)


def mul(a: Node, b: Node) -> Node:
    tape = _tape_of("mul", a, b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value

    def bwd(g, acc):
        if a.needs_grad:
            acc(a, g * bv)
        if b.needs_grad:
            acc(b, g * av)

    return tape._emit("mul", av * bv, (a, b), bwd)


def scale(x: Node, c: float) -> Node:
    """Multiply by a python scalar constant."""
    tape = _tape_of("scale", x)
    cv = float(c)

    def bwd(g, acc):
        acc(x, g * cv)

    return tape._emit("scale", x.value * x.value.dtype.type(cv), (x,), bwd)


def minimum(a: Node, b: Node) -> Node:
    """Elementwise minimum; ties send the full adjoint to the first operand."""
    tape = _tape_of("minimum", a, b)
    _same_shape("minimum", a, b)
    av, bv = a.value, b.value
    take_a = av <= bv

    def bwd(g, acc):
        if a.needs_grad:
            acc(a, g * take_a)
        if b.needs_grad:
            acc(b, g * ~take_a)

    return tape._emit("minimum", np.where(take_a, av, bv), (a, b), bwd)


def concat(a: Node, b: Node) -> Node:
    """Concatenate along the last axis."""
    tape = _tape_of("concat", a, b)
    av, bv = a.value, b.value
    if av.ndim != bv.ndim or av.shape[:-1] != bv.shape[:-1]:
        raise ShapeMismatchError("concat", f"operand extents {av.shape} vs {bv.shape}")
    na = av.shape[-1]

    def bwd(g, acc):
        if a.needs_grad:
            acc(a, g[..., :na])
        if b.needs_grad:
            acc(b, g[..., na:])

    return tape._emit("concat", np.concatenate([av, bv], axis=-1), (a, b), bwd)


def sum_all(x: Node) -> Node:
    tape = _tape_of("sum_all", x)
    shape = x.shape
    dt = x.value.dtype

    def bwd(g, acc):
        acc(x, np.full(shape, g, dtype=dt))

    return tape._emit("sum_all", np.asarray(x.value.sum(), dtype=dt).reshape(()), (x,), bwd)


def mean_all(x: Node) -> Node:
    tape = _tape_of("mean_all", x)
    shape = x.shape
    n = x.value.size
    dt = x.value.dtype

    def bwd(g, acc):
        acc(x, np.full(shape, g / n, dtype=dt))

    return tape._emit("mean_all", np.asarray(x.value.mean(), dtype=dt).reshape(()), (x,), bwd)


def sum_rows(x: Node) -> Node:
    """Sum along the last axis: (..., n) -> (...)."""
    tape = _tape_of("sum_rows", x)
    if x.value.ndim < 1:
        raise ShapeMismatchError("sum_rows", f"needs ndim >= 1, got extents {x.shape}")
    n = x.shape[-1]

    def bwd(g, acc):
        acc(x, np.repeat(g[..., None], n, axis=-1))

    return tape._emit("sum_rows", x.value.sum(axis=-1), (x,), bwd)


def stop_gradient(x: Node) -> Node:
    """Mark a value as constant: zero adjoint, nothing propagates upstream."""
    node = Node(x.tape, x.tape._fresh_id(), x.tensor, False)
    return node


# ---------------------------------------------------------------------------
# Compositions (not new primitives)
# ---------------------------------------------------------------------------

def neg(x: Node) -> Node:
    return scale(x, -1.0)


_CONST_CACHE: dict = {}


def const_full(shape: tuple, value: float, dtype) -> np.ndarray:
    """Read-only cached constant array (shared across tapes; never mutated)."""
    dt = np.dtype(dtype)
    key = (shape, float(value), dt.str)
    arr = _CONST_CACHE.get(key)
    if arr is None:
        arr = np.full(shape, value, dtype=dt)
        arr.setflags(write=False)
        _CONST_CACHE[key] = arr
    return arr


def clip(x: Node, lo: float, hi: float) -> Node:
    """clamp(x, lo, hi) built from minimum and negation."""
    dt = x.value.dtype
    hi_c = x.tape.constant(const_full(x.shape, hi, dt), dtype=dt.type)
    neg_lo_c = x.tape.constant(const_full(x.shape, -lo, dt), dtype=dt.type)
    return neg(minimum(neg(minimum(x, hi_c)), neg_lo_c))


# ---------------------------------------------------------------------------
# forward / backward drivers
# ---------------------------------------------------------------------------

def forward(program, inputs, requires_grad=None):
    """Run ``program`` over fresh leaves for ``inputs``, recording a tape.

    ``program`` receives the leaf Nodes (one per input Tensor) and returns a
    Node or a sequence of Nodes. Returns (outputs, tape) with outputs as a list.
    """
    tape = Tape()
    if requires_grad is None:
        requires_grad = [True] * len(inputs)
    nodes = [tape.leaf(t, requires_grad=rg) for t, rg in zip(inputs, requires_grad)]
    out = program(*nodes)
    outputs = list(out) if isinstance(out, (list, tuple)) else [out]
    return outputs, tape


def backward(tape: Tape, seeds: dict) -> dict:
    """Reverse sweep over the tape.

    ``seeds`` maps output Nodes to adjoint arrays shaped like the outputs.
    Returns {leaf Node: gradient array} for every requires_grad leaf; leaves
    that no gradient reaches (e.g. behind stop_gradient) get exact zeros.
    """
    adjoints: dict[int, np.ndarray] = {}
    for node, seed in seeds.items():
        s = np.asarray(seed, dtype=node.value.dtype)
        if s.shape != node.shape:
            raise ShapeMismatchError(
                "backward", f"seed adjoint extents {s.shape} vs output {node.shape}"
            )
        adjoints[node.nid] = s.copy()

    def accumulate(node: Node, grad: np.ndarray) -> None:
        # First contribution is kept by reference; later ones allocate a fresh
        # sum (never in-place) since the stored array may be borrowed.
        prev = adjoints.get(node.nid)
        if prev is None:
            adjoints[node.nid] = grad
        else:
            adjoints[node.nid] = prev + grad

    for rec in reversed(tape.records):
        g = adjoints.get(rec.out_id)
        if g is None:
            continue
        rec.backward_fn(g, accumulate)

    grads = {}
    for leaf in tape.leaves:
        if not leaf.needs_grad:
            continue
        g = adjoints.get(leaf.nid)
        if g is None:
            g = np.zeros(leaf.shape, dtype=leaf.value.dtype)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("backward produced non-finite gradient")
        grads[leaf] = g
    return grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators plus a shared step counter."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    _scratch: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied in place on the param arrays.

    Returns (params, state) for convenience; both are the mutated inputs.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    step_size = state.lr / corr1
    for name, p in params.items():
        g = grads[name]
        if not _all_finite(g):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeMismatchError("adam_step", f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
            state._scratch[name] = np.empty_like(p)
        v = state.v[name]
        s = state._scratch[name]
        m *= b1
        np.multiply(g, 1.0 - b1, out=s)
        m += s
        v *= b2
        np.multiply(g, g, out=s)
        s *= 1.0 - b2
        v += s
        np.divide(v, corr2, out=s)
        np.sqrt(s, out=s)
        s += state.eps
        np.divide(m, s, out=s)
        s *= step_size
        p -= s
    return params, state


# ---------------------------------------------------------------------------
# Finite-difference oracle (fp64)
# ---------------------------------------------------------------------------

def finite_difference(f, params: dict, names=None, step: float = 1e-5, coords=None):
    """Central finite differences of scalar ``f(params)`` w.r.t. named fp64 arrays.

    ``coords`` optionally maps name -> iterable of flat indices to probe
    (default: every coordinate). Returns {name: {flat_index: derivative}}.
    """
    out: dict[str, dict[int, float]] = {}
    names = list(params.keys()) if names is None else list(names)
    for name in names:
        p = params[name]
        idxs = range(p.size) if coords is None else coords.get(name, ())
        flat = p.reshape(-1)
        d: dict[int, float] = {}
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f(params))
            flat[i] = orig - step
            lo = float(f(params))
            flat[i] = orig
            d[int(i)] = (hi - lo) / (2.0 * step)
        out[name] = d
    return out


def directional_derivative(f, params: dict, direction: dict, step: float = 1e-5) -> float:
    """Central-difference derivative of ``f`` along ``direction`` (same keys/shapes)."""
    base = {k: p.copy() for k, p in params.items()}
    for k, p in params.items():
        p += step * direction[k]
    hi = float(f(params))
    for k, p in params.items():
        np.copyto(p, base[k] - step * direction[k])
    lo = float(f(params))
    for k, p in params.items():
        np.copyto(p, base[k])
    return (hi - lo) / (2.0 * step)
