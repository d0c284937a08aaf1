"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Ops record onto the innermost active ``Tape`` (entered as a context manager).
With no tape active they run detached, which is how inference and finite
differences are evaluated. The tape's node order is construction order, hence
topological; ``Tape.backward`` replays it once in reverse and supports exactly
one replay (a second call raises).

Feature maps are stored channel-major ``(c, h, w)``; the recurrent layers use
``(h, w, c)``. Broadcasting is deliberately unsupported beyond scalar
``scale`` and the explicit ``add_bias``.
"""

from __future__ import annotations

import numpy as np

from . import precision


class Tensor:
    """N-d float array, optionally participating in the active gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "tape")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=precision.active_dtype())
        if not np.isfinite(arr).all():
            raise ValueError("tensor data must be finite (no NaN/Inf)")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape = None

    @classmethod
    def _from_data(cls, arr, requires_grad):
        # internal fast path for op outputs: no copy, no finiteness sweep
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t.tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of differentiable ops; one backward replay per tape."""

    def __init__(self):
        self.nodes = []
        self._spent = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: unbalanced enter/exit")
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        """Seed d(loss)/d(loss)=1 and accumulate grads in reverse node order."""
        if self._spent:
            raise RuntimeError("tape already replayed; record onto a fresh tape")
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = getattr(loss, "shape", None)
            raise ValueError(f"backward root must be a scalar tensor, got shape {shape}")
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("backward root is not finite")
        if self.nodes and not any(n.output is loss for n in self.nodes):
            raise ValueError("loss was not produced on this tape")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward_fn(g)


def backward(loss):
    """Replay the tape that recorded ``loss`` (module-level convenience)."""
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ValueError("loss is not on a tape")
    loss.tape.backward(loss)


def apply_op(op, inputs, out_data, backward_fn):
    """Wrap ``out_data`` as the result of ``op`` and record it if a tape is live.

    ``backward_fn(grad_out)`` must accumulate into each input's ``.grad``
    (``accumulate_grad`` does this safely). Custom ops built on this hook are
    first-class citizens of ``grad_check``.
    """
    tape = active_tape()
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._from_data(out_data, needs_grad and tape is not None)
    if tape is not None and needs_grad:
        out.tape = tape
        tape.nodes.append(TapeNode(op, tuple(inputs), out, backward_fn))
    return out


def accumulate_grad(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may alias a downstream grad buffer
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# leaf constructors (PRNG: numpy Generator over PCG64, reproducible per seed)

def _check_shape(shape):
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise ValueError(f"invalid shape {shape}: need >= 1 dims, every dim >= 1")
    return shape


def rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False, name=None):
    shape = _check_shape(shape)
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def constant(shape, value, requires_grad=False, name=None):
    shape = _check_shape(shape)
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad, name=name)


def gaussian(shape, std, seed, requires_grad=False, name=None):
    shape = _check_shape(shape)
    if not std > 0:
        raise ValueError(f"gaussian std must be > 0, got {std}")
    data = rng(seed).normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=requires_grad, name=name)


def uniform(shape, lo, hi, seed, requires_grad=False, name=None):
    shape = _check_shape(shape)
    if not lo < hi:
        raise ValueError(f"uniform bounds need lo < hi, got [{lo}, {hi}]")
    data = rng(seed).uniform(lo, hi, size=shape)
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise (equal shapes only) and scalar scale

def _check_same_shape(op, a, b):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    _check_same_shape("add", a, b)

    def bwd(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return apply_op("add", (a, b), a.data + b.data, bwd)


def sub(a, b):
    _check_same_shape("sub", a, b)

    def bwd(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return apply_op("sub", (a, b), a.data - b.data, bwd)


def mul(a, b):
    _check_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data

    def bwd(g):
        accumulate_grad(a, g * b_data)
        accumulate_grad(b, g * a_data)

    return apply_op("mul", (a, b), a_data * b_data, bwd)


def scale(x, k):
    k = float(k)

    def bwd(g):
        accumulate_grad(x, g * k)

    return apply_op("scale", (x,), x.data * k, bwd)


def add_bias(x, bias):
    """Add a length-d bias along the last axis of x; grad sums over the rest."""
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ValueError(f"add_bias: bias {bias.shape} does not match last axis of {x.shape}")
    reduce_axes = tuple(range(x.ndim - 1))

    def bwd(g):
        accumulate_grad(x, g)
        accumulate_grad(bias, g.sum(axis=reduce_axes))

    return apply_op("add_bias", (x, bias), x.data + bias.data, bwd)


# ---------------------------------------------------------------------------
# activations

def _check_finite_input(op, x):
    if not np.isfinite(x.data).all():
        raise ValueError(f"{op}: input contains NaN/Inf")


def sigmoid(x):
    _check_finite_input("sigmoid", x)
    with np.errstate(over="ignore"):  # exp overflow saturates correctly to 0
        y = 1.0 / (1.0 + np.exp(-x.data))

    def bwd(g):
        accumulate_grad(x, g * y * (1.0 - y))

    return apply_op("sigmoid", (x,), y, bwd)


def tanh(x):
    _check_finite_input("tanh", x)
    y = np.tanh(x.data)

    def bwd(g):
        accumulate_grad(x, g * (1.0 - y * y))

    return apply_op("tanh", (x,), y, bwd)


def relu(x):
    _check_finite_input("relu", x)
    mask = x.data > 0

    def bwd(g):
        accumulate_grad(x, g * mask)

    return apply_op("relu", (x,), np.where(mask, x.data, 0.0), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing

def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul: expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(g):
        accumulate_grad(a, g @ b_data.T)
        accumulate_grad(b, a_data.T @ g)

    return apply_op("matmul", (a, b), a_data @ b_data, bwd)


def sum_all(x):
    """Sum every element down to a 0-d scalar tensor."""

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g, x.shape))

    return apply_op("sum_all", (x,), x.data.sum(), bwd)


def reshape(x, shape):
    shape = tuple(int(d) for d in shape)
    out_data = x.data.reshape(shape)
    in_shape = x.shape

    def bwd(g):
        accumulate_grad(x, g.reshape(in_shape))

    return apply_op("reshape", (x,), out_data, bwd)


def permute(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort(axes)

    def bwd(g):
        accumulate_grad(x, g.transpose(inv))

    return apply_op("permute", (x,), x.data.transpose(axes), bwd)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: need at least one tensor")
    if len(tensors) == 1:
        t = tensors[0]
        return apply_op("concat", (t,), t.data.copy(), lambda g: accumulate_grad(t, g))
    ref = tensors[0].shape
    axis = axis if axis >= 0 else axis + len(ref)
    for t in tensors[1:]:
        off_axis_ok = (
            t.ndim == len(ref)
            and all(t.shape[i] == ref[i] for i in range(len(ref)) if i != axis)
        )
        if not off_axis_ok:
            raise ValueError(f"concat: off-axis shape mismatch {t.shape} vs {ref} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            accumulate_grad(t, g[tuple(sl)])

    return apply_op("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), bwd)


def slice_axis(x, axis, start, stop):
    """Contiguous slice [start, stop) along one axis; the concat inverse."""
    dim = x.shape[axis]
    if not (0 <= start < stop <= dim):
        raise ValueError(f"slice_axis: [{start}, {stop}) out of range for dim {dim}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bwd(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[index] += g

    return apply_op("slice_axis", (x,), x.data[index].copy(), bwd)


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, xs, eps=1e-5, max_coords=None, seed=0):
    """Max relative error of tape gradients vs central finite differences.

    ``f`` maps the tensors in ``xs`` to a scalar tensor and must not manage
    tapes itself. Error per probed coordinate is
    ``|analytic - numeric| / max(1e-12, |analytic| + |numeric|)``; differences
    below the finite-difference resolution (machine epsilon of the loss scale
    divided by eps) count as zero, since central differences cannot resolve
    them. ``max_coords`` caps the probes per tensor with a seeded random
    subset. Non-determinism (two detached evaluations disagreeing bitwise) is
    rejected.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None

    out1 = f(*xs)
    out2 = f(*xs)
    if not isinstance(out1, Tensor) or out1.size != 1:
        raise ValueError("grad_check: f must return a scalar tensor")
    if not np.array_equal(out1.data, out2.data):
        raise ValueError("grad_check: f is not deterministic (repeated evaluations differ)")

    with Tape() as tape:
        loss = f(*xs)
    tape.backward(loss)
    analytic = [
        np.array(x.grad) if x.grad is not None else np.zeros_like(x.data) for x in xs
    ]
    for x in xs:
        x.grad = None

    picker = rng(seed)
    fd_noise = 4.0 * np.finfo(np.float64).eps * max(1.0, abs(float(out1.data))) / eps
    max_err = 0.0
    for x, ga in zip(xs, analytic):
        flat = x.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = picker.choice(flat.size, size=max_coords, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f(*xs).data)
            flat[i] = orig - eps
            f_minus = float(f(*xs).data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(ga_flat[i])
            diff = abs(a - numeric)
            if diff <= fd_noise:
                continue
            max_err = max(max_err, diff / max(1e-12, abs(a) + abs(numeric)))
    return max_err
