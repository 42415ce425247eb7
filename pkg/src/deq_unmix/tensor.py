"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape`. Outside a
tape (or inside :func:`no_grad`) nothing is recorded and results never
require gradients.

>>> with Tape() as tape:
...     w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
...     loss = (w * w).sum()
...     tape.backward(loss)
>>> w.grad.data
array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (double backward, non-scalar loss, ...)."""


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    """Return the tape currently recording on this thread, if any."""
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread for the duration of the block."""
    stack = _stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Node:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name: str, inputs: tuple, output: "Tensor", backward: Callable):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward

    def __repr__(self) -> str:
        shapes = ", ".join(str(t.shape) for t in self.inputs)
        return f"Node({self.name}: {shapes} -> {self.output.shape})"


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order, which is a
    topological order of the computation graph.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tapes must be exited in LIFO order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self._used = False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def _propagate(self, seeds: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
        grads = dict(seeds)
        for node in reversed(self.nodes):
            g = grads.get(id(node.output))
            if g is None:
                continue
            in_grads = node.backward(g)
            if len(in_grads) != len(node.inputs):
                raise TapeError(
                    f"{node.name}: backward returned {len(in_grads)} gradients "
                    f"for {len(node.inputs)} inputs"
                )
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=np.float64)
                if ig.shape != inp.shape:
                    raise ShapeError(
                        f"{node.name}: backward produced gradient of shape {ig.shape} "
                        f"for input of shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return grads

    def gradient(
        self,
        output: "Tensor",
        wrt: Sequence["Tensor"],
        seed: np.ndarray | None = None,
    ) -> list[np.ndarray]:
        """Return d<seed, output>/d(wrt) without touching any ``.grad``.

        May be called repeatedly on the same tape (e.g. once per iteration of
        a matrix-free linear solve).
        """
        if seed is None:
            if output.size != 1:
                raise TapeError(f"seed required for non-scalar output of shape {output.shape}")
            seed = np.ones(output.shape)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != output.shape:
            raise ShapeError(f"gradient: seed shape {seed.shape} != output shape {output.shape}")
        grads = self._propagate({id(output): seed})
        return [grads.get(id(t), np.zeros(t.shape)) for t in wrt]

    def backward(self, loss: "Tensor") -> None:
        """Populate ``.grad`` of every gradient-requiring leaf on this tape.

        Leaves not reachable from ``loss`` receive zero gradients. Calling
        twice without :meth:`reset` is an error.
        """
        if self._used:
            raise TapeError("backward called twice on the same tape; call reset() first")
        if loss.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if not self.nodes:
            raise TapeError("backward on an empty tape")
        self._used = True
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
        grads = self._propagate({id(loss): np.ones(loss.shape)})
        for key, leaf in leaves.items():
            leaf.grad = Tensor(grads.get(key, np.zeros(leaf.shape)))


def backward(loss: "Tensor") -> None:
    """Backward pass on the innermost active tape."""
    tape = active_tape()
    if tape is None:
        raise TapeError("no active tape")
    tape.backward(loss)


class Tensor:
    """Immutable dense array of float64 values."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Tensor | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4)}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(name: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op result and record it if any input requires grad."""
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{name}: produced non-finite values")
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result = Tensor._wrap(out, requires_grad=True)
        tape.record(Node(name, inputs, result, backward))
        return result
    return Tensor._wrap(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _emit(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _emit(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains zeros")
    out = a.data / b.data
    return _emit(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


# -- elementwise unary --------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt: negative input")
    out = np.sqrt(a.data)
    if np.any(out == 0):
        return _emit("sqrt", out, (a,), lambda g: (np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0.0),))
    return _emit("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


# -- linear algebra & structure ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with batch broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operands not allowed, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions do not broadcast for {a.shape} and {b.shape}") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga if a.requires_grad else None, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return _emit("matmul", out, (a, b), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last axis by default)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _emit("concat", out, tensors, backward)


def _check_index(idx) -> None:
    items = idx if isinstance(idx, tuple) else (idx,)
    for it in items:
        if isinstance(it, Tensor):
            raise TypeError("getitem: indices may not be tensors (not differentiable)")
        if not (it is None or it is Ellipsis or isinstance(it, (int, np.integer, slice))):
            raise TypeError(f"getitem: only basic slicing is supported, got {type(it).__name__}")


def getitem(a, idx) -> Tensor:
    """Basic slicing (ints, slices, Ellipsis, None)."""
    a = as_tensor(a)
    _check_index(idx)
    out = a.data[idx]

    def backward(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _emit("getitem", np.array(out), (a,), backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size / max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), backward)


# -- fused recurrent primitive -------------------------------------------------


def lstm(x, w_ih, w_hh, b_ih, b_hh, reverse: bool = False) -> Tensor:
    """Single-direction LSTM over the second-to-last axis of ``x``.

    ``x`` has shape ``(..., T, in)``; weights follow the i, f, g, o gate
    layout with shapes ``(4h, in)``, ``(4h, h)``, ``(4h,)``, ``(4h,)``.
    Initial hidden and cell states are zero. Recorded as one tape node with
    an analytic backpropagation-through-time rule.
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    if x.ndim < 2:
        raise ShapeError(f"lstm: input must be (..., T, in), got {x.shape}")
    four_h, n_in = w_ih.shape
    h = four_h // 4
    if four_h != 4 * h or x.shape[-1] != n_in or w_hh.shape != (four_h, h) \
            or b_ih.shape != (four_h,) or b_hh.shape != (four_h,):
        raise ShapeError(
            f"lstm: input {x.shape} incompatible with weights {w_ih.shape}, {w_hh.shape}, "
            f"{b_ih.shape}, {b_hh.shape}"
        )
    lead = x.shape[:-2]
    T = x.shape[-2]
    xs = x.data.reshape(-1, T, n_in)
    n = xs.shape[0]
    proj = xs @ w_ih.data.T + (b_ih.data + b_hh.data)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    W_hh_T = w_hh.data.T
    hs = np.zeros((n, T, h))
    cs = np.zeros((n, T, h))
    gates = np.zeros((n, T, 4 * h))
    h_prev = np.zeros((n, h))
    c_prev = np.zeros((n, h))
    for t in steps:
        a = proj[:, t] + h_prev @ W_hh_T
        s = _sigmoid(a)
        gi, gf, go = s[:, :h], s[:, h:2 * h], s[:, 3 * h:]
        gg = np.tanh(a[:, 2 * h:3 * h])
        c = gf * c_prev + gi * gg
        hcur = go * np.tanh(c)
        gates[:, t, :h] = gi
        gates[:, t, h:2 * h] = gf
        gates[:, t, 2 * h:3 * h] = gg
        gates[:, t, 3 * h:] = go
        cs[:, t] = c
        hs[:, t] = hcur
        h_prev, c_prev = hcur, c
    order = list(steps)

    def backward(g):
        g = g.reshape(n, T, h)
        d_a = np.zeros((n, T, 4 * h))
        dh_next = np.zeros((n, h))
        dc_next = np.zeros((n, h))
        zeros = np.zeros((n, h))
        for k in range(T - 1, -1, -1):
            t = order[k]
            prev = order[k - 1] if k > 0 else None
            c_prev_t = cs[:, prev] if prev is not None else zeros
            gi = gates[:, t, :h]
            gf = gates[:, t, h:2 * h]
            gg = gates[:, t, 2 * h:3 * h]
            go = gates[:, t, 3 * h:]
            tc = np.tanh(cs[:, t])
            dh = g[:, t] + dh_next
            dc = dc_next + dh * go * (1.0 - tc * tc)
            da = d_a[:, t]
            da[:, :h] = dc * gg * gi * (1.0 - gi)
            da[:, h:2 * h] = dc * c_prev_t * gf * (1.0 - gf)
            da[:, 2 * h:3 * h] = dc * gi * (1.0 - gg * gg)
            da[:, 3 * h:] = dh * tc * go * (1.0 - go)
            dh_next = da @ w_hh.data
            dc_next = dc * gf
        h_shift = np.zeros((n, T, h))
        for k in range(1, T):
            h_shift[:, order[k]] = hs[:, order[k - 1]]
        flat_da = d_a.reshape(-1, 4 * h)
        dx = (d_a @ w_ih.data).reshape(x.shape)
        dw_ih = flat_da.T @ xs.reshape(-1, n_in)
        dw_hh = flat_da.T @ h_shift.reshape(-1, h)
        db = flat_da.sum(axis=0)
        return dx, dw_ih, dw_hh, db, db.copy()

    return _emit("lstm", hs.reshape(lead + (T, h)), (x, w_ih, w_hh, b_ih, b_hh), backward)


# -- custom gradients & vjp ----------------------------------------------------


def custom_gradient(forward: Callable, backward_rule: Callable, name: str = "custom") -> Callable:
    """Build an opaque differentiable op.

    ``forward(*inputs)`` runs with recording suspended and returns a Tensor
    (or array). ``backward_rule(upstream, inputs, output)`` returns one
    gradient (array or None) per input. The op occupies exactly one node on
    the caller's tape.
    """

    def op(*inputs) -> Tensor:
        inputs = tuple(as_tensor(t) for t in inputs)
        with no_grad():
            out = forward(*inputs)
        out_data = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
        holder: list[Tensor] = []

        def backward(g):
            grads = backward_rule(g, inputs, holder[0])
            grads = tuple(grads)
            if len(grads) != len(inputs):
                raise TapeError(f"{name}: backward rule returned {len(grads)} gradients for {len(inputs)} inputs")
            return grads

        result = _emit(name, out_data, inputs, backward)
        holder.append(result)
        return result

    return op


def vjp(f: Callable[[Tensor], Tensor], at, v) -> np.ndarray:
    """Return ``v^T J_f(at)`` shaped like ``at`` using a private tape."""
    at = as_tensor(at)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    with Tape() as tape:
        z = Tensor._wrap(at.data, requires_grad=True)
        out = f(z)
    if not isinstance(out, Tensor):
        raise TypeError("vjp: function must return a Tensor")
    if v.shape != out.shape:
        raise ShapeError(f"vjp: cotangent shape {v.shape} != output shape {out.shape}")
    return tape.gradient(out, [z], v)[0]


# -- parameters ----------------------------------------------------------------


class ParamSet(Mapping):
    """Named parameters keyed by dot-separated path, iterated lexicographically."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: dict[str, Tensor] = {}
        for path, t in items:
            self.add(path, t)

    def add(self, path: str, tensor: Tensor) -> None:
        if path in self._params:
            raise KeyError(f"duplicate parameter path {path!r}")
        if not tensor.requires_grad:
            raise ValueError(f"parameter {path!r} must require grad")
        self._params[path] = tensor

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __iter__(self):
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def total_count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros(self[k].shape) if self[k].grad is None else self[k].grad.data) for k in self}
