"""Dense float64 tensors with reverse-mode automatic differentiation.

Storage is a row-major numpy array with an explicit shape. Everything runs
in 64-bit precision so that finite-difference gradient checks are meaningful.
Broadcasting is deliberately restricted to the cases the rest of the package
uses: scalar against tensor, and matrix against row vector. Each operation
that consumes a tensor requiring gradients records an ``OpNode`` carrying a
backward rule; ``backward`` replays the recorded graph in reverse topological
order and accumulates gradients additively, so a tensor feeding several
branches receives the sum of the branch gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError


class OpNode:
    """One recorded operation: inputs, output, and its backward rule.

    ``backward_fn`` maps the gradient of the output to a tuple of gradients
    aligned with ``inputs`` (``None`` for inputs that need no gradient).
    """

    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: tuple["Tensor", ...], output: "Tensor",
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"OpNode({self.name}, inputs={len(self.inputs)})"


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("array", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: OpNode | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float64), requires_grad)

    # -- views ---------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def ndim(self) -> int:
        return self.array.ndim

    @property
    def size(self) -> int:
        return self.array.size

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the stored values."""
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.array.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.array.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.array.copy(), requires_grad=False)

    def backward(self) -> None:
        backward(ComputationRecord.trace(self), self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(name: str, out_array: np.ndarray, inputs: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap an op result, recording the node only when a gradient can flow."""
    if not np.all(np.isfinite(out_array)):
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.array = out_array
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.op = OpNode(name, inputs, out, backward_fn) if out.requires_grad else None
    return out


class ComputationRecord:
    """Topologically ordered list of the operations reachable from a root.

    Inputs of step k were produced at earlier steps, so replaying the list
    in reverse propagates gradients correctly.
    """

    def __init__(self, steps: list[OpNode]):
        self.steps = steps

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        steps: list[OpNode] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if tensor.op is None:
                continue
            if expanded:
                steps.append(tensor.op)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor.op.inputs:
                if parent.op is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(steps)


def backward(record: ComputationRecord, root: Tensor) -> None:
    """Populate ``grad`` on every gradient-requiring tensor feeding ``root``.

    Gradients accumulate additively into any pre-existing ``grad``; call
    ``zero_grad`` between independent backward passes.
    """
    if root.array.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if root.op is None and not root.requires_grad:
        return
    flowing: dict[int, np.ndarray] = {id(root): np.ones_like(root.array)}
    for node in reversed(record.steps):
        g = flowing.get(id(node.output))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, input_grads):
            if pg is None or not parent.requires_grad:
                continue
            acc = flowing.get(id(parent))
            flowing[id(parent)] = pg if acc is None else acc + pg
        # once consumed, the output's gradient is final for tensors below root
        if node.output.requires_grad and node.output is not root:
            pass
    seen: set[int] = set()
    for node in record.steps:
        for t in node.inputs + (node.output,):
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            g = flowing.get(id(t))
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
    if root.requires_grad and id(root) not in seen:
        g = flowing[id(root)]
        root.grad = g.copy() if root.grad is None else root.grad + g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if int(np.prod(shape, dtype=np.int64)) == 1 if shape else True:
        if shape == () or int(np.prod(shape)) == 1:
            return np.full(shape, g.sum())
    if len(shape) == 1 and g.ndim == 2 and shape[0] == g.shape[1]:
        return g.sum(axis=0)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


_BROADCAST_OK_MSG = "supported broadcasts: same shape, scalar with tensor, matrix with row vector"


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return
    raise DimensionError(f"shapes {a.shape} and {b.shape} not compatible; {_BROADCAST_OK_MSG}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.array, b.array)
    out = a.array + b.array

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.array, b.array)
    out = a.array - b.array

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make("sub", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.array, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.array, b.array)
    out = a.array * b.array
    a_arr, b_arr = a.array, b.array

    def bw(g):
        return _reduce_to(g * b_arr, a.shape), _reduce_to(g * a_arr, b.shape)

    return _make("mul", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors, differentiable in both."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.array @ b.array
    a_arr, b_arr = a.array, b.array

    def bw(g):
        return g @ b_arr.T, a_arr.T @ g

    return _make("matmul", out, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return _make("transpose", np.ascontiguousarray(a.array.T), (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    out = a.array.reshape(shape)
    return _make("reshape", np.ascontiguousarray(out), (a,), lambda g: (g.reshape(orig),))


def take_rows(a, indices) -> Tensor:
    """Gather rows by index; the backward pass scatter-adds into the source."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"take_rows needs a matrix, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError("take_rows indices must be one-dimensional")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for {a.shape[0]} rows")
    out = a.array[idx]
    n_rows = a.shape[0]

    def bw(g):
        acc = np.zeros((n_rows, a.array.shape[1]))
        np.add.at(acc, idx, g)
        return (acc,)

    return _make("take_rows", out, (a,), bw)


def concat_rows(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_rows needs at least one tensor")
    widths = {t.shape[1] for t in ts if t.ndim == 2}
    if any(t.ndim != 2 for t in ts) or len(widths) != 1:
        raise DimensionError("concat_rows needs matrices of equal width")
    out = np.concatenate([t.array for t in ts], axis=0)
    sizes = [t.shape[0] for t in ts]

    def bw(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=0))

    return _make("concat_rows", out, tuple(ts), bw)


def concat_cols(tensors: Sequence) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat_cols needs at least one tensor")
    heights = {t.shape[0] for t in ts if t.ndim == 2}
    if any(t.ndim != 2 for t in ts) or len(heights) != 1:
        raise DimensionError("concat_cols needs matrices of equal height")
    out = np.concatenate([t.array for t in ts], axis=1)
    sizes = [t.shape[1] for t in ts]

    def bw(g):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=1))

    return _make("concat_cols", out, tuple(ts), bw)


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        return (np.full(shape, float(g)),)

    return _make("sum_all", np.array(a.array.sum()), (a,), bw)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size

    def bw(g):
        return (np.full(shape, float(g) / n),)

    return _make("mean_all", np.array(a.array.mean()), (a,), bw)


def row_sum(a) -> Tensor:
    """Sum each row of a matrix, producing a vector."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"row_sum needs a matrix, got {a.shape}")
    cols = a.shape[1]

    def bw(g):
        return (np.repeat(g[:, None], cols, axis=1),)

    return _make("row_sum", a.array.sum(axis=1), (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Smooth GELU (tanh form); smoothness keeps finite differences honest."""
    a = as_tensor(a)
    x = a.array
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        sech2 = 1.0 - t ** 2
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _make("gelu", out, (a,), bw)


def softmax_rows(a) -> Tensor:
    """Row-stochastic softmax with max subtraction for stability."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows needs a matrix, got {a.shape}")
    if np.isnan(a.array).any():
        raise NumericError("softmax_rows received NaN input")
    shifted = a.array - a.array.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return _make("softmax_rows", p, (a,), bw)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a matrix, got {a.shape}")
    if np.isnan(a.array).any():
        raise NumericError("log_softmax_rows received NaN input")
    shifted = a.array - a.array.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    lp = shifted - lse
    p = np.exp(lp)

    def bw(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax_rows", lp, (a,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean and unit population variance, then scale/shift.

    Accepts a vector or a matrix (normalized per row). ``gain`` and ``bias``
    must match the trailing dimension.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if x.ndim not in (1, 2):
        raise DimensionError(f"layer_norm needs a vector or matrix, got {x.shape}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}")
    arr = x.array
    mu = arr.mean(axis=-1, keepdims=True)
    var = arr.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (arr - mu) * inv
    out = xhat * gain.array + bias.array
    g_arr = gain.array

    def bw(g):
        if g.ndim == 1:
            d_gain = (g * xhat)
            d_bias = g
        else:
            d_gain = (g * xhat).sum(axis=0)
            d_bias = g.sum(axis=0)
        dxhat = g * g_arr
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, d_gain, d_bias

    return _make("layer_norm", out, (x, gain, bias), bw)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy needs a T x V matrix, got {logits.shape}")
    t_ids = np.asarray(targets, dtype=np.int64)
    if t_ids.ndim != 1 or t_ids.shape[0] != logits.shape[0]:
        raise DimensionError("targets must be one id per logits row")
    v = logits.shape[1]
    if t_ids.size and (t_ids.min() < 0 or t_ids.max() >= v):
        raise IndexError(f"target id out of range for vocabulary of {v}")
    arr = logits.array
    shifted = arr - arr.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    lp = shifted - lse
    n = arr.shape[0]
    loss = -lp[np.arange(n), t_ids].mean()
    p = np.exp(lp)

    def bw(g):
        d = p.copy()
        d[np.arange(n), t_ids] -= 1.0
        return (float(g) * d / n,)

    return _make("cross_entropy", np.array(loss), (logits,), bw)


def euclid_dist(a, b) -> Tensor:
    """Euclidean distance between two vectors; zero-distance gradient is zero."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"euclid_dist needs equal-length vectors, got {a.shape}, {b.shape}")
    diff = a.array - b.array
    d = float(np.sqrt((diff ** 2).sum()))

    def bw(g):
        if d == 0.0:
            z = np.zeros_like(diff)
            return z, z.copy()
        grad = float(g) * diff / d
        return grad, -grad

    return _make("euclid_dist", np.array(d), (a, b), bw)


def neg_log_sigmoid(a) -> Tensor:
    """Elementwise -log(sigmoid(x)), computed as softplus(-x) for stability."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, -a.array)
    x = a.array

    def bw(g):
        sig_neg = np.exp(-np.logaddexp(0.0, x))  # sigmoid(-x)
        return (-g * sig_neg,)

    return _make("neg_log_sigmoid", out, (a,), bw)


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor], h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must be scalar-valued and smooth at ``inputs``; every input must
    require gradients. Relative error per coordinate is
    ``|g_analytic - g_fd| / max(1e-12, |g_analytic| + |g_fd|)``.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ContractError(f"h={h} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad:
            raise ContractError("grad_check inputs must require gradients")
        t.grad = None
    out = fn(*inputs)
    if out.array.size != 1:
        raise ContractError("grad_check function must be scalar-valued")
    out.backward()
    analytic = [np.zeros_like(t.array) if t.grad is None else t.grad.copy() for t in inputs]

    # finite differences run with tracking off: only values matter here
    for t in inputs:
        t.requires_grad = False
    try:
        worst = 0.0
        for t, ga in zip(inputs, analytic):
            flat = t.array.reshape(-1)
            ga_flat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                f_plus = fn(*inputs).item()
                flat[i] = orig - h
                f_minus = fn(*inputs).item()
                flat[i] = orig
                g_fd = (f_plus - f_minus) / (2.0 * h)
                denom = max(1e-12, abs(ga_flat[i]) + abs(g_fd))
                worst = max(worst, abs(ga_flat[i] - g_fd) / denom)
    finally:
        for t in inputs:
            t.requires_grad = True
    return worst
