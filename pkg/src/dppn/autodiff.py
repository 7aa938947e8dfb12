"""Reverse-mode autodiff on dense float64 arrays, sized for this model's graph.

Each operation validates its operands, evaluates eagerly with numpy, and
registers a vector-Jacobian product so ``backward`` can push gradients from a
scalar loss to every leaf. Values are immutable once produced: backward only
rebinds ``.grad``, it never writes into an existing array. The op set is
exactly what the network needs -- there is no broadcasting beyond it.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "Node",
    "AdamState",
    "tensor",
    "leaf",
    "matmul",
    "transpose",
    "softmax_cols",
    "concat_cols",
    "col",
    "stack_cols",
    "sum_cols",
    "max_cols",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "sq_l2",
    "cross_entropy_logits",
    "affine_cols",
    "mean_cols",
    "backward",
    "adam_step",
    "finite_diff_check",
]


class DimensionError(ValueError):
    """Operand shapes violate an operation's contract."""


def tensor(data) -> np.ndarray:
    """Canonical value type: float64, C-order, finite, positive extents."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if arr.size == 0:
        raise DimensionError(f"tensor extents must all be positive, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("tensor values must be finite (no NaN/Inf)")
    return arr


class Node:
    """One vertex of the computation graph: value, parent nodes, VJP rule.

    ``vjp`` maps the gradient flowing into this node to a tuple of gradients,
    one per parent. Leaves have no parents and no vjp.
    """

    __slots__ = ("value", "parents", "vjp", "grad")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        kind = "leaf" if self.vjp is None else "op"
        return f"<Node {kind} shape={self.value.shape}>"


def leaf(data) -> Node:
    """Wrap a value as a graph leaf (parameter or constant)."""
    return Node(tensor(data))


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else leaf(x)


def _node(value, parents, vjp) -> Node:
    value = np.asarray(value)
    if not np.isfinite(value).all():
        raise ValueError("operation produced a non-finite value")
    return Node(value, parents, vjp)


def _need_matrix(v, opname):
    if v.ndim != 2:
        raise DimensionError(f"{opname} needs a matrix operand, got shape {v.shape}")


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Node:
    """Matrix product a @ b with VJP (g b^T, a^T g)."""
    a, b = _as_node(a), _as_node(b)
    va, vb = a.value, b.value
    _need_matrix(va, "matmul")
    _need_matrix(vb, "matmul")
    if va.shape[1] != vb.shape[0]:
        raise DimensionError(f"matmul: inner extents differ for shapes {va.shape} and {vb.shape}")

    def vjp(g):
        return g @ vb.T, va.T @ g

    return _node(va @ vb, (a, b), vjp)


def transpose(a) -> Node:
    a = _as_node(a)
    _need_matrix(a.value, "transpose")

    def vjp(g):
        return (g.T,)

    return _node(np.ascontiguousarray(a.value.T), (a,), vjp)


def softmax_cols(a) -> Node:
    """Softmax along each column, stabilized by per-column max subtraction."""
    a = _as_node(a)
    v = a.value
    _need_matrix(v, "softmax_cols")
    e = np.exp(v - v.max(axis=0, keepdims=True))
    out = e / e.sum(axis=0, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=0, keepdims=True)),)

    return _node(out, (a,), vjp)


def concat_cols(parts) -> Node:
    """Stack d x 1 columns into one (d * len(parts)) x 1 column, in list order."""
    nodes = [_as_node(p) for p in parts]
    if not nodes:
        raise DimensionError("concat_cols: part list is empty")
    shapes = [n.value.shape for n in nodes]
    for s in shapes:
        if len(s) != 2 or s[1] != 1:
            raise DimensionError(f"concat_cols parts must be d x 1 columns, got shape {s}")
    d = shapes[0][0]
    if any(s[0] != d for s in shapes):
        raise DimensionError(f"concat_cols parts have ragged extents {[s[0] for s in shapes]}")

    def vjp(g):
        return tuple(g[i * d:(i + 1) * d, :] for i in range(len(nodes)))

    return _node(np.concatenate([n.value for n in nodes], axis=0), tuple(nodes), vjp)


def col(a, i: int) -> Node:
    """Column i of a matrix, as a d x 1 tensor."""
    a = _as_node(a)
    v = a.value
    _need_matrix(v, "col")
    if not 0 <= i < v.shape[1]:
        raise IndexError(f"col: index {i} out of range for {v.shape[1]} columns")

    def vjp(g):
        z = np.zeros_like(v)
        z[:, i:i + 1] = g
        return (z,)

    return _node(v[:, i:i + 1].copy(), (a,), vjp)


def stack_cols(a) -> Node:
    """Flatten an m x n matrix column by column into an (m*n) x 1 tensor.

    Equivalent to concat_cols over the matrix columns in order.
    """
    a = _as_node(a)
    v = a.value
    _need_matrix(v, "stack_cols")
    m, n = v.shape

    def vjp(g):
        return (g.reshape(n, m).T,)

    return _node(v.T.reshape(m * n, 1), (a,), vjp)


def sum_cols(a) -> Node:
    """Sum an m x n matrix across columns into an m x 1 tensor."""
    a = _as_node(a)
    v = a.value
    _need_matrix(v, "sum_cols")
    n = v.shape[1]

    def vjp(g):
        return (np.tile(g, (1, n)),)

    return _node(v.sum(axis=1, keepdims=True), (a,), vjp)


def max_cols(a) -> Node:
    """Row-wise max across columns; the subgradient routes to the first argmax."""
    a = _as_node(a)
    v = a.value
    _need_matrix(v, "max_cols")
    idx = v.argmax(axis=1)
    rows = np.arange(v.shape[0])

    def vjp(g):
        z = np.zeros_like(v)
        z[rows, idx] = g[:, 0]
        return (z,)

    return _node(v[rows, idx][:, None], (a,), vjp)


def relu(a) -> Node:
    """Pointwise max(x, 0); gradient at 0 is 0."""
    a = _as_node(a)
    v = a.value

    def vjp(g):
        return (g * (v > 0.0),)

    return _node(np.maximum(v, 0.0), (a,), vjp)


def sigmoid(a) -> Node:
    """Pointwise logistic function, computed without exp overflow."""
    a = _as_node(a)
    v = a.value
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), vjp)


def _need_same_shape(va, vb, opname):
    if va.shape != vb.shape:
        raise DimensionError(f"{opname}: operand shapes differ, {va.shape} vs {vb.shape}")


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _need_same_shape(a.value, b.value, "add")

    def vjp(g):
        return g, g

    return _node(a.value + b.value, (a, b), vjp)


def mul(a, b) -> Node:
    """Pointwise (Hadamard) product."""
    a, b = _as_node(a), _as_node(b)
    va, vb = a.value, b.value
    _need_same_shape(va, vb, "mul")

    def vjp(g):
        return g * vb, g * va

    return _node(va * vb, (a, b), vjp)


def scale(a, s: float) -> Node:
    """Multiply by a python scalar constant."""
    a = _as_node(a)
    s = float(s)
    if not np.isfinite(s):
        raise ValueError("scale factor must be finite")

    def vjp(g):
        return (g * s,)

    return _node(a.value * s, (a,), vjp)


def sq_l2(a, b) -> Node:
    """Squared L2 distance sum((a - b)^2) as a scalar tensor."""
    a, b = _as_node(a), _as_node(b)
    _need_same_shape(a.value, b.value, "sq_l2")
    diff = a.value - b.value

    def vjp(g):
        d = 2.0 * g * diff
        return d, -d

    return _node(np.asarray((diff * diff).sum()), (a, b), vjp)


def cross_entropy_logits(logits, target: int) -> Node:
    """-log softmax(logits)[target] for an n x 1 logit column, log-sum-exp stabilized."""
    lnode = _as_node(logits)
    v = lnode.value
    if v.ndim != 2 or v.shape[1] != 1:
        raise DimensionError(f"cross_entropy_logits needs n x 1 logits, got shape {v.shape}")
    n = v.shape[0]
    target = int(target)
    if not 0 <= target < n:
        raise IndexError(f"cross_entropy_logits: target {target} out of range for {n} classes")
    z = v[:, 0] - v[:, 0].max()
    lse = np.log(np.exp(z).sum())
    probs = np.exp(z - lse)

    def vjp(g):
        grad = probs.copy()
        grad[target] -= 1.0
        return ((float(g) * grad)[:, None],)

    return _node(np.asarray(lse - z[target]), (lnode,), vjp)


# ---------------------------------------------------------------------------
# composites (no new VJP rules; built from the ops above)

_ONES_CACHE: dict[tuple, np.ndarray] = {}


def _ones(shape) -> np.ndarray:
    arr = _ONES_CACHE.get(shape)
    if arr is None:
        arr = np.ones(shape)
        _ONES_CACHE[shape] = arr
    return arr


def affine_cols(w, x, b) -> Node:
    """w @ x + b, with the bias column repeated across the columns of x."""
    w, x, b = _as_node(w), _as_node(x), _as_node(b)
    n = x.value.shape[1]
    wx = matmul(w, x)
    if n == 1:
        return add(wx, b)
    return add(wx, matmul(b, leaf(_ones((1, n)))))


def mean_cols(a) -> Node:
    """Mean across columns as an m x 1 tensor."""
    a = _as_node(a)
    n = a.value.shape[1]
    return scale(matmul(a, leaf(_ones((n, 1)))), 1.0 / n)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` for every ancestor of loss.

    A node feeding several paths receives the sum of the per-path gradients.
    Leaves that do not feed the loss keep ``grad is None`` (read as zero).
    """
    if not isinstance(loss, Node):
        raise TypeError("backward expects a Node")
    if loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.value) if loss.grad is None else loss.grad + np.ones_like(loss.value)
    for node in reversed(order):
        if node.vjp is None:
            continue
        for parent, g in zip(node.parents, node.vjp(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Adam moments for one parameter tensor (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, shape, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns the new parameter."""
    if param.shape != grad.shape or param.shape != state.m.shape:
        raise DimensionError(
            f"adam_step: shapes disagree, param {param.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(fn, at, h: float = 1e-5) -> float:
    """Worst relative error between backward() and central finite differences.

    ``fn`` maps a leaf Node to a scalar Node. The error for entry i is
    |fd_i - ad_i| / max(1, |fd_i|, |ad_i|); the max over entries is returned.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: h must be positive")
    base = tensor(at)
    probe = leaf(base)
    backward(fn(probe))
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    analytic = np.asarray(analytic).reshape(-1)

    worst = 0.0
    flat = base.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        hi = float(fn(leaf(bumped.reshape(base.shape))).value)
        bumped[i] -= 2.0 * h
        lo = float(fn(leaf(bumped.reshape(base.shape))).value)
        fd = (hi - lo) / (2.0 * h)
        err = abs(fd - analytic[i]) / max(1.0, abs(fd), abs(analytic[i]))
        worst = max(worst, err)
    return worst
