"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure; ``backward()`` on a
scalar runs one reverse topological sweep. Gradients of all reachable
nodes are reset at the start of each sweep unless ``accumulate=True``.

Broadcasting is deliberately restricted: ops take explicit shapes, plus
row-wise (``shift_rows``/``scale_rows``) and column-wise (``add_bias``)
vector forms. Everything runs in float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DegenerateEmbeddingError, NumericError, ShapeError


class Tensor:
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Constant copy sharing no graph history (gradient barrier)."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _topo(self):
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return order

    def backward(self, accumulate=False):
        """Reverse sweep from a scalar; fills ``.grad`` on requires_grad leaves.

        Grads of all reachable nodes are zeroed first unless ``accumulate``.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.data.shape}")
        order = self._topo()
        grads = {id(n): None for n in order}
        if not accumulate:
            for n in order:
                n.grad = None
        grads[id(self)] = np.ones_like(self.data)
        for node in reversed(order):
            g = grads[id(node)]
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                prev = grads[id(parent)]
                grads[id(parent)] = pg if prev is None else prev + pg

    # operator sugar for the common binary ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _needs(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor(a.data + b.data, _parents=(a, b), _backward=lambda g: (g, g), _op="add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor(a.data - b.data, _parents=(a, b), _backward=lambda g: (g, -g), _op="sub")


def mul(a, b):
    """Elementwise product of equal-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return Tensor(a.data * b.data, _parents=(a, b),
                  _backward=lambda g: (g * b.data, g * a.data), _op="mul")


def scale(a, c):
    """Multiply every element by the python scalar ``c``."""
    a = as_tensor(a)
    c = float(c)
    return Tensor(a.data * c, _parents=(a,), _backward=lambda g: (g * c,), _op="scale")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")
    return Tensor(a.data @ b.data, _parents=(a, b),
                  _backward=lambda g: (g @ b.data.T, a.data.T @ g), _op="matmul")


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {a.data.shape}")
    return Tensor(a.data.T, _parents=(a,), _backward=lambda g: (g.T,), _op="transpose")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(a.data * mask, _parents=(a,), _backward=lambda g: (g * mask,), _op="relu")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g * out_data,), _op="exp")


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.data), _parents=(a,), _backward=lambda g: (g / a.data,), _op="log")


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    # guarded denominator: at exactly 0 the incoming cochain is 0 in all our
    # uses (norm of a zero difference), so return 0 rather than inf
    denom = np.maximum(out_data, 1e-12)
    return Tensor(out_data, _parents=(a,), _backward=lambda g: (g * 0.5 / denom,), _op="sqrt")


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient passes where a >= floor."""
    a = as_tensor(a)
    floor = float(floor)
    mask = a.data >= floor
    return Tensor(np.maximum(a.data, floor), _parents=(a,),
                  _backward=lambda g: (g * mask,), _op="clamp_min")


def mean(a):
    a = as_tensor(a)
    n = a.data.size
    return Tensor(a.data.mean(), _parents=(a,),
                  _backward=lambda g: (np.full_like(a.data, float(g) / n),), _op="mean")


def tsum(a):
    a = as_tensor(a)
    return Tensor(a.data.sum(), _parents=(a,),
                  _backward=lambda g: (np.full_like(a.data, float(g)),), _op="sum")


def row_sum(a):
    """N x K -> vector of N row sums."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_sum: expected matrix, got shape {a.data.shape}")
    return Tensor(a.data.sum(axis=1), _parents=(a,),
                  _backward=lambda g: (np.repeat(g[:, None], a.data.shape[1], axis=1),),
                  _op="row_sum")


def shift_rows(m, v):
    """out[i, j] = m[i, j] + v[i]."""
    m, v = as_tensor(m), as_tensor(v)
    if m.data.ndim != 2 or v.data.shape != (m.data.shape[0],):
        raise ShapeError(f"shift_rows: shapes {m.data.shape} and {v.data.shape} incompatible")
    return Tensor(m.data + v.data[:, None], _parents=(m, v),
                  _backward=lambda g: (g, g.sum(axis=1)), _op="shift_rows")


def scale_rows(m, v):
    """out[i, j] = m[i, j] * v[i]."""
    m, v = as_tensor(m), as_tensor(v)
    if m.data.ndim != 2 or v.data.shape != (m.data.shape[0],):
        raise ShapeError(f"scale_rows: shapes {m.data.shape} and {v.data.shape} incompatible")
    return Tensor(m.data * v.data[:, None], _parents=(m, v),
                  _backward=lambda g: (g * v.data[:, None], (g * m.data).sum(axis=1)),
                  _op="scale_rows")


def add_bias(m, b):
    """out[i, j] = m[i, j] + b[j]."""
    m, b = as_tensor(m), as_tensor(b)
    if m.data.ndim != 2 or b.data.shape != (m.data.shape[1],):
        raise ShapeError(f"add_bias: shapes {m.data.shape} and {b.data.shape} incompatible")
    return Tensor(m.data + b.data[None, :], _parents=(m, b),
                  _backward=lambda g: (g, g.sum(axis=0)), _op="add_bias")


def gather_rows(m, indices):
    """Select rows of a matrix; repeated indices accumulate gradient."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected matrix, got shape {m.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, idx, g)
        return (gm,)

    return Tensor(m.data[idx], _parents=(m,), _backward=back, _op="gather_rows")


def concat_rows(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"concat_rows: shapes {a.data.shape} and {b.data.shape} incompatible")
    na = a.data.shape[0]
    return Tensor(np.concatenate([a.data, b.data], axis=0), _parents=(a, b),
                  _backward=lambda g: (g[:na], g[na:]), _op="concat_rows")


def take(m, row_idx, col_idx):
    """Vector of m[r_k, c_k]; generalizes diagonal and single-element picks."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"take: expected matrix, got shape {m.data.shape}")
    r = np.asarray(row_idx, dtype=np.int64)
    c = np.asarray(col_idx, dtype=np.int64)
    if r.shape != c.shape:
        raise ShapeError(f"take: index shapes {r.shape} and {c.shape} differ")

    def back(g):
        gm = np.zeros_like(m.data)
        np.add.at(gm, (r, c), g)
        return (gm,)

    return Tensor(m.data[r, c], _parents=(m,), _backward=back, _op="take")


def take_diag(m):
    m = as_tensor(m)
    if m.data.ndim != 2 or m.data.shape[0] != m.data.shape[1]:
        raise ShapeError(f"take_diag: expected square matrix, got shape {m.data.shape}")
    n = m.data.shape[0]
    idx = np.arange(n)
    return take(m, idx, idx)


def frobenius_norm(m):
    m = as_tensor(m)
    val = float(np.sqrt((m.data ** 2).sum()))
    denom = max(val, 1e-12)
    return Tensor(val, _parents=(m,), _backward=lambda g: (float(g) * m.data / denom,),
                  _op="frobenius_norm")


def softmax_rows(m):
    """Row-wise softmax with max-subtraction; rows sum to 1 within 1e-12."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected matrix, got shape {m.data.shape}")
    if np.isnan(m.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return Tensor(p, _parents=(m,), _backward=back, _op="softmax_rows")


def log_softmax_rows(m):
    """Row-wise log-softmax, numerically stable."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"log_softmax_rows: expected matrix, got shape {m.data.shape}")
    if np.isnan(m.data).any():
        raise NumericError("log_softmax_rows: NaN in input")
    z = m.data - m.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out_data = z - lse
    p = np.exp(out_data)

    def back(g):
        return (g - p * g.sum(axis=1, keepdims=True),)

    return Tensor(out_data, _parents=(m,), _backward=back, _op="log_softmax_rows")


def l2_normalize_rows(m):
    """Scale each row to unit Euclidean norm; exact quotient-rule gradient."""
    m = as_tensor(m)
    if m.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected matrix, got shape {m.data.shape}")
    norms = np.sqrt((m.data ** 2).sum(axis=1, keepdims=True))
    if (norms < 1e-12).any():
        bad = int(np.argmax(norms[:, 0] < 1e-12))
        raise DegenerateEmbeddingError(f"l2_normalize_rows: row {bad} has norm below 1e-12")
    y = m.data / norms

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / norms,)

    return Tensor(y, _parents=(m,), _backward=back, _op="l2_normalize_rows")


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    orig = a.data.shape
    return Tensor(a.data.reshape(shape), _parents=(a,),
                  _backward=lambda g: (g.reshape(orig),), _op="reshape")
