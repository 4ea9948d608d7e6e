"""A small reverse-mode autodiff engine over dense float64 matrices.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure propagating the output gradient to them. :func:`backward` walks the
recorded graph in reverse topological order, visiting each node once, and
accumulates into ``.grad`` of the leaves that require gradients.

Broadcasting is limited to adding a (1, d) row to an (n, d) matrix.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import kernels
from .errors import NotScalar, ShapeMismatch


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(values, parents, backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# --------------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.values.T if a.requires_grad else None, a.values.T @ g if b.requires_grad else None)

    return _result(a.values @ b.values, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a (1, d) row added to every row of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.values + b.values, (a, b), lambda g: (g, g))
    if a.values.ndim == 2 and b.shape == (1, a.shape[1]):
        return _result(a.values + b.values, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    raise ShapeMismatch(f"add {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul {a.shape} * {b.shape}")
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.values * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.values), (a,), lambda g: (g / a.values,))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor."""
    z = a.values - a.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), bw)


def log_softmax(a: Tensor) -> Tensor:
    z = a.values - a.values.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), bw)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        return _result(np.array(a.values.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    if axis != 0 or a.values.ndim != 2:
        raise ShapeMismatch("sum supports axis=None or axis=0 on 2-D tensors")
    return _result(a.values.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        n = a.values.size
        return _result(np.array(a.values.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))
    if axis != 0 or a.values.ndim != 2:
        raise ShapeMismatch("mean supports axis=None or axis=0 on 2-D tensors")
    n = a.shape[0]
    out = a.values.mean(axis=0, keepdims=True) if n else np.zeros((1, a.shape[1]))
    return _result(out, (a,), lambda g: (np.broadcast_to(g / max(n, 1), a.shape).copy(),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _result(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: list, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(out, tensors, bw)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Rows ``a[index]``; the adjoint is :func:`scatter_add`."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeMismatch(f"gather index out of range for {n} rows")

    def bw(g):
        return (kernels.scatter_add_rows(np.ascontiguousarray(g), index, n),)

    return _result(a.values[index], (a,), bw)


def scatter_add(a: Tensor, index: np.ndarray, n: int) -> Tensor:
    """(n, d) tensor whose row r is the sum of rows of ``a`` with ``index == r``."""
    index = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or len(index) != a.shape[0]:
        raise ShapeMismatch(f"scatter_add of {a.shape} with {len(index)} indices")
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeMismatch(f"scatter index out of range for {n} rows")
    out = kernels.scatter_add_rows(np.ascontiguousarray(a.values), index, int(n))
    return _result(out, (a,), lambda g: (g[index],))


def top_k(a: Tensor, k: int) -> tuple:
    """Largest ``k`` entries of a (1, m) row, ties broken by lower index.

    Returns ``(values, indices)``; indices are plain integers and carry no
    gradient, unselected positions receive exactly zero gradient.
    """
    if a.values.ndim != 2 or a.shape[0] != 1 or not 1 <= k <= a.shape[1]:
        raise ShapeMismatch(f"top_k({k}) of {a.shape}")
    idx = np.argsort(-a.values[0], kind="stable")[:k]

    def bw(g):
        full = np.zeros(a.shape)
        full[0, idx] = g[0]
        return (full,)

    return _result(a.values[:, idx], (a,), bw), idx


def weighted_sum(tensors: list, weights: Tensor) -> Tensor:
    """Σ_k weights[0, k] * tensors[k]; all tensors share one shape."""
    if weights.shape != (1, len(tensors)):
        raise ShapeMismatch(f"weights {weights.shape} for {len(tensors)} tensors")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeMismatch("weighted_sum tensors differ in shape")
    w = weights.values[0]
    out = np.zeros(shape)
    for wk, t in zip(w, tensors):
        out = out + wk * t.values

    def bw(g):
        grads = [g * wk for wk in w]
        gw = np.array([[np.sum(g * t.values) for t in tensors]])
        return (*grads, gw)

    return _result(out, (*tensors, weights), bw)


def nll(log_probs: Tensor, label: int) -> Tensor:
    """-log_probs[0, label] for a (1, C) row."""
    c = log_probs.shape[1]

    def bw(g):
        out = np.zeros((1, c))
        out[0, label] = -float(g)
        return (out,)

    return _result(np.array(-log_probs.values[0, label]), (log_probs,), bw)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against 0/1 targets."""
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    x = logits.values
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    n = x.size
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _result(np.array(loss.mean()), (logits,), lambda g: (float(g) * (s - y) / n,))


def cv_squared(a: Tensor) -> Tensor:
    """Squared coefficient of variation (population variance / mean²) of all entries."""
    x = a.values
    n = x.size
    m = x.mean()
    var = ((x - m) ** 2).mean()
    out = var / m**2

    def bw(g):
        dvar = 2.0 * (x - m) / n
        dm = np.full(x.shape, 1.0 / n)
        return (float(g) * (dvar / m**2 - 2.0 * var / m**3 * dm),)

    return _result(np.array(out), (a,), bw)


# --------------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring gradients."""
    if loss.values.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------- optimisation


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float, weight_decay: float):
    """One SGD step: v <- momentum*v + (g + wd*p); p <- p - lr*v.

    Works on matching sequences of arrays and returns ``(new_params, new_velocity)``.
    """
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        p, g, v = (np.asarray(x, dtype=np.float64) for x in (p, g, v))
        if not p.shape == g.shape == v.shape:
            raise ShapeMismatch(f"sgd shapes {p.shape}, {g.shape}, {v.shape}")
        v = momentum * v + (g + weight_decay * p)
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


class SGD:
    """In-place momentum SGD over a list of leaf tensors."""

    def __init__(self, params: list, lr: float = 1e-2, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        new_p, self.velocity = sgd_momentum_step(
            [p.values for p in self.params], grads, self.velocity, self.lr, self.momentum, self.weight_decay
        )
        for p, v in zip(self.params, new_p):
            p.values = v


def multistep_lr(base_lr: float, epoch: int, total_epochs: int, fractions=(0.6, 0.85), gamma: float = 0.1) -> float:
    milestones = [int(f * total_epochs) for f in fractions]
    return float(base_lr * gamma ** len([m for m in milestones if epoch >= m]))


# --------------------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"MMPGCKP1"


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Named float64 arrays behind a JSON manifest, all little-endian."""
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8", "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple:
    from .errors import BadMagic, TruncatedPayload

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a checkpoint")
    if len(raw) < 16:
        raise TruncatedPayload(f"{path}: header truncated")
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    if 16 + mlen > len(raw):
        raise TruncatedPayload(f"{path}: manifest truncated")
    manifest = json.loads(raw[16:16 + mlen])
    base = 16 + mlen
    out = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise TruncatedPayload(f"{path}: tensor {e['name']} truncated")
        out[e["name"]] = np.frombuffer(raw, dtype="<f8", count=e["nbytes"] // 8, offset=start).reshape(e["shape"]).copy()
    return out, manifest["meta"]


# --------------------------------------------------------------------------- gradient checking


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(loss_fn, params: list, rng: np.random.Generator, n_samples: int = 20, eps: float = 1e-5):
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must rebuild the graph from the current parameter values and
    return a scalar tensor. Samples ``n_samples`` coordinates per parameter
    (all of them when the parameter is smaller). Returns a list of
    ``(name, flat_index, analytic, numeric, relative_error)``.
    """
    for p in params:
        p.grad = None
    backward(loss_fn())
    rows = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        count = min(n_samples, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            old = flat[idx]
            flat[idx] = old + eps
            up = loss_fn().item()
            flat[idx] = old - eps
            down = loss_fn().item()
            flat[idx] = old
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[idx])
            rows.append((p.name, int(idx), a, numeric, relative_error(a, numeric)))
    return rows
