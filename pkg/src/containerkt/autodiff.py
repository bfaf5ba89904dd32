"""A small reverse-mode autodiff over numpy arrays.

Each primitive returns a :class:`Tensor` that remembers its inputs and a
closure mapping the output gradient to input gradients.  :func:`backward`
walks that record once in reverse topological order, accumulates gradients on
leaf tensors, and then frees the record; a second call on the same loss raises.

Only the operations needed by the knowledge-tracing model are provided.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphConsumedError",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "concat",
    "reshape",
    "transpose",
    "row_gather",
    "sigmoid",
    "tanh",
    "relu",
    "dropout",
    "dropout_mask",
    "softmax_masked",
    "bce_masked",
    "lstm",
    "backward",
    "gradcheck",
]

_GRAD_ENABLED = True


class GraphConsumedError(RuntimeError):
    """Backward was requested on a record that has already been swept."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _not_scalar(shape):
    raise ValueError(f"expected a single-element tensor, got shape {shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * on,))


# --------------------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat along axis {axis}: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(out, tensors, bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def row_gather(table: Tensor, indices) -> Tensor:
    """``table[indices]`` for a 2-D table; index -1 produces an all-zero row.

    Gradients of repeated indices accumulate; -1 positions send no gradient.
    """
    if table.ndim != 2:
        raise ValueError(f"row_gather needs a 2-D table, got shape {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < -1 or idx.max() >= n):
        raise IndexError(f"row_gather index out of range for table with {n} rows")
    valid = idx >= 0
    out = table.data[np.where(valid, idx, 0)]
    out[~valid] = 0

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, idx[valid], g[valid])
        return (grad,)

    return _make(out, (table,), bw)


# --------------------------------------------------------------------------- stochastic


def dropout_mask(shape: Sequence[int], rate: float, seed: int, layer_id: int, step: int) -> np.ndarray:
    """Keep-mask from a counter-based Philox stream keyed by (seed, layer, step)."""
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, ((layer_id & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF)], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random(tuple(shape)) >= rate


def dropout(a: Tensor, rate: float, train: bool, seed: int = 0, layer_id: int = 0, step: int = 0) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    keep = dropout_mask(a.shape, rate, seed, layer_id, step)
    factor = keep / (1.0 - rate)
    factor = factor.astype(a.data.dtype)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


# --------------------------------------------------------------------------- attention / loss


def softmax_masked(logits: Tensor, allowed) -> Tensor:
    """Softmax over the last axis restricted to ``allowed`` entries.

    Disallowed entries get exactly zero weight; a row with nothing allowed is
    all zeros rather than uniform.
    """
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), logits.shape)
    x = np.where(allowed, logits.data, -np.inf)
    row_max = x.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(allowed, np.exp(x - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    w = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0).astype(logits.data.dtype)

    def bw(g):
        return (w * (g - (g * w).sum(axis=-1, keepdims=True)),)

    return _make(w, (logits,), bw)


BCE_CLAMP = 1e-7


def bce_masked(probs: Tensor, labels, loss_mask) -> Tensor:
    """Mean binary cross-entropy over positions where ``loss_mask`` is true."""
    labels = np.broadcast_to(np.asarray(labels, dtype=probs.data.dtype), probs.shape)
    mask = np.broadcast_to(np.asarray(loss_mask, dtype=bool), probs.shape)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("bce_masked: loss_mask selects no positions")
    p = np.clip(probs.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    terms = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    loss = np.asarray(terms[mask].sum() / count, dtype=probs.data.dtype)
    inside = (probs.data >= BCE_CLAMP) & (probs.data <= 1.0 - BCE_CLAMP)

    def bw(g):
        dp = (-labels / p + (1.0 - labels) / (1.0 - p)) / count
        return (np.where(mask & inside, dp, 0.0) * g,)

    return _make(loss, (probs,), bw)


# --------------------------------------------------------------------------- recurrent


def lstm(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, step_mask=None) -> Tensor:
    """Single-layer LSTM over ``x`` of shape (batch, steps, in) from a zero state.

    Gate blocks in the 4H axis are ordered input, forget, cell, output.
    ``step_mask`` (batch, steps) zeroes hidden and cell state wherever it is
    false, so masked steps leave the following state as if starting fresh.
    """
    if x.ndim != 3:
        raise ValueError(f"lstm input must be (batch, steps, features), got {x.shape}")
    B, L, D = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (D, 4 * H) or w_hh.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise ValueError(
            f"lstm weight shapes {w_ih.shape}, {w_hh.shape}, {bias.shape} do not match input {x.shape} and hidden {H}"
        )
    dtype = x.data.dtype
    m = None if step_mask is None else np.asarray(step_mask, dtype=dtype).reshape(B, L, 1)

    xw = np.matmul(x.data, w_ih.data) + bias.data
    hs = np.zeros((B, L, H), dtype=dtype)
    gates = np.empty((B, L, 4 * H), dtype=dtype)
    c_tilde = np.empty((B, L, H), dtype=dtype)
    tanh_c = np.empty((B, L, H), dtype=dtype)
    h = np.zeros((B, H), dtype=dtype)
    c = np.zeros((B, H), dtype=dtype)
    c_prev_all = np.empty((B, L, H), dtype=dtype)
    for t in range(L):
        z = xw[:, t] + h @ w_hh.data
        ifo = _sigmoid(np.concatenate([z[:, : 2 * H], z[:, 3 * H :]], axis=1))
        i, f, o = ifo[:, :H], ifo[:, H : 2 * H], ifo[:, 2 * H :]
        g = np.tanh(z[:, 2 * H : 3 * H])
        c_prev_all[:, t] = c
        ct = f * c + i * g
        tc = np.tanh(ct)
        ht = o * tc
        if m is not None:
            ct = ct * m[:, t]
            ht = ht * m[:, t]
        gates[:, t, :H], gates[:, t, H : 2 * H], gates[:, t, 2 * H : 3 * H], gates[:, t, 3 * H :] = i, f, g, o
        c_tilde[:, t] = ct
        tanh_c[:, t] = tc
        hs[:, t] = ht
        h, c = ht, ct

    def bw(grad_h):
        dxw = np.empty_like(xw)
        dw_hh = np.zeros_like(w_hh.data)
        dh_next = np.zeros((B, H), dtype=dtype)
        dc_next = np.zeros((B, H), dtype=dtype)
        for t in range(L - 1, -1, -1):
            i = gates[:, t, :H]
            f = gates[:, t, H : 2 * H]
            g = gates[:, t, 2 * H : 3 * H]
            o = gates[:, t, 3 * H :]
            tc = tanh_c[:, t]
            dh = grad_h[:, t] + dh_next
            dc = dc_next
            if m is not None:
                dh = dh * m[:, t]
                dc = dc * m[:, t]
            dct = dc + dh * o * (1.0 - tc * tc)
            do = dh * tc
            di = dct * g
            dg = dct * i
            df = dct * c_prev_all[:, t]
            dz = np.concatenate(
                [di * i * (1.0 - i), df * f * (1.0 - f), dg * (1.0 - g * g), do * o * (1.0 - o)], axis=1
            )
            dxw[:, t] = dz
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H), dtype=dtype)
            dw_hh += h_prev.T @ dz
            dh_next = dz @ w_hh.data.T
            dc_next = dct * f
        dx = np.matmul(dxw, w_ih.data.T)
        dw_ih = x.data.reshape(B * L, D).T @ dxw.reshape(B * L, 4 * H)
        db = dxw.sum(axis=(0, 1))
        return dx, dw_ih, dw_hh, db

    return _make(hs, (x, w_ih, w_hh, bias), bw)


# --------------------------------------------------------------------------- backward


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad.

    The record behind ``loss`` is released afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran on this graph; re-run the forward pass")
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node._consumed = True
    loss._consumed = True


def gradcheck(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Max over all parameter entries of ``|analytic - numeric| / max(1, |numeric|)``.

    ``f`` re-runs the forward pass and returns a scalar tensor.  Numeric
    derivatives use central differences with step ``eps``.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    params = list(params)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in gradcheck")
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            raise FloatingPointError(f"non-finite analytic gradient for {p.name or p.shape}")
        flat = p.data.reshape(-1)
        a_flat = analytic.reshape(-1)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f().item()
                flat[k] = orig - eps
                fm = f().item()
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError(f"non-finite loss while perturbing {p.name or p.shape}[{k}]")
                numeric = (fp - fm) / (2.0 * eps)
                worst = max(worst, abs(a_flat[k] - numeric) / max(1.0, abs(numeric)))
    return worst
