"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Each primitive returns a `Tensor` whose recorded parents and adjoint closure
form the tape; `backward` replays it in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents: tuple[Tensor, ...] = tuple(parents)
        self._backward_fn: Optional[Callable[[np.ndarray], Sequence]] = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _op(out_data, parents, backward_fn) -> Tensor:
    return Tensor(out_data, parents=parents, backward_fn=backward_fn)


class ShapeMismatchError(ValueError):
    pass


def matmul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeMismatchError(f"matmul shapes {a.shape} and {b.shape}")

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _op(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeMismatchError(f"add shapes {a.shape} and {b.shape}")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeMismatchError(f"mul shapes {a.shape} and {b.shape}")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _op(a.data * c, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape) -> Tensor:
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),)
    )


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): min={ids.min()} max={ids.max()}"
        )
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _op(out, (table,), bw)


def take(a: Tensor, idx: np.ndarray, axis: int) -> Tensor:
    idx = np.asarray(idx)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        index = [slice(None)] * a.data.ndim
        index[axis] = idx
        np.add.at(ga, tuple(index), g)
        return (ga,)

    return _op(out, (a,), bw)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(out, (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    return _op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),)
    )


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != x.shape[-1:]:
        raise ShapeMismatchError(f"rms_norm gain {gain.shape} vs input {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data**2, axis=-1, keepdims=True) + eps)
    out = x.data * inv * gain.data

    def bw(g):
        gy = g * gain.data
        dot = np.sum(gy * x.data, axis=-1, keepdims=True)
        gx = gy * inv - x.data * (inv**3) * dot / d
        ggain = np.sum(g * x.data * inv, axis=tuple(range(x.data.ndim - 1)))
        return gx, ggain

    return _op(out, (x, gain), bw)


def silu_gate(gate: Tensor, up: Tensor) -> Tensor:
    """SwiGLU-style gating: silu(gate) * up."""
    if gate.shape != up.shape:
        raise ShapeMismatchError(f"silu_gate shapes {gate.shape} and {up.shape}")
    sig = 1.0 / (1.0 + np.exp(-gate.data))
    silu = gate.data * sig
    out = silu * up.data

    def bw(g):
        dsilu = sig * (1.0 + gate.data * (1.0 - sig))
        return g * up.data * dsilu, g * silu

    return _op(out, (gate, up), bw)


def masked_fill(x: Tensor, additive_mask: np.ndarray) -> Tensor:
    """Add a 0 / -inf mask; gradients are zeroed on masked entries."""
    out = x.data + additive_mask
    blocked = np.isneginf(additive_mask)

    def bw(g):
        return (_unbroadcast(np.where(blocked, 0.0, g), x.shape),)

    return _op(out, (x,), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    m = np.max(x.data, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - m)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _op(y, (x,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token-level cross-entropy; `targets` holds class indices."""
    targets = np.asarray(targets)
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    if flat.shape[0] != tflat.shape[0]:
        raise ShapeMismatchError(
            f"cross_entropy logits {logits.shape} vs targets {targets.shape}"
        )
    n = flat.shape[0]
    m = np.max(flat, axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(flat - m), axis=-1))
    losses = lse - flat[np.arange(n), tflat]
    out = np.asarray(losses.mean())

    def bw(g):
        p = np.exp(flat - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), tflat] -= 1.0
        return ((float(g) / n) * p.reshape(logits.shape),)

    return _op(out, (logits,), bw)


def mean_abs_error(pred: Tensor, target: np.ndarray) -> Tensor:
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"mae shapes {pred.shape} and {target.shape}")
    diff = pred.data - target
    out = np.asarray(np.abs(diff).mean())

    def bw(g):
        return ((float(g) / diff.size) * np.sign(diff),)

    return _op(out, (pred,), bw)


def backward(loss: Tensor, retain_graph: bool = False):
    """Accumulate gradients of a scalar `loss` into every reachable tensor
    with `requires_grad`."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is not None:
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                if p._backward_fn is None:
                    # Leaf: accumulate into .grad
                    if p.grad is None:
                        p.grad = np.array(pg, copy=True)
                    else:
                        p.grad = p.grad + pg
                else:
                    if id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
        elif node is loss:
            # Scalar leaf used directly as loss.
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords_per_tensor: int = 50,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare tape gradients against central finite differences.

    Uses the fourth-order central stencil so a relatively large step keeps
    both truncation and roundoff small at 64-bit. Subsamples up to
    `max_coords_per_tensor` coordinates per parameter and returns the worst
    relative error over the sampled coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    loss = fn()
    backward(loss)
    worst = 0.0
    for p in params:
        if not p.requires_grad:
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        n = flat.size
        coords = (
            np.arange(n)
            if n <= max_coords_per_tensor
            else rng.choice(n, size=max_coords_per_tensor, replace=False)
        )
        for c in coords:
            orig = flat[c]
            h = eps * (1.0 + abs(orig))
            vals = []
            for delta in (2 * h, h, -h, -2 * h):
                flat[c] = orig + delta
                vals.append(fn().item())
            flat[c] = orig
            fd = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * h)
            ad = gflat[c]
            denom = max(abs(fd), abs(ad), 1e-6)
            worst = max(worst, abs(fd - ad) / denom)
    return worst
