"""Reverse-mode automatic differentiation on numpy arrays.

The design is a small explicit-tape engine. A ``Tensor`` wraps an ndarray
and is treated as an immutable value; a ``Tape`` records every primitive
applied while it is active, in creation order, which is already a valid
topological order of the computation graph. ``backward`` walks that record
once in reverse, accumulating vector-Jacobian products into per-leaf
gradient buffers.

Two properties the rest of the package leans on:

* ops called with no active tape run as plain numpy (this is eval mode;
  nothing is recorded and nothing requires grad), so model code has a
  single code path for training and inference;
* every primitive checks its output for NaN/Inf. A non-finite value is an
  error state, never something to propagate silently.

Binary ops require operands of identical shape (scalars aside). There is
no generalized broadcasting; the few places the model needs a broadcast
use `repeat_axis` or pre-broadcast constants, which keeps every vjp a
plain shape-preserving expression.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

# Toggle for the per-op finiteness sweep. Left on: the scan is cheap next
# to the matmuls and turns silent divergence into a loud error.
STRICT_FINITE = True

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def _active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(data: np.ndarray, op: str) -> None:
    if STRICT_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")


class Tensor:
    """Immutable-by-convention ndarray wrapper carrying grad metadata.

    `grad` is populated (for leaves) by `backward`; it is never read by
    forward code. Mutating `data` in place voids the recorded graph, so
    don't: updates everywhere in this package build new tensors.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no grad requirement, outside any graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; the named functions below are the actual API.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(scale(self, -1.0), -other if isinstance(other, (int, float)) else other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    """One recorded primitive: output, parents, and the local vjp."""

    __slots__ = ("out", "parents", "vjp", "op")

    def __init__(self, out: Tensor, parents: tuple, vjp: Callable, op: str):
        self.out = out
        self.parents = parents
        self.vjp = vjp
        self.op = op


class Tape:
    """Recording context. Node order is creation order, hence topological.

    A tape is confined to the thread that opens it; tensors themselves are
    plain values and can cross threads freely.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")

    def __len__(self) -> int:
        return len(self.nodes)


def _record(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, tuple(parents), vjp, op))
    return out


def backward(tape: Tape, loss: Tensor) -> dict:
    """Reverse-accumulate d(loss)/d(leaf) for every requires-grad leaf.

    `loss` must be a scalar produced under `tape`. Returns a dict mapping
    each leaf Tensor that received gradient to its ndarray; the same array
    is also stored on `leaf.grad`. Fan-out sums, as it must.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            _check_finite(pg, f"backward[{node.op}]")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if key not in produced:
                leaves[key] = parent
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        out[leaf] = grads[key]
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _record(a.data + b, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _record(a.data - b, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        return scale(a, float(b))
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record(a.data * s, (a,), lambda g: (g * s,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def identity(a: Tensor) -> Tensor:
    """No-op placeholder; exists so an activation can be swapped out."""
    return a


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the trailing axis: x @ w + b.

    x: [..., In], w: [In, Out], b: [Out] or None. Leading axes are batch.
    """
    if w.data.ndim != 2:
        raise DimensionError(f"linear: weight must be 2-d, got {w.shape}")
    n_in, n_out = w.shape
    if x.shape[-1] != n_in:
        raise DimensionError(f"linear: input trailing dim {x.shape[-1]} != weight rows {n_in}")
    if b is not None and b.shape != (n_out,):
        raise DimensionError(f"linear: bias shape {b.shape} != ({n_out},)")
    xd, wd = x.data, w.data
    y = xd @ wd
    if b is not None:
        y = y + b.data

    def vjp(g):
        gx = g @ wd.T
        gw = xd.reshape(-1, n_in).T @ g.reshape(-1, n_out)
        if b is None:
            return gx, gw
        gb = g.reshape(-1, n_out).sum(axis=0)
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _record(y, parents, vjp, "linear")


def causal_depthwise_conv(h: Tensor, phi: Tensor, beta: Tensor) -> Tensor:
    """Per-channel causal convolution with full receptive field.

    h: [..., C, D], phi: [C, D], beta: [C]. Left zero-padding, so
    out[..., c, d] = sum_{k=0..d} phi[c, k] * h[..., c, d-k] + beta[c].

    Accumulation runs in ascending k so the result matches a brute-force
    (c, d, k) reference loop bitwise; do not replace the k-loop with an
    FFT or matmul formulation without dropping that guarantee.
    """
    if h.data.ndim < 2:
        raise DimensionError(f"conv: input needs [..., C, D], got {h.shape}")
    c, d = h.shape[-2], h.shape[-1]
    if phi.shape != (c, d):
        raise DimensionError(f"conv: kernel shape {phi.shape} != ({c}, {d})")
    if beta.shape != (c,):
        raise DimensionError(f"conv: bias shape {beta.shape} != ({c},)")
    hd, pd = h.data, phi.data
    out = np.zeros_like(hd)
    for k in range(d):
        out[..., k:] += pd[:, k, None] * hd[..., : d - k]
    out = out + beta.data[:, None]

    lead_axes = tuple(range(hd.ndim - 2))

    def vjp(g):
        gh = np.zeros_like(hd)
        gphi = np.zeros_like(pd)
        for k in range(d):
            gh[..., : d - k] += pd[:, k, None] * g[..., k:]
            gphi[:, k] = (g[..., k:] * hd[..., : d - k]).sum(axis=lead_axes + (-1,))
        gbeta = g.sum(axis=lead_axes + (-1,))
        return gh, gphi, gbeta

    return _record(out, (h, phi, beta), vjp, "causal_depthwise_conv")


# ---------------------------------------------------------------------------
# normalisation and regularisation
# ---------------------------------------------------------------------------

def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Max-subtracted softmax along one axis."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _record(s, (x,), vjp, "softmax_axis")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the trailing axis to zero mean, unit (population) variance,
    then apply the affine (gamma, beta)."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return _record(y, (x, gamma, beta), vjp, "layer_norm")


def dropout(x: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout. Train mode scales kept values by 1/(1-p); eval mode
    returns the input unchanged (bitwise: it is the same tensor)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"dropout: mode must be 'train' or 'eval', got {mode!r}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must lie in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: train mode with p > 0 needs an rng")
    keep = rng.random(x.shape) >= p
    factor = keep / (1.0 - p)
    return _record(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    axis = axis % x.data.ndim
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(y, (x,), vjp, "sum_axis")


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    n = x.shape[axis % x.data.ndim]
    return scale(sum_axis(x, axis, keepdims), 1.0 / n)


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum())
    return _record(y, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum_all")


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: need at least one tensor")
    axis = axis % parts[0].data.ndim
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(y, tuple(parts), vjp, "concat")


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    axis = axis % x.data.ndim
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow: [{start}, {start + length}) outside axis of extent {x.shape[axis]}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _record(x.data[idx].copy(), (x,), vjp, "narrow")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (np.transpose(g, inverse).copy(),)

    return _record(np.transpose(x.data, axes).copy(), (x,), vjp, "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _record(
        x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(x.shape).copy(),), "reshape")


def repeat_axis(x: Tensor, axis: int, reps: int) -> Tensor:
    """Tile a unit-extent axis `reps` times; the vjp sums back over it."""
    axis = axis % x.data.ndim
    if x.shape[axis] != 1:
        raise DimensionError(f"repeat_axis: axis {axis} has extent {x.shape[axis]}, need 1")
    y = np.repeat(x.data, reps, axis=axis)

    def vjp(g):
        return (g.sum(axis=axis, keepdims=True),)

    return _record(y, (x,), vjp, "repeat_axis")
