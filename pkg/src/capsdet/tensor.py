"""Dense float64 tensors with reverse-mode automatic differentiation.

Small, scratch-built tape: each operation records its parents and a
backward rule; ``backward`` replays the tape in reverse topological
order. Only the ops the capsule model and the attack gradients need are
implemented -- 2-D matmul, elementwise arithmetic with numpy-style
broadcasting, reductions, softmax, norms, squash, the routing einsums,
and a generic "left @ X @ right.T" linear map used by the image
pipeline.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "matmul",
    "concat",
    "softmax",
    "l2_norm",
    "row_norms",
    "squash_rows",
    "caps_predict",
    "weighted_votes",
    "agreement",
    "max_reduce",
    "log_abs",
    "sandwich",
    "backward",
]


class Tensor:
    """A float64 array plus optional gradient and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.data.copy()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)

    def sqrt(self):
        return tensor_sqrt(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_rule) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), rule)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0

    def rule(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), rule)


def tensor_sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def rule(g):
        if a.requires_grad:
            a._accumulate(g / (2.0 * np.maximum(out_data, 1e-300)))

    return _make(out_data, (a,), rule)


def log_abs(a: Tensor, eps: float = 1e-12) -> Tensor:
    """log(|x| + eps), differentiable almost everywhere (grad 0 at x == 0)."""
    a = _as_tensor(a)
    absx = np.abs(a.data)

    def rule(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data) / (absx + eps))

    return _make(np.log(absx + eps), (a,), rule)


# -- shape / reduction -------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape

    def rule(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(a.data.reshape(shape), (a,), rule)


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), rule)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def rule(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule)


def max_reduce(a: Tensor) -> Tensor:
    """Maximum of a 1-D tensor; gradient routes to the first argmax."""
    a = _as_tensor(a)
    if a.data.ndim != 1:
        raise ContractError(f"max_reduce expects a 1-D tensor, got shape {a.data.shape}")
    idx = int(np.argmax(a.data))

    def rule(g):
        if a.requires_grad:
            gfull = np.zeros_like(a.data)
            gfull[idx] = g
            a._accumulate(gfull)

    return _make(a.data[idx], (a,), rule)


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ContractError(
            f"matmul shape mismatch: {a.data.shape} by {b.data.shape}"
        )

    def rule(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), rule)


def sandwich(x: Tensor, left: np.ndarray, right: np.ndarray) -> Tensor:
    """Fixed linear map ``left @ x @ right.T`` (left/right are constants).

    Covers the separable image ops: 2-D DCT, bilinear resize and area
    pooling are all expressible this way, with adjoint
    ``left.T @ g @ right``.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ContractError(f"sandwich expects a 2-D tensor, got shape {x.data.shape}")

    def rule(g):
        if x.requires_grad:
            x._accumulate(left.T @ g @ right)

    return _make(left @ x.data @ right.T, (x,), rule)


# -- nonlinearities with bespoke rules ---------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        if a.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            a._accumulate(y * (g - dot))

    return _make(y, (a,), rule)


NORM_GUARD = 1e-12


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm over all elements; zero gradient below the guard."""
    a = _as_tensor(a)
    n = float(np.sqrt(np.sum(a.data * a.data)))

    def rule(g):
        if a.requires_grad:
            if n < NORM_GUARD:
                return
            a._accumulate(g * a.data / n)

    return _make(n, (a,), rule)


def row_norms(a: Tensor) -> Tensor:
    """Per-row Euclidean norms of a 2-D tensor, guarded like l2_norm."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"row_norms expects a 2-D tensor, got shape {a.data.shape}")
    n = np.sqrt(np.sum(a.data * a.data, axis=1))

    def rule(g):
        if a.requires_grad:
            safe = np.where(n < NORM_GUARD, 1.0, n)
            scale = np.where(n < NORM_GUARD, 0.0, g / safe)
            a._accumulate(scale[:, None] * a.data)

    return _make(n, (a,), rule)


def squash_rows(a: Tensor) -> Tensor:
    """Row-wise squash: v = (|s|^2 / (1 + |s|^2)) * s / |s|.

    Rows with norm below the guard map to zero with zero gradient, making
    the nonlinearity total.
    """
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ContractError(f"squash_rows expects a 2-D tensor, got shape {a.data.shape}")
    n = np.sqrt(np.sum(a.data * a.data, axis=1))
    small = n < NORM_GUARD
    safe_n = np.where(small, 1.0, n)
    h = np.where(small, 0.0, safe_n / (1.0 + safe_n * safe_n))  # v = h(n) * s
    out_data = h[:, None] * a.data

    def rule(g):
        if not a.requires_grad:
            return
        # dv/ds = h(n) I + (h'(n)/n) s s^T, h'(n) = (1-n^2)/(1+n^2)^2
        hp = (1.0 - safe_n * safe_n) / (1.0 + safe_n * safe_n) ** 2
        coef = np.where(small, 0.0, hp / safe_n)
        sg = np.sum(a.data * g, axis=1)
        a._accumulate(h[:, None] * g + (coef * sg)[:, None] * a.data)

    return _make(out_data, (a,), rule)


# -- routing einsums ---------------------------------------------------


def caps_predict(caps: Tensor, transforms: Tensor) -> Tensor:
    """Votes[i,k,:] = caps[i,:] @ transforms[i,k,:,:]."""
    caps, transforms = _as_tensor(caps), _as_tensor(transforms)
    if (
        caps.data.ndim != 2
        or transforms.data.ndim != 4
        or transforms.data.shape[0] != caps.data.shape[0]
        or transforms.data.shape[2] != caps.data.shape[1]
    ):
        raise ContractError(
            f"caps_predict shape mismatch: caps {caps.data.shape}, "
            f"transforms {transforms.data.shape}"
        )

    def rule(g):
        if caps.requires_grad:
            caps._accumulate(np.einsum("iko,ikdo->id", g, transforms.data))
        if transforms.requires_grad:
            transforms._accumulate(np.einsum("id,iko->ikdo", caps.data, g))

    return _make(np.einsum("id,ikdo->iko", caps.data, transforms.data), (caps, transforms), rule)


def weighted_votes(couplings: Tensor, votes: Tensor) -> Tensor:
    """raw[k,:] = sum_i couplings[i,k] * votes[i,k,:]."""
    couplings, votes = _as_tensor(couplings), _as_tensor(votes)

    def rule(g):
        if couplings.requires_grad:
            couplings._accumulate(np.einsum("iko,ko->ik", votes.data, g))
        if votes.requires_grad:
            votes._accumulate(np.einsum("ik,ko->iko", couplings.data, g))

    return _make(np.einsum("ik,iko->ko", couplings.data, votes.data), (couplings, votes), rule)


def agreement(votes: Tensor, class_caps: Tensor) -> Tensor:
    """agree[i,k] = <votes[i,k,:], class_caps[k,:]>."""
    votes, class_caps = _as_tensor(votes), _as_tensor(class_caps)

    def rule(g):
        if votes.requires_grad:
            votes._accumulate(np.einsum("ik,ko->iko", g, class_caps.data))
        if class_caps.requires_grad:
            class_caps._accumulate(np.einsum("iko,ik->ko", votes.data, g))

    return _make(np.einsum("iko,ko->ik", votes.data, class_caps.data), (votes, class_caps), rule)


# -- tape --------------------------------------------------------------


class Tape:
    """Topologically ordered list of recorded operations below a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay_backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from ``loss``."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor with no recorded operations")
    Tape.trace(loss).replay_backward(loss)
