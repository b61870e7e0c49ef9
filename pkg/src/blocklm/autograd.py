"""Reverse-mode automatic differentiation over small float32 arrays.

A Tensor wraps a rank<=4, row-major float32 numpy array. Differentiable
ops (see ops.py) record their parents and a closure that maps the output
gradient to parent gradients; `backward` walks the tape once, accumulates
gradients on every tensor that requires them, and then frees the graph.
Running backward twice over the same graph raises instead of silently
double-counting.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import GradientError, ShapeError

MAX_RANK = 4

_local = threading.local()


def _state():
    if not hasattr(_local, "grad_enabled"):
        _local.grad_enabled = True
        _local.meters = []
    return _local


class no_grad:
    """Context manager: ops inside do not record the tape (inference path)."""

    def __enter__(self):
        st = _state()
        self._prev = st.grad_enabled
        st.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state().grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _state().grad_enabled


class FlopMeter:
    """Counts forward-pass multiply-accumulate FLOPs (2 per MAC).

    Used as a context manager; nested meters all observe the same ops, so
    a model component's meter sees exactly the matmuls issued inside its
    forward. Only forward matmuls are counted: backward closures bypass
    the op layer.
    """

    def __init__(self, name: str = ""):
        self.name = name
        self.flops = 0
        self.calls = 0
        self._depth = 0

    def reset(self):
        self.flops = 0
        self.calls = 0

    def __enter__(self):
        if self._depth == 0:
            _state().meters.append(self)
        self._depth += 1
        return self

    def __exit__(self, *exc):
        self._depth -= 1
        if self._depth == 0:
            _state().meters.remove(self)
        return False


def add_flops(n: int):
    st = _state()
    for m in st.meters:
        m.flops += n
        m.calls += 1


class Tensor:
    """Dense float32 array with optional gradient tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"tensors are limited to rank {MAX_RANK}, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def record(out_data: np.ndarray, parents, grad_fn) -> Tensor:
    """Wrap an op result; attaches the tape node when grads are wanted."""
    out = Tensor(out_data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor):
    """Populate .grad for every tensor the scalar `loss` depends on.

    The graph is consumed: a second backward over the same graph raises.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError("backward already ran on this graph; rebuild the forward pass first")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor with requires_grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed:
            raise GradientError("part of this graph was already consumed by an earlier backward")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        node._consumed = bool(node._parents) or node is loss
        fn = node._grad_fn
        if fn is None:
            continue
        grads = fn(node.grad)
        for p, g in zip(node._parents, grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.data.shape:
                raise GradientError(
                    f"internal: gradient shape {g.shape} != tensor shape {p.data.shape}"
                )
            if p.grad is None:
                p.grad = np.asarray(g, dtype=np.float32)
            else:
                np.add(p.grad, g, out=p.grad)
        if node is not loss:
            node.grad = None
        node._parents = ()
        node._grad_fn = None
