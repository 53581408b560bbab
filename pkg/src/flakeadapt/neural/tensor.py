"""Tensors and the recording tape used for reverse-mode gradients."""

from __future__ import annotations

import threading

import numpy as np

_state = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Ordered record of operations; ``backward`` replays it in reverse.

    Operations record themselves onto the innermost active graph of the
    calling thread. Outside any ``with Graph()`` block nothing is recorded.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, inputs, output, backward):
        self.nodes.append(Node(inputs, output, backward))

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            if node.output.requires_grad:
                _accumulate(node.output, gout)
            gins = node.backward(gout)
            for t, g in zip(node.inputs, gins):
                if g is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # leaves (parameters, inputs) that were never an op output
        for node in self.nodes:
            for t in node.inputs:
                g = grads.pop(id(t), None)
                if g is not None:
                    _accumulate(t, g)


def _accumulate(t: Tensor, g):
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def current_graph():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def emit(data, inputs, backward):
    """Wrap ``data`` as an op output and record it if any input needs a gradient."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    graph = current_graph()
    if needs and graph is not None:
        graph.record(tuple(inputs), out, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
