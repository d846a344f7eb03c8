"""Reverse-mode differentiation over a small graph of numpy-valued nodes."""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

BackwardRule = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    """A value in the computation graph.

    ``backward_rule`` maps the gradient of the output to one gradient per
    parent (``None`` for parents that do not need one).
    """

    __slots__ = ("value", "parents", "backward_rule", "requires_grad", "grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["Node"] = (),
        backward_rule: BackwardRule | None = None,
        requires_grad: bool | None = None,
        name: str | None = None,
    ):
        self.value = value
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<Node{label} shape={self.shape} requires_grad={self.requires_grad}>"


def leaf(value, requires_grad: bool = False, name: str | None = None) -> Node:
    return Node(np.asarray(value), requires_grad=requires_grad, name=name)


def constant(value) -> Node:
    return Node(np.asarray(value), requires_grad=False)


def topological_order(root: Node) -> list[Node]:
    """Parents-before-children ordering of every node reachable from root.

    Raises ``ValueError`` if the graph has a cycle.
    """
    order: list[Node] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Node, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise ValueError("computation graph contains a cycle")
            state[key] = 1
        if i < len(node.parents):
            stack.append((node, i + 1))
            parent = node.parents[i]
            pstate = state.get(id(parent))
            if pstate == 1:
                raise ValueError("computation graph contains a cycle")
            if pstate is None:
                stack.append((parent, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def backward(root: Node, grad: np.ndarray | None = None) -> None:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node needing it."""
    if grad is None:
        grad = np.ones_like(root.value)
    order = topological_order(root)
    for node in order:
        node.grad = None
    root.grad = np.asarray(grad, dtype=root.value.dtype)
    for node in reversed(order):
        if node.grad is None or node.backward_rule is None:
            continue
        parent_grads = node.backward_rule(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.shape != parent.value.shape:
                raise AssertionError(
                    f"gradient shape {g.shape} does not match value shape {parent.value.shape}"
                )
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.value.dtype, copy=True)
            else:
                parent.grad += g
        if not node.is_leaf:
            node.grad = None
    # Leaves that were never reached still need a well-shaped gradient.
    for node in order:
        if node.is_leaf and node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.value)


def leaves(root: Node) -> Iterable[Node]:
    return (n for n in topological_order(root) if n.is_leaf)
