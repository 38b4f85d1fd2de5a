import logging
import threading
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger(__name__)

DTYPES = {
    'f32': np.float32,
    'f64': np.float64,
}


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


class GroupingError(ShapeError):
    """Raised when channel counts are not divisible by the convolution group count."""


class GraphError(RuntimeError):
    """Raised when the autodiff graph is used against its contract."""


_grad_mode = threading.local()


def is_grad_enabled():
    """
    Reports whether ops on the current thread record a graph.

    Returns:
        bool: False inside a `no_grad()` block.
    """
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad():
    """
    Disables graph recording on the current thread for the duration of the block.
    Other threads keep their own setting.
    """
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def resolve_dtype(dtype):
    """
    Maps a dtype label ('f32'/'f64') or numpy dtype to a numpy float type.

    Args:
        dtype: Label, numpy dtype or None.

    Returns:
        type: np.float32 or np.float64.
    """
    if dtype is None:
        return np.float64
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"Unsupported dtype '{dtype}', expected one of {sorted(DTYPES)}")
        return DTYPES[dtype]
    resolved = np.dtype(dtype).type
    if resolved not in (np.float32, np.float64):
        raise ValueError(f"Unsupported dtype {np.dtype(dtype).name}, expected float32 or float64")
    return resolved


def as_tensor(data, dtype=None):
    """
    Builds a dense, contiguous, row-major float array.

    Args:
        data: Array-like input.
        dtype: Target dtype label or numpy dtype. Float arrays keep their dtype when omitted.

    Returns:
        np.ndarray: The validated tensor.
    """
    if dtype is None and isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        target = data.dtype.type
    else:
        target = resolve_dtype(dtype)
    array = np.ascontiguousarray(data, dtype=target)
    if array.ndim > 0 and 0 in array.shape:
        raise ShapeError(f"Tensor dimensions must be positive, got shape {array.shape}")
    return array


class Node:
    """
    A tensor value recorded in the autodiff graph.

    Nodes created while grad mode is on and with at least one parent that
    requires a gradient keep a reference to their parents and to the closure
    that maps the output gradient to the parents' gradients.
    """
    def __init__(self, value, parents=(), op='leaf', backward_fn=None, requires_grad=False, name=None):
        """
        Initializes a Node.

        Args:
            value (np.ndarray): The tensor value.
            parents (tuple): Input nodes this node was computed from.
            op (str): Identifier of the op that produced the value.
            backward_fn (callable, optional): Maps the output gradient to a tuple of parent gradients.
            requires_grad (bool): Whether a gradient slot is kept for this node.
            name (str, optional): Name used in checkpoints and error messages.
        """
        self.value = as_tensor(value)
        self.parents = tuple(parents)
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self._backward_fn = backward_fn
        self.grad = np.zeros_like(self.value) if requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return not self.parents

    def item(self):
        """
        Returns the value of a single-element node as a Python float.
        """
        if self.value.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0)

    def backward(self):
        return backward(self)

    def __add__(self, other):
        from numerics import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from numerics import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from numerics import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from numerics import ops
        return ops.scale(self, -1.0)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ''
        return f"<Node op={self.op}{label} shape={self.shape} dtype={self.dtype.name}>"


class Parameter(Node):
    """
    A named trainable leaf.
    """
    def __init__(self, value, name):
        super().__init__(value, requires_grad=True, name=name)

    def assign(self, value):
        """
        Overwrites the parameter value in place.

        Args:
            value (np.ndarray): New value with the same shape.
        """
        value = np.asarray(value)
        if value.shape != self.value.shape:
            raise ShapeError(f"Cannot assign shape {value.shape} to parameter '{self.name}' of shape {self.shape}")
        self.value[...] = value


def make_node(value, parents, op, backward_fn):
    """
    Wraps an op result, recording graph edges only when a gradient can flow.

    Args:
        value (np.ndarray): Forward result.
        parents (tuple): Input nodes.
        op (str): Op identifier.
        backward_fn (callable): Gradient closure.

    Returns:
        Node: The result node.
    """
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Node(value, parents, op, backward_fn, requires_grad=True)
    return Node(value, op=op)


def topological_order(root):
    """
    Orders the nodes reachable from `root` so that every node follows its parents.

    Args:
        root (Node): The graph output.

    Returns:
        list: Nodes that require a gradient, parents first.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss):
    """
    Runs reverse-mode differentiation from a scalar loss.

    Interior gradients are reset on every call; leaf gradients accumulate
    until they are zeroed explicitly.

    Args:
        loss (Node): Single-element output node.

    Returns:
        dict: Mapping from each reachable trainable leaf to its gradient array.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward() called on a node that depends on no trainable leaf")

    order = topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = np.zeros_like(node.value)
    loss.grad += 1

    for node in reversed(order):
        if node.is_leaf or node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(node.grad)
        for parent, grad in zip(node.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if grad.shape != parent.shape:
                raise GraphError(f"Op '{node.op}' produced gradient of shape {grad.shape} "
                                 f"for input of shape {parent.shape}")
            parent.grad += grad

    return {node: node.grad for node in order if node.is_leaf}
