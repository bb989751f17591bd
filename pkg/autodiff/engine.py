"""
Reverse-mode differentiable arrays.

Every operation in :mod:`autodiff.ops` returns a new :class:`DiffArray` that
remembers its inputs and a vector-Jacobian product. :class:`Tape` collects the
nodes reachable from a scalar root and replays their adjoints in reverse
creation order, which is a valid reverse topological order because an
output is always created after its inputs.
"""

import itertools
import threading

import numpy as np

from core.exceptions import DimensionError

MAX_AXES = 3

_state = threading.local()
_sequence = itertools.count()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


class no_grad:
    """Disable graph recording on the current thread."""

    def __enter__(self):
        self._previous = is_grad_enabled()
        _state.enabled = False
        return self

    def __exit__(self, *exc):
        _state.enabled = self._previous


class DiffArray:
    __slots__ = ("values", "grad", "requires_grad", "name", "_inputs", "_vjp", "_seq")

    # numpy must defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, values, requires_grad=False, name=None):
        values = np.array(values, dtype=np.float64)
        if values.ndim > MAX_AXES:
            raise DimensionError(f"DiffArray supports at most {MAX_AXES} axes, got shape {values.shape}")
        self.values = values
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._inputs = ()
        self._vjp = None
        self._seq = next(_sequence)

    @classmethod
    def _wrap(cls, values, inputs, vjp):
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.name = None
        out._seq = next(_sequence)
        track = is_grad_enabled() and any(i.requires_grad for i in inputs)
        out.requires_grad = track
        if track:
            out._inputs = tuple(inputs)
            out._vjp = vjp
        else:
            out._inputs = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def T(self):
        from autodiff import ops
        return ops.transpose(self)

    def item(self):
        return float(self.values)

    def detach(self):
        return DiffArray(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        Tape.from_root(self).replay(self, seed)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"DiffArray(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from autodiff import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from autodiff import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from autodiff import ops
        return ops.sub(ops.as_array(other), self)

    def __mul__(self, other):
        from autodiff import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from autodiff import ops
        return ops.div(self, other)

    def __neg__(self):
        from autodiff import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from autodiff import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from autodiff import ops
        return ops.getitem(self, index)


class Tape:
    """Ordered record of the operations that produced a root."""

    def __init__(self, nodes, leaves):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def from_root(cls, root):
        seen = set()
        nodes, leaves = [], []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._vjp is not None:
                nodes.append(node)
                stack.extend(node._inputs)
            elif node.requires_grad:
                leaves.append(node)
        nodes.sort(key=lambda n: n._seq)
        leaves.sort(key=lambda n: n._seq)
        return cls(nodes, leaves)

    def __len__(self):
        return len(self.nodes)

    def replay(self, root, seed=None):
        if seed is None:
            if root.size != 1:
                raise DimensionError(f"backward needs a seed for non-scalar root of shape {root.shape}")
            seed = np.ones_like(root.values)
        adjoints = {id(root): np.asarray(seed, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node), None)
            if g is None:
                continue
            _accumulate(node, g)
            grads = node._vjp(g)
            for inp, gi in zip(node._inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if gi.shape != inp.shape:
                    raise DimensionError(f"adjoint shape {gi.shape} does not match input shape {inp.shape}")
                key = id(inp)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
        for leaf in self.leaves:
            g = adjoints.pop(id(leaf), None)
            if g is not None:
                _accumulate(leaf, g)


def _accumulate(node, g):
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad = node.grad + g
