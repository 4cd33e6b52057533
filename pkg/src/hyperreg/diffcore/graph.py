"""Static computation graphs with reverse-mode differentiation.

A Graph is built once through GraphBuilder (shape checking happens at build
time), then evaluated any number of times. Evaluations are independent: each
``Graph.run`` returns a fresh Run holding the tape, so one built graph can
serve concurrent evaluations as long as each call gets its own Run.

Parameters are bound at call time (a dict of named arrays), which lets the
same topology serve different weight vectors.
"""

from __future__ import annotations

import numpy as np

from .ops import LazyOuter, OP_SET, ShapeMismatchError


class GraphError(ValueError):
    pass


class Node:
    __slots__ = ("idx", "op", "args", "attrs", "shape", "name", "kind")

    def __init__(self, idx, op, args, attrs, shape, name=None, kind="op"):
        self.idx = idx
        self.op = op
        self.args = args          # indices of input nodes
        self.attrs = attrs
        self.shape = tuple(int(s) for s in shape)
        self.name = name          # set for inputs/params/consts
        self.kind = kind          # op | input | param | const

    def __repr__(self):
        return f"Node({self.idx}, {self.op or self.kind}, shape={self.shape})"


class GraphBuilder:
    """Accumulates nodes; every op method validates shapes immediately."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}
        self.params: dict[str, Node] = {}
        self.consts: dict[int, np.ndarray] = {}
        self.outputs: dict[str, Node] = {}

    def _new(self, op, args, attrs, shape, name=None, kind="op"):
        node = Node(len(self.nodes), op, tuple(a.idx for a in args), attrs, shape, name, kind)
        self.nodes.append(node)
        return node

    def input(self, name, shape):
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate leaf name: {name}")
        node = self._new(None, (), {}, shape, name, "input")
        self.inputs[name] = node
        return node

    def param(self, name, shape):
        if name in self.inputs or name in self.params:
            raise GraphError(f"duplicate leaf name: {name}")
        node = self._new(None, (), {}, shape, name, "param")
        self.params[name] = node
        return node

    def const(self, array):
        # np.array (not ascontiguousarray) so 0-d scalars keep shape ()
        array = np.array(array, dtype=self.dtype, order="C")
        node = self._new(None, (), {}, array.shape, None, "const")
        self.consts[node.idx] = array
        return node

    def apply(self, op, *args, **attrs):
        spec = OP_SET.get(op)
        if spec is None:
            raise GraphError(f"unknown op: {op}")
        if spec.arity is not None and len(args) != spec.arity:
            raise GraphError(f"{op} expects {spec.arity} inputs, got {len(args)}")
        shape = spec.infer(attrs, *[a.shape for a in args])
        return self._new(op, args, attrs, shape)

    # thin wrappers so model code reads naturally
    def add(self, a, b):
        return self.apply("add", a, b)

    def subtract(self, a, b):
        return self.apply("subtract", a, b)

    def multiply(self, a, b):
        return self.apply("multiply", a, b)

    def divide(self, a, b):
        return self.apply("divide", a, b)

    def square(self, x):
        return self.apply("square", x)

    def exp(self, x):
        return self.apply("exp", x)

    def log(self, x, eps=None):
        return self.apply("log", x) if eps is None else self.apply("log", x, eps=eps)

    def scale(self, x, c):
        return self.apply("scale", x, c=float(c))

    def relu(self, x):
        return self.apply("relu", x)

    def leaky_relu(self, x, alpha=0.2):
        return self.apply("leaky_relu", x, alpha=alpha)

    def sigmoid(self, x):
        return self.apply("sigmoid", x)

    def linear(self, x):
        return self.apply("linear", x)

    def sum(self, x, axis=None):
        return self.apply("sum", x, axis=axis)

    def mean(self, x, axis=None):
        return self.apply("mean", x, axis=axis)

    def reshape(self, x, shape):
        return self.apply("reshape", x, shape=tuple(shape))

    def slice(self, x, start, stop):
        return self.apply("slice", x, start=int(start), stop=int(stop))

    def concat(self, xs, axis=-1):
        return self.apply("channel_concat", *xs, axis=axis)

    def dense(self, x, w, b):
        return self.apply("dense", x, w, b)

    def matmul(self, a, b):
        return self.apply("matmul", a, b)

    def transpose(self, x):
        return self.apply("transpose", x)

    def conv2d(self, x, k):
        return self.apply("conv2d", x, k)

    def max_pool(self, x, size=2):
        return self.apply("max_pool", x, size=size)

    def upsample_nearest(self, x, factor=2):
        return self.apply("upsample_nearest", x, factor=factor)

    def spatial_gradient(self, x, axis):
        return self.apply("spatial_gradient", x, axis=axis)

    def grid_sample(self, img, coords):
        return self.apply("grid_sample", img, coords)

    def output(self, name, node):
        self.outputs[name] = node
        return node

    def build(self):
        if not self.outputs:
            raise GraphError("graph has no outputs")
        return Graph(self)


class Graph:
    """Immutable, topologically ordered operation list."""

    def __init__(self, builder: GraphBuilder):
        self.dtype = builder.dtype
        self.nodes = tuple(builder.nodes)
        self.inputs = dict(builder.inputs)
        self.params = dict(builder.params)
        self.consts = {i: a for i, a in builder.consts.items()}
        self.outputs = dict(builder.outputs)
        # per-output dependency cone, computed lazily
        self._cones: dict[int, np.ndarray] = {}

    def _cone(self, out_idx):
        mask = self._cones.get(out_idx)
        if mask is None:
            mask = np.zeros(len(self.nodes), dtype=bool)
            mask[out_idx] = True
            for node in reversed(self.nodes):
                if mask[node.idx]:
                    for a in node.args:
                        mask[a] = True
            self._cones[out_idx] = mask
        return mask

    def run(self, inputs, params=None):
        """Evaluate all outputs; returns a Run carrying the tape."""
        params = params or {}
        vals: list = [None] * len(self.nodes)
        saved: list = [None] * len(self.nodes)
        for name, node in self.inputs.items():
            if name not in inputs:
                raise GraphError(f"unbound input: {name}")
            arr = np.asarray(inputs[name], dtype=self.dtype)
            if arr.shape != node.shape:
                raise ShapeMismatchError(f"input {name}: bound shape {arr.shape} vs declared {node.shape}")
            vals[node.idx] = arr
        for name, node in self.params.items():
            if name not in params:
                raise GraphError(f"unbound parameter: {name}")
            arr = np.asarray(params[name], dtype=self.dtype)
            if arr.shape != node.shape:
                raise ShapeMismatchError(f"param {name}: bound shape {arr.shape} vs declared {node.shape}")
            vals[node.idx] = arr
        for idx, arr in self.consts.items():
            vals[idx] = arr if arr.dtype == self.dtype else arr.astype(self.dtype)
        for node in self.nodes:
            if node.kind != "op":
                continue
            spec = OP_SET[node.op]
            args = [vals[a] for a in node.args]
            vals[node.idx], saved[node.idx] = spec.forward(node.attrs, *args)
        return Run(self, vals, saved)


class Run:
    """One forward evaluation; grads may be pulled from any scalar output."""

    def __init__(self, graph, vals, saved):
        self.graph = graph
        self._vals = vals
        self._saved = saved

    def value(self, name):
        return self._vals[self.graph.outputs[name].idx]

    def node_value(self, node):
        return self._vals[node.idx]

    def backward(self, output, wrt_params=None, wrt_inputs=(), lazy=False):
        """Reverse sweep from a scalar output.

        Returns ({param: grad}, {input: grad}). Parameters outside the
        output's dependency cone get zero gradients of the right shape.
        lazy=True may hand back LazyOuter objects for huge dense-layer
        weight gradients (optimizer fast path); by default everything is
        materialized to plain arrays.
        """
        g = self.graph
        out_node = g.outputs[output] if isinstance(output, str) else output
        if out_node.shape != ():
            raise GraphError(f"backward needs a scalar output, got shape {out_node.shape}")
        if wrt_params is None:
            wrt_params = list(g.params)
        wrt_inputs = list(wrt_inputs)

        cone = g._cone(out_node.idx)
        # nodes that any requested leaf feeds into
        need = np.zeros(len(g.nodes), dtype=bool)
        for name in wrt_params:
            need[g.params[name].idx] = True
        for name in wrt_inputs:
            need[g.inputs[name].idx] = True
        for node in g.nodes:
            if node.kind == "op" and any(need[a] for a in node.args):
                need[node.idx] = True
        active = cone & need

        grads: list = [None] * len(g.nodes)
        grads[out_node.idx] = np.asarray(1.0, dtype=g.dtype)
        for node in reversed(g.nodes):
            if node.kind != "op" or grads[node.idx] is None or not active[node.idx]:
                continue
            spec = OP_SET[node.op]
            args = [self._vals[a] for a in node.args]
            in_grads = spec.backward(node.attrs, grads[node.idx], self._saved[node.idx], *args)
            for a, ig in zip(node.args, in_grads):
                if ig is None or not active[a]:
                    continue
                if grads[a] is None:
                    grads[a] = ig
                else:
                    grads[a] = grads[a] + ig

        def collect(node):
            got = grads[node.idx]
            if got is None:
                return np.zeros(node.shape, dtype=g.dtype)
            if isinstance(got, LazyOuter) and not lazy:
                return got.materialize()
            return got

        pgrads = {name: collect(g.params[name]) for name in wrt_params}
        igrads = {name: collect(g.inputs[name]) for name in wrt_inputs}
        return pgrads, igrads


def forward(graph, inputs, params=None):
    """Functional form of Graph.run (module-level convenience)."""
    return graph.run(inputs, params)


def backward(run, output, wrt_params=None, wrt_inputs=()):
    """Functional form of Run.backward."""
    return run.backward(output, wrt_params, wrt_inputs)
