"""Finite-difference verification of reverse-mode gradients.

Checks run in 64-bit regardless of the graph's training dtype: the caller
supplies (or we rebuild) a float64 graph, since central differences at
h=1e-4 drown in float32 rounding.

The reported figure is a scale-relative error:
    max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-12)
so tensors whose gradients are legitimately tiny do not trip the check.
"""

from __future__ import annotations

import numpy as np

from .graph import GraphBuilder


def _central_diff(f, arr, flat_idx, h):
    orig = arr.flat[flat_idx]
    arr.flat[flat_idx] = orig + h
    fp = f()
    arr.flat[flat_idx] = orig - h
    fm = f()
    arr.flat[flat_idx] = orig
    return (fp - fm) / (2.0 * h)


def fd_check_graph(graph, inputs, params=None, output=None, wrt_params=None,
                   wrt_inputs=(), h=1e-4, max_entries=None, rng=None):
    """Max scale-relative error between backward() and central differences.

    max_entries caps how many entries per tensor are probed (2 forwards per
    entry); None probes everything.
    """
    if graph.dtype != np.float64:
        raise ValueError("fd_check_graph requires a float64 graph")
    params = {k: np.array(v, dtype=np.float64) for k, v in (params or {}).items()}
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if output is None:
        if len(graph.outputs) != 1:
            raise ValueError("output name required for multi-output graph")
        output = next(iter(graph.outputs))
    if wrt_params is None:
        wrt_params = list(graph.params)

    run = graph.run(inputs, params)
    pgrads, igrads = run.backward(output, wrt_params, wrt_inputs)

    def evaluate():
        return float(graph.run(inputs, params).value(output))

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for store, grads in ((params, pgrads), (inputs, igrads)):
        for name, grad in grads.items():
            arr = store[name]
            n = arr.size
            if max_entries is not None and n > max_entries:
                idxs = rng.choice(n, size=max_entries, replace=False)
            else:
                idxs = range(n)
            numeric = np.array([_central_diff(evaluate, arr, i, h) for i in idxs])
            analytic = grad.flat[list(idxs)]
            scale = max(np.max(np.abs(analytic), initial=0.0),
                        np.max(np.abs(numeric), initial=0.0), 1e-12)
            worst = max(worst, float(np.max(np.abs(analytic - numeric), initial=0.0) / scale))
    return worst


def fd_check(op, point, h=1e-4, attrs=None, rng=None, max_entries=None):
    """Verify one catalogued op at the given input arrays.

    ``point`` is a tuple of input arrays (a single array is accepted). The op
    output is contracted to a scalar with fixed random weights so every
    output entry influences the objective.
    """
    if isinstance(point, np.ndarray):
        point = (point,)
    arrays = [np.array(p, dtype=np.float64) for p in point]
    attrs = attrs or {}
    rng = rng or np.random.default_rng(0)

    b = GraphBuilder(dtype=np.float64)
    leaves = [b.input(f"x{i}", a.shape) for i, a in enumerate(arrays)]
    y = b.apply(op, *leaves, **attrs)
    weights = b.const(rng.standard_normal(y.shape) if y.shape else np.asarray(1.0))
    b.output("obj", b.sum(b.multiply(y, weights)))
    graph = b.build()

    bindings = {f"x{i}": a for i, a in enumerate(arrays)}
    return fd_check_graph(graph, bindings, output="obj",
                          wrt_inputs=list(bindings), h=h,
                          max_entries=max_entries, rng=rng)
