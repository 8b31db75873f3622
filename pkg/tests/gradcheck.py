"""Central finite-difference oracle, independent of the autodiff path."""

from __future__ import annotations

import numpy as np

from cscae.tensor import Tensor, default_dtype


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_probes(fn, arrays: dict[str, np.ndarray], rng: np.random.Generator, probes: int = 10, step: float = 1e-3, const: dict | None = None):
    """Compare autodiff against central differences at random coordinates.

    ``fn(**tensors)`` returns a Tensor; the scalar probed is ``sum(R * out)``
    for a fixed random ``R``.  Everything runs in float64.  Returns a list of
    ``(input name, index, analytic, numeric, relative error)``.
    """
    const = const or {}
    with default_dtype(np.float64):
        arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
        leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
        out = fn(**leaves, **const)
        weights = rng.normal(size=out.shape)
        (out * weights).sum().backward()

        def scalar(name, idx, value):
            bumped = {k: Tensor(v.copy()) for k, v in arrays.items()}
            bumped[name].data[idx] = value
            return float((fn(**bumped, **const).data * weights).sum())

        results = []
        for name, arr in arrays.items():
            for _ in range(probes):
                idx = tuple(int(rng.integers(0, n)) for n in arr.shape)
                x0 = arr[idx]
                numeric = (scalar(name, idx, x0 + step) - scalar(name, idx, x0 - step)) / (2 * step)
                grad = leaves[name].grad
                analytic = 0.0 if grad is None else float(grad[idx])
                results.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
        return results


def max_relative_error(results) -> float:
    return max(r[-1] for r in results)
