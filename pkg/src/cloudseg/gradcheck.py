"""Central finite-difference validation of analytic gradients.

The check runs the op's analytic backward at a chosen precision (float32
or float64) and compares every gradient coordinate against a float64
central difference of the scalar loss sum(op(inputs)). The reported error
is |analytic - numeric| / max(|analytic|, |numeric|, 1), so near-zero
gradients are compared absolutely instead of blowing up the ratio.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, no_grad


class GradCheckError(Exception):
    pass


def _loss(op, arrays: list[np.ndarray]) -> float:
    with no_grad():
        out = op(*[Tensor(a) for a in arrays])
    return float(out.data.sum(dtype=np.float64))


def grad_check(
    op,
    inputs: list[np.ndarray],
    dtype=np.float64,
    step: float = 1e-6,
    max_coords_per_input: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Return the max relative error between analytic and numeric gradients.

    `op` maps Tensors to one Tensor and must be deterministic. `inputs` are
    the differentiable leaves (data and parameters alike). The analytic pass
    runs at `dtype`; the finite differences always run in float64. When
    `max_coords_per_input` is set, only a random subsample of coordinates per
    input is probed (for expensive composite ops like a whole network).
    """
    base = [np.array(a, dtype=np.float64) for a in inputs]  # copies: FD mutates in place

    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in base]
    out = op(*tensors)
    out.backward(np.ones_like(out.data))
    analytic = []
    for i, t in enumerate(tensors):
        g = np.zeros_like(base[i]) if t.grad is None else t.grad.astype(np.float64)
        bad = ~np.isfinite(g)
        if bad.any():
            j = int(np.flatnonzero(bad)[0])
            raise GradCheckError(
                f"non-finite analytic gradient for input {i} at flat index {j}"
            )
        analytic.append(g)

    if rng is None:
        rng = np.random.default_rng(0)
    max_err = 0.0
    for i, a in enumerate(base):
        flat = a.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            coords = rng.choice(flat.size, size=max_coords_per_input, replace=False)
        ga = analytic[i].reshape(-1)
        for c in coords:
            h = step * max(1.0, abs(flat[c]))
            orig = flat[c]
            flat[c] = orig + h
            lp = _loss(op, base)
            flat[c] = orig - h
            lm = _loss(op, base)
            flat[c] = orig
            numeric = (lp - lm) / (2.0 * h)
            err = abs(ga[c] - numeric) / max(abs(ga[c]), abs(numeric), 1.0)
            max_err = max(max_err, err)
    return max_err
