"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, Tensor, weighted_sum

FD_STEP = 1e-3


class GradCheckError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    name: str
    max_rel_errors: list[float]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(self.max_rel_errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)


def grad_check(closure: Callable[..., Tensor], inputs: Sequence[np.ndarray], tolerance: float = 1e-3,
               step: float = FD_STEP, dtype=np.float64, max_entries: int | None = None,
               seed: int = 0, name: str = "closure") -> GradCheckReport:
    """Compare tape gradients of ``closure`` with central differences.

    Non-scalar outputs are reduced to ``sum(out * r)`` with a fixed random
    ``r`` so that structurally-zero gradients of a plain sum (batch norm, for
    one) do not hide errors. ``max_entries`` caps how many coordinates per
    input are perturbed; the subset is drawn with ``seed``.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=dtype) for a in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]

    with GradTape() as tape:
        out = closure(*tensors)
        if not np.all(np.isfinite(out.data)):
            raise GradCheckError(f"{name}: non-finite output")
        weights = np.ones(()) if out.data.ndim == 0 else rng.uniform(0.5, 1.5, size=out.shape)
        loss = weighted_sum(out, np.asarray(weights, dtype=np.float64).reshape(out.shape))
    analytic = tape.gradient(loss, tensors)

    def evaluate(vals: list[np.ndarray]) -> float:
        res = closure(*[Tensor(v, dtype=dtype) for v in vals])
        if not np.all(np.isfinite(res.data)):
            raise GradCheckError(f"{name}: non-finite output under perturbation")
        return float(np.sum(res.data.astype(np.float64) * weights))

    errors = []
    for idx, base in enumerate(arrays):
        flat_count = base.size
        coords = np.arange(flat_count)
        if max_entries is not None and flat_count > max_entries:
            coords = np.sort(rng.choice(flat_count, size=max_entries, replace=False))
        worst = 0.0
        for c in coords:
            pos = [a.copy() for a in arrays]
            neg = [a.copy() for a in arrays]
            pos[idx].flat[c] += step
            neg[idx].flat[c] -= step
            numeric = (evaluate(pos) - evaluate(neg)) / (2 * step)
            err = float(relative_error(np.float64(analytic[idx].flat[c]), np.float64(numeric)))
            worst = max(worst, err)
        errors.append(worst)
    return GradCheckReport(name, errors, tolerance)
