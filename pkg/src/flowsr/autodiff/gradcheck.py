"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from flowsr.autodiff import kinks
from flowsr.autodiff.tensor import Tensor, no_grad


@dataclass
class GradcheckResult:
    rel_err: float
    tol: float
    n_coords: int
    kink_distance: float = float("inf")

    @property
    def passed(self) -> bool:
        return self.rel_err <= self.tol


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-4,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckResult:
    """Compare autodiff gradients of ``fn()`` against central differences.

    The reported error is the worst per-input relative error.

    ``fn`` must rebuild its graph from ``inputs`` on every call. With
    ``max_coords`` only that many randomly chosen entries per input are probed.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    with kinks.monitor() as rec:
        loss = fn()
    loss.backward()
    worst, count = 0.0, 0
    for t in inputs:
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        grad = t.grad.reshape(-1) if t.grad is not None else np.zeros(flat.size)
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
                flat[i] = orig
                numeric[j] = (hi - lo) / (2 * eps)
        worst = max(worst, relative_error(grad[idx], numeric))
        count += idx.size
    return GradcheckResult(worst, tol, count, kinks.closest(rec))
