"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tape, Tensor

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps parameters whose true gradient is ~0 from turning
    finite-difference round-off (~1e-11) into a large ratio.
    """
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), floor)
    return diff / scale


def numerical_gradient(
    f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP, indices: Optional[np.ndarray] = None
) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. elements of ``x`` (perturbed in place).

    Only the flat ``indices`` are differenced when given; other entries stay 0.
    """
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = DEFAULT_TOL

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst(self) -> str:
        return max(self.errors, key=self.errors.get) if self.errors else ""

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def jitter(params: Mapping[str, Tensor], seed: int = 0, scale: float = 0.02) -> None:
    """Add small Gaussian noise to every parameter in place.

    Freshly initialised networks sit on ReLU kinks (zero biases feeding dead
    channels give pre-activations of exactly 0), where central differences
    are meaningless; jittering moves the check to a generic point.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data = p.data + rng.normal(0.0, scale, p.shape)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradcheckReport:
    """Compare tape gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the loss from the current ``.data`` of ``params``
    every time it is called.  With ``max_elements`` only a seeded random
    subset of each tensor's entries is compared.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)

    def f() -> float:
        return loss_fn().item()

    rng = np.random.default_rng(seed)
    report = GradcheckReport(tol=tol)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if max_elements is None or p.size <= max_elements:
            numeric = numerical_gradient(f, p.data, h)
        else:
            idx = np.sort(rng.choice(p.size, max_elements, replace=False))
            numeric = numerical_gradient(f, p.data, h, idx).reshape(-1)[idx]
            analytic = analytic.reshape(-1)[idx]
        report.errors[name] = relative_error(analytic, numeric)
    return report
