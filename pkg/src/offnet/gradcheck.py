"""Central finite-difference checks against the tape's analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError
from .tensor import Tape, Tensor, record_activation_pattern

# Floor of the relative-error denominator.
_DENOM_FLOOR = 1e-8


@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_index: tuple[int, ...] | None
    n_checked: int
    n_refined: int
    n_skipped: int


def finite_diff_report(
    forward: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    *,
    refine_kinks: bool = True,
    min_eps: float = 1e-8,
) -> FiniteDiffReport:
    """Compare d forward(x) / dx from the tape with central differences.

    ``forward`` maps a tensor to a scalar tensor. With ``refine_kinks`` the
    relu masks and pool argmaxes are recorded at ``x`` and at both stencil
    points; where a stencil straddles a kink the step is shrunk tenfold until
    the branch pattern is constant, and coordinates that never settle before
    ``min_eps`` are skipped (counted in ``n_skipped``).
    """
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    base = np.array(x.data, copy=True)
    probe = Tensor(base.copy(), requires_grad=True, dtype=base.dtype)
    with Tape() as tape:
        out = forward(probe)
    tape.backward(out)
    analytic = np.zeros(base.shape) if probe.grad is None else probe.grad.astype(np.float64)

    def evaluate(values: np.ndarray) -> tuple[float, list[bytes]]:
        with record_activation_pattern() as log:
            value = forward(Tensor(values, dtype=base.dtype)).item()
        return value, log

    _, base_pattern = evaluate(base)

    worst, worst_index = 0.0, None
    n_refined = n_skipped = 0
    for index in np.ndindex(base.shape):
        h = eps
        numeric = None
        while h >= min_eps:
            bumped = base.copy()
            bumped[index] += h
            f_plus, p_plus = evaluate(bumped)
            bumped[index] = base[index] - h
            f_minus, p_minus = evaluate(bumped)
            if not refine_kinks or (p_plus == base_pattern and p_minus == base_pattern):
                numeric = (f_plus - f_minus) / (2.0 * h)
                break
            h /= 10.0
        if numeric is None:
            n_skipped += 1
            continue
        if h != eps:
            n_refined += 1
        a = analytic[index]
        err = abs(a - numeric) / max(_DENOM_FLOOR, abs(a) + abs(numeric))
        if err > worst:
            worst, worst_index = err, index
    return FiniteDiffReport(
        max_rel_error=float(worst),
        worst_index=worst_index,
        n_checked=int(base.size) - n_skipped,
        n_refined=n_refined,
        n_skipped=n_skipped,
    )


def finite_diff_check(forward: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3, **kwargs) -> float:
    """Max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)."""
    return finite_diff_report(forward, x, eps, **kwargs).max_rel_error
