"""
Finite-difference gradient checking for protomargin graphs.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from protomargin.functional import record_selections
from protomargin.tensor import Tensor


logger = logging.getLogger("protomargin.autodiff")


@dataclass
class GradCheckConfig:
    """
    Configuration for a central-difference gradient check.

    Attributes:
        step: Perturbation size h used in (f(x+h) - f(x-h)) / 2h.
        tolerance: Maximum allowed relative error.
        denominator_floor: Lower bound on the relative-error denominator, so tiny
            gradients are compared in absolute terms.
        max_coords_per_param: Check at most this many coordinates per parameter
            (sampled without replacement); None checks all of them.
        seed: Seed for coordinate sampling.
    """

    step: float = 1e-5
    tolerance: float = 1e-6
    denominator_floor: float = 1e-4
    max_coords_per_param: int | None = None
    seed: int = 0


@dataclass
class GradCheckReport:
    """Outcome of a gradient check."""

    max_relative_error: float
    checked: int
    skipped: int
    tolerance: float
    per_parameter: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tolerance


def grad_check(
    build: Callable[[], Tensor],
    params: Sequence[Tensor],
    config: GradCheckConfig | None = None,
) -> GradCheckReport:
    """
    Compare analytic gradients of a scalar graph with central differences.

    `build` must rebuild the graph from the current values of `params` on every
    call. Coordinates whose perturbation changes any piecewise selection (ReLU
    pattern, top-k set, masked minimum) sit on or next to a kink and are skipped.

    Args:
        build: Zero-argument callable returning a scalar Tensor.
        params: Leaf tensors to differentiate; they must have requires_grad=True.
        config: Step, tolerance and sampling options.

    Returns:
        A GradCheckReport with the maximum relative error over checked coordinates.

    Example:
        ```python
        from protomargin import functional as F
        from protomargin.gradcheck import grad_check

        w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=3))
        report = grad_check(lambda: F.linear(x, w).sum(), [w])
        assert report.passed
        ```
    """
    config = config or GradCheckConfig()
    rng = np.random.default_rng(config.seed)

    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
    with record_selections() as base_selection:
        loss = build()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def evaluate() -> tuple[float, list[str]]:
        with record_selections() as selection:
            value = build().item()
        return value, list(selection)

    per_param: list[float] = []
    checked = skipped = 0
    h = config.step

    for p, grad in zip(params, analytic, strict=True):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if config.max_coords_per_param is not None and flat.size > config.max_coords_per_param:
            coords = np.sort(rng.choice(flat.size, size=config.max_coords_per_param, replace=False))

        worst = 0.0
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + h
            f_plus, sel_plus = evaluate()
            flat[idx] = original - h
            f_minus, sel_minus = evaluate()
            flat[idx] = original

            if sel_plus != base_selection or sel_minus != base_selection:
                skipped += 1
                continue

            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = grad.reshape(-1)[idx]
            denom = max(abs(numeric), abs(exact), config.denominator_floor)
            worst = max(worst, abs(numeric - exact) / denom)
            checked += 1
        per_param.append(worst)

    report = GradCheckReport(
        max_relative_error=max(per_param, default=0.0),
        checked=checked,
        skipped=skipped,
        tolerance=config.tolerance,
        per_parameter=per_param,
    )
    logger.debug(
        "grad check finished",
        extra={"checked": checked, "skipped": skipped, "max_rel": report.max_relative_error},
    )
    return report
