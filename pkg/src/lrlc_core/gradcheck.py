"""Finite-difference certification of explicit backward passes."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

ForwardFn = Callable[..., np.ndarray]
BackwardFn = Callable[..., Sequence[np.ndarray]]

_MACHINE_EPS = float(np.finfo(np.float64).eps)
# Elements whose relative error is measured against at least this magnitude.
_RELATIVE_FLOOR = 1e-3
_KINK_RTOL = 1e-2
# Curvature-disagreement skips allowed before a check is declared inconclusive.
MAX_SKIPPED_FRACTION = 0.1


@dataclass
class GradCheckReport:
    """Outcome of one ``grad_check`` call."""

    op: str
    max_abs_error: float
    max_rel_error: float
    tolerance: float
    passed: bool
    checked: int = 0
    skipped: int = 0
    worst: Optional[str] = None
    message: str = ""


def _step(value: float) -> float:
    return max(1e-5, 1e-4 * abs(value))


def grad_check(
    op: str,
    forward: ForwardFn,
    backward: BackwardFn,
    inputs: Sequence[np.ndarray],
    tolerance: float = 1e-5,
    *,
    names: Optional[Sequence[str]] = None,
    output_weights: Optional[np.ndarray] = None,
    kinks: Sequence[float] = (),
    sample: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``forward(*inputs)`` returns the op output; the checked scalar is
    ``sum(output_weights * output)`` (a plain sum when no weights are given).
    ``backward(output_weights, *inputs)`` must return one gradient per input.
    Elements within two steps of an entry in ``kinks`` are skipped,
    as are points where the one-sided curvature estimates disagree (an
    internal non-differentiable point was crossed). A check that compares no
    element, or skips more than ``MAX_SKIPPED_FRACTION`` of its elements for
    curvature, does not pass.
    """

    arrays: List[np.ndarray] = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    for index, (original, array) in enumerate(zip(inputs, arrays)):
        if np.asarray(original).dtype != np.float64:
            raise ConfigurationError(f"{op}: grad_check requires float64 inputs (input {index})")
        if not np.all(np.isfinite(array)):
            raise ConfigurationError(f"{op}: grad_check input {index} is not finite")
    labels = list(names) if names is not None else [f"input{i}" for i in range(len(arrays))]

    output = np.asarray(forward(*arrays), dtype=np.float64)
    weights = np.ones_like(output) if output_weights is None else np.asarray(output_weights, dtype=np.float64)
    if weights.shape != output.shape:
        raise ConfigurationError(f"{op}: output_weights shape {weights.shape} != output shape {output.shape}")

    def scalar() -> float:
        return float(np.sum(weights * np.asarray(forward(*arrays), dtype=np.float64)))

    analytic = [np.asarray(g, dtype=np.float64) for g in backward(weights, *arrays)]
    if len(analytic) != len(arrays):
        return GradCheckReport(op, np.inf, np.inf, tolerance, False, message="backward returned wrong arity")
    for label, grad, array in zip(labels, analytic, arrays):
        if grad.shape != array.shape:
            return GradCheckReport(
                op, np.inf, np.inf, tolerance, False, message=f"{label}: gradient shape {grad.shape} != {array.shape}"
            )
        if not np.all(np.isfinite(grad)):
            return GradCheckReport(op, np.inf, np.inf, tolerance, False, message=f"{label}: non-finite analytic gradient")

    rng = np.random.default_rng(seed)
    base = scalar()
    max_abs = 0.0
    max_rel = 0.0
    worst: Optional[str] = None
    checked = 0
    kink_skipped = 0
    curvature_skipped = 0

    for label, array, grad in zip(labels, arrays, analytic):
        flat = array.reshape(-1)
        indices = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            indices = np.sort(rng.choice(flat.size, size=sample, replace=False))
        for flat_index in indices:
            original = float(flat[flat_index])
            eps = _step(original)
            if any(abs(original - kink) <= 2 * eps for kink in kinks):
                kink_skipped += 1
                continue
            shifted = {}
            for multiple in (-2, -1, 1, 2):
                flat[flat_index] = original + multiple * eps
                shifted[multiple] = scalar()
            flat[flat_index] = original

            curvature_near = (shifted[1] - 2 * base + shifted[-1]) / eps**2
            curvature_far = (shifted[2] - 2 * base + shifted[-2]) / (4 * eps**2)
            noise = 100 * _MACHINE_EPS * (abs(base) + 1.0) / eps**2
            scale = max(1.0, noise, abs(curvature_near), abs(curvature_far))
            if abs(curvature_near - curvature_far) > _KINK_RTOL * scale:
                curvature_skipped += 1
                continue

            numeric = (shifted[1] - shifted[-1]) / (2 * eps)
            exact = float(grad.reshape(-1)[flat_index])
            abs_error = abs(exact - numeric)
            rel_error = abs_error / max(_RELATIVE_FLOOR, abs(exact), abs(numeric))
            checked += 1
            max_abs = max(max_abs, abs_error)
            if rel_error > max_rel:
                max_rel = rel_error
                worst = f"{label}[{np.unravel_index(flat_index, array.shape)}]"

    message = ""
    if checked == 0:
        message = "no element was checked"
    elif curvature_skipped > MAX_SKIPPED_FRACTION * (checked + curvature_skipped):
        message = f"{curvature_skipped} of {checked + curvature_skipped} elements skipped for inconsistent curvature"
    passed = not message and max_rel <= tolerance
    if message:
        logger.warning("grad_check %s inconclusive: %s", op, message)
    elif not passed:
        logger.warning("grad_check %s failed: max rel %.3e at %s (tol %.1e)", op, max_rel, worst, tolerance)
    return GradCheckReport(
        op=op,
        max_abs_error=max_abs,
        max_rel_error=max_rel,
        tolerance=tolerance,
        passed=passed,
        checked=checked,
        skipped=kink_skipped + curvature_skipped,
        worst=worst,
        message=message,
    )
