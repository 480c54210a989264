"""Central finite-difference checks for ndtensor ops and layers"""

from typing import Callable, Dict, Sequence

import numpy as np

from core.ndtensor import Tensor, backward


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(fn: Callable[[], Tensor], target: Tensor, step: float = 1e-5) -> np.ndarray:
    """d fn() / d target by central differences, perturbing target.values in place"""
    values = target.values
    gradient = np.zeros_like(values, dtype=np.float64)
    for index in np.ndindex(*values.shape):
        original = values[index]
        values[index] = original + step
        upper = fn().item()
        values[index] = original - step
        lower = fn().item()
        values[index] = original
        gradient[index] = (upper - lower) / (2.0 * step)
    return gradient


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> Dict[int, float]:
    """Compare autodiff and finite-difference gradients of a scalar fn for every input.

    Inputs should be float64 leaves with requires_grad set. Returns the relative error per input
    position; callers assert it against their tolerance.
    """
    for t in inputs:
        t.zero_grad()
    backward(fn())
    errors = {}
    for position, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.values)
        errors[position] = relative_error(analytic, numeric_gradient(fn, t, step))
    return errors
