"""Central finite-difference oracle for reverse-mode gradients."""

import logging
from typing import Callable, Iterable, Optional

import numpy as np

from exceptions import DimensionError
from tensor.core import Tensor, backward

logger = logging.getLogger(__name__)


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Worst relative error between ``backward`` and central differences of ``f`` at ``x``.

    ``x`` is perturbed in place, so ``f`` may ignore its argument and close over a
    model that holds ``x`` as a parameter. The error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)`` over the
    checked coordinates; ``max_coords`` samples a random subset.
    """
    saved_flag, saved_grad = x.requires_grad, x.grad
    x.requires_grad = True
    x.grad = None
    try:
        loss = f(x)
        if loss.size != 1:
            raise DimensionError(f"finite_diff_check needs a scalar function, got shape {loss.shape}")
        backward(loss)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    finally:
        x.requires_grad = saved_flag
        x.grad = saved_grad

    x.values = np.ascontiguousarray(x.values)
    flat = x.values.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    numeric = np.zeros(coords.size)
    for n, i in enumerate(coords):
        original = flat[i]
        flat[i] = original + eps
        upper = f(x).item()
        flat[i] = original - eps
        lower = f(x).item()
        flat[i] = original
        numeric[n] = (upper - lower) / (2.0 * eps)

    picked = analytic.reshape(-1)[coords]
    scale = max(np.max(np.abs(picked), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale < 1e-12:
        return 0.0
    error = float(np.max(np.abs(picked - numeric)) / scale)
    logger.debug("finite difference check over %d coords: relative error %.3e", coords.size, error)
    return error


def check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Run ``finite_diff_check`` on each parameter of a closed-over loss and return the worst error."""
    worst = 0.0
    for p in params:
        worst = max(worst, finite_diff_check(lambda _: loss_fn(), p, eps, max_coords, rng))
    return worst
