"""Finite-difference verification of analytic gradients."""

import logging
from typing import Any, Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

# Floor for the relative-error denominator when both gradients vanish.
REL_FLOOR = 1e-8


def grad_check(
    loss_fn: Callable[[Sequence[torch.Tensor], Any], torch.Tensor],
    params: Sequence[torch.Tensor],
    batch: Any,
    eps: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn(params, batch)`` must return a scalar tensor. Coordinates are a
    random subset (all of them when fewer than ``n_coords`` exist). Returns
    ``inf`` when the loss is non-finite at any evaluated point.
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn(params, batch)
    if not torch.isfinite(loss):
        logger.warning("grad_check: non-finite loss at the base point")
        return float("inf")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    chosen = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, size=n_coords, replace=False))
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for flat in chosen:
            which = int(np.searchsorted(bounds, flat, side="right") - 1)
            local = int(flat - bounds[which])
            view = params[which].view(-1)
            original = view[local].item()
            view[local] = original + eps
            plus = loss_fn(params, batch).item()
            view[local] = original - eps
            minus = loss_fn(params, batch).item()
            view[local] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                return float("inf")
            numeric = (plus - minus) / (2 * eps)
            exact = analytic[which].view(-1)[local].item()
            err = abs(numeric - exact) / max(abs(numeric) + abs(exact), REL_FLOOR)
            worst = max(worst, err)
    return worst
