from typing import Callable, Dict, Optional

import numpy as np

from .tensor import Tensor, no_grad, precision

__all__ = ["finite_diff_check"]

LossFn = Callable[[Dict[str, Tensor]], Tensor]

_EPSILON = 1e-8


def finite_diff_check(
    f: LossFn,
    params: Dict[str, np.ndarray],
    h: float = 1e-4,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: Optional[float] = None,
) -> float:
    """Largest relative gap between autodiff and central differences.

    Runs in 64-bit over every element of every parameter; the error of one
    element is ``|autodiff - numeric| / (|numeric| + 1e-8)``.

    ``max_entries`` samples that many coordinates per parameter instead of
    sweeping all of them. With ``floor`` set the denominator becomes
    ``max(|autodiff|, |numeric|, floor)``, so gradients below ``floor`` are
    compared in absolute terms.
    """
    with precision(np.float64):
        leaves = {name: Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
                  for name, value in params.items()}
        f(leaves).backward()

        rng = np.random.default_rng(seed)
        worst = 0.0
        for name, leaf in leaves.items():
            analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
            flat = leaf.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                coords = rng.choice(flat.size, size=max_entries, replace=False)
            for coord in coords:
                original = flat[coord]
                with no_grad():
                    flat[coord] = original + h
                    upper = f(leaves).item()
                    flat[coord] = original - h
                    lower = f(leaves).item()
                flat[coord] = original
                numeric = (upper - lower) / (2.0 * h)
                exact = analytic.reshape(-1)[coord]
                if floor is None:
                    error = abs(exact - numeric) / (abs(numeric) + _EPSILON)
                else:
                    error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
                worst = max(worst, float(error))
        return worst
