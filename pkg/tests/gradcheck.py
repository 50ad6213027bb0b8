"""Central finite-difference oracle used by the gradient tests.

Independent of the tape: it re-evaluates the forward function under
perturbed inputs, so agreement with tape gradients is a genuine check.
"""

import numpy as np


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences, perturbing arr in place."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * eps)
    return g


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    denom = max(np.abs(numeric).max(), 1.0)
    return float(np.abs(analytic - numeric).max() / denom)
