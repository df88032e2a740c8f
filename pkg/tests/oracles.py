"""Independent numerical oracles shared by the test modules.

The gradient oracle is plain central finite differences over the forward
evaluation only; it never touches the tape machinery it is used to check.
"""

import numpy as np


def fd_grad(f, arrays, h=1e-5):
    """Central-difference gradients of f(list-of-arrays) -> float."""
    grads = []
    for which, base in enumerate(arrays):
        g = np.zeros_like(base, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(base.size):
            bumped = [a.copy() for a in arrays]
            bumped[which].reshape(-1)[i] += h
            up = f(bumped)
            bumped = [a.copy() for a in arrays]
            bumped[which].reshape(-1)[i] -= h
            down = f(bumped)
            flat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    """Worst-case |a-n| / max(|a|, |n|, floor) over all elements."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
