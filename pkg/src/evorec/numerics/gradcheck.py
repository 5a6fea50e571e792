"""Central-difference gradient verification."""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteError


def finite_diff_check(loss_fn, params, analytic_grads, h=1e-5, names=None):
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``loss_fn(params) -> float`` is evaluated with one coordinate nudged by
    ``+-h`` at a time; ``params`` is restored afterwards.  Missing analytic
    entries count as zero gradient.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    worst = 0.0
    for name in names or list(params):
        p = params[name]
        ga = analytic_grads.get(name)
        ga = np.zeros_like(p) if ga is None else np.asarray(ga)
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(loss_fn(params))
            flat[k] = orig - h
            down = float(loss_fn(params))
            flat[k] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("loss while probing", f"{name}[{k}]")
            numeric = (up - down) / (2.0 * h)
            err = abs(gflat[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
