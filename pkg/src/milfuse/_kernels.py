"""Fused elementwise Adam update, JIT-compiled with numba when it is installed."""

from __future__ import annotations

import numpy as np


def _adam_update_numpy(p, g, m, v, lr, b1, b2, eps, wd, inv_bc2):
    if wd:
        g = g + wd * p
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    denom = np.sqrt(v * inv_bc2)
    denom += eps
    np.divide(m, denom, out=denom)
    denom *= lr
    p -= denom


try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is an optional accelerator
    njit = None

if njit is not None:
    # inputs are checked finite by the caller, so nnan/ninf fast-math is safe
    @njit(fastmath=True, cache=True)
    def _adam_update_jit(p, g, m, v, lr, b1, b2, eps, wd, inv_bc2):
        pf = p.reshape(-1)
        gf = g.reshape(-1)
        mf = m.reshape(-1)
        vf = v.reshape(-1)
        for i in range(pf.size):
            gi = gf[i] + wd * pf[i]
            mi = b1 * mf[i] + (1.0 - b1) * gi
            vi = b2 * vf[i] + (1.0 - b2) * (gi * gi)
            mf[i] = mi
            vf[i] = vi
            pf[i] -= lr * mi / (np.sqrt(vi * inv_bc2) + eps)

    def adam_update(p, g, m, v, lr, b1, b2, eps, wd, inv_bc2):
        """In-place update of ``p``, ``m``, ``v``; ``lr`` already includes the first-moment bias correction."""
        if p.flags.c_contiguous and g.flags.c_contiguous and m.flags.c_contiguous and v.flags.c_contiguous:
            _adam_update_jit(p, g, m, v, lr, b1, b2, eps, wd, inv_bc2)
        else:
            _adam_update_numpy(p, g, m, v, lr, b1, b2, eps, wd, inv_bc2)

    HAVE_NUMBA = True
else:  # pragma: no cover
    adam_update = _adam_update_numpy
    HAVE_NUMBA = False
