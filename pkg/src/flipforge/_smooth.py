"""C-infinity cutoff profiles built from exp(-1/t)."""

import numpy as np


def _psi(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = np.exp(-1.0 / t[pos])
    return out


def smoothstep(t):
    """0 for t <= 0, 1 for t >= 1, smooth and increasing in between."""
    t = np.asarray(t, dtype=float)
    a = _psi(t)
    b = _psi(1.0 - t)
    return a / (a + b)


def smoothstep_deriv(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = (t > 0) & (t < 1)
    tm = t[m]
    a = np.exp(-1.0 / tm)
    b = np.exp(-1.0 / (1.0 - tm))
    da = a / tm**2
    db = -b / (1.0 - tm) ** 2
    out[m] = (da * (a + b) - a * (da + db)) / (a + b) ** 2
    return out


def plateau(x, lo, hi, margin):
    """1 on [lo, hi], 0 outside (lo - margin, hi + margin), smooth between."""
    x = np.asarray(x, dtype=float)
    up = smoothstep((x - (lo - margin)) / margin)
    down = smoothstep(((hi + margin) - x) / margin)
    return up * down
