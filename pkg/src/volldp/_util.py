"""Small shared numerics: Wilson intervals and least-squares lines."""

from __future__ import annotations

import numpy as np

# two-sided 95% normal quantile
Z95 = 1.959963984540054


def wilson_interval(hits: int, n: int, n_eff: float | None = None):
    """Wilson 95% score interval for a binomial proportion.

    n_eff substitutes an effective sample size (importance sampling shrinks
    it); the point estimate always uses the raw counts.
    """
    if n <= 0:
        raise ValueError("interval needs a positive sample size")
    p = hits / n
    m = n if n_eff is None else max(float(n_eff), 1e-12)
    z2 = Z95 * Z95
    denom = 1.0 + z2 / m
    center = (p + z2 / (2.0 * m)) / denom
    half = (Z95 / denom) * np.sqrt(p * (1.0 - p) / m + z2 / (4.0 * m * m))
    return p, max(0.0, center - half), min(1.0, center + half)


def ols_line(x, y):
    """Least-squares fit y ~ a + b x; returns (slope, intercept)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        raise ValueError("line fit needs at least two points")
    b, a = np.polyfit(x, y, 1)
    return float(b), float(a)
