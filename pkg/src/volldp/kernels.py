"""Volterra kernel catalog with covariance quadrature and Cameron-Martin lift.

A Volterra kernel K(t, s) is a deterministic, square-integrable kernel with
K(t, s) = 0 for s > t and K(0, s) = 0, defining the Gaussian process

    Bhat(t) = integral{0..t} K(t, s) dB(s).

This module provides:
  * a closed catalog of kernel families (Brownian, fractional Brownian,
    Riemann-Liouville, fractional Ornstein-Uhlenbeck, iterated-integral
    Brownian, and past-conditioned kernels),
  * pointwise evaluation (adaptive quadrature for the singular integral
    terms) and a fast vectorized evaluation path used by all quadratures,
  * the covariance k(t, s) = integral{0..min(t,s)} K(t,u) K(s,u) du by
    endpoint-avoiding midpoint quadrature,
  * the lift f -> fhat,  fhat(t) = integral{0..t} K(t, u) fdot(u) du, as a
    lower-triangular matrix of per-cell kernel integrals,
  * regularity diagnostics: the squared-increment modulus
    M(delta) = sup_{|t1-t2|<=delta} integral (K(t1,s) - K(t2,s))^2 ds with a
    fitted Holder exponent, and a small-noise rescaling check
    sup |k(eps t, eps s)/eps^(2 nu) - k_limit(t, s)|.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from scipy.integrate import quad
from scipy.special import roots_jacobi, roots_legendre


class KernelError(ValueError):
    """Domain or evaluation failure in a kernel computation."""


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform grid on [0, T] with N cells and nodes t_i = i*T/N."""

    N: int
    T: float = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("grid needs at least one cell")
        if not self.T > 0:
            raise ValueError("grid horizon T must be positive")

    @property
    def delta(self) -> float:
        return self.T / self.N

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    @cached_property
    def cell_midpoints(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) * self.delta


# ---------------------------------------------------------------------------
# Fixed Gaussian rules for the singular kernel integrals
# ---------------------------------------------------------------------------
# The fractional kernel's inner integral
#     I(t, s) = integral{s..t} x^(h-1) (x - s)^h dx,   h = H - 1/2,
# has an algebraic endpoint singularity at x = s (for h < 0) and power decay
# x^(2h-1) away from it.  Splitting at c = min(2s, t) and using a Gauss-Jacobi
# rule (weight v^h) on [s, c] plus Gauss-Legendre in log x on [c, t] resolves
# both features to near machine precision with a few dozen nodes.

_GAUSS_N = 48


@lru_cache(maxsize=128)
def _jacobi_rule(beta: float, n: int = _GAUSS_N):
    """Nodes/weights v_i, w_i with integral{0..1} v^beta g(v) dv = sum w_i g(v_i)."""
    x, w = roots_jacobi(n, 0.0, beta)
    v = 0.5 * (x + 1.0)
    return v, w * 0.5 ** (beta + 1.0)


@lru_cache(maxsize=8)
def _legendre_rule(n: int = _GAUSS_N):
    return roots_legendre(n)


def _fbm_inner_gauss(t: float, s: np.ndarray, h: float) -> np.ndarray:
    """Vectorized I(t, s) = integral{s..t} x^(h-1) (x-s)^h dx for 0 < s < t."""
    s = np.asarray(s, dtype=float)
    vj, wj = _jacobi_rule(h)
    c = np.minimum(2.0 * s, t)
    # [s, c]: x = s + (c-s) v, the v^h factor is absorbed by the Jacobi weight
    span = (c - s)[:, None]
    x1 = s[:, None] + span * vj
    piece1 = (c - s) ** (h + 1.0) * (x1 ** (h - 1.0) @ wj)
    # [c, t] in xi = log x: integrand exp(h xi) (exp(xi) - s)^h, entire in xi
    out = piece1
    todo = c < t
    if np.any(todo):
        xl, wl = _legendre_rule()
        lo = np.log(c[todo])
        L = np.log(t) - lo
        xi = lo[:, None] + (L[:, None] * 0.5) * (xl + 1.0)
        ex = np.exp(xi)
        vals = np.exp(h * xi) * (ex - s[todo][:, None]) ** h
        out = piece1.copy()
        out[todo] += (L * 0.5) * (vals @ wl)
    return out


def _fbm_inner_adaptive(t: float, s: float, h: float) -> float:
    """Scalar I(t, s) by adaptive quadrature, absolute tolerance 1e-10."""
    if s >= t:
        return 0.0
    c = min(2.0 * s, t)
    f = lambda x: x ** (h - 1.0) * (x - s) ** h
    val, err = quad(f, s, c, epsabs=1e-10, limit=200)
    if c < t:
        v2, e2 = quad(f, c, t, epsabs=1e-10, limit=200)
        val, err = val + v2, err + e2
    if not math.isfinite(val) or err > 1e-6:
        raise KernelError(f"inner kernel quadrature failed at (t={t}, s={s}, h={h})")
    return val


# ---------------------------------------------------------------------------
# Kernel families
# ---------------------------------------------------------------------------

class KernelSpec:
    """Base class of the kernel catalog.

    Subclasses are frozen dataclasses; all expose

      values(t, u)     vectorized K(t, u) for a scalar t and array u,
      point(t, s)      scalar K(t, s) (adaptive quadrature where integrals occur),
      cell_integrals(t, a, b)
                       exact per-cell integral{a..b} K(t, u) du where a closed
                       form exists, else None (callers fall back to midpoint),
      holder_alpha     exponent alpha with M(delta) <= c delta^alpha,
      rescalable       whether covariance is evaluable on shrunk horizons.
    """

    family = "abstract"
    T: float

    @property
    def holder_alpha(self) -> float:
        raise NotImplementedError

    @property
    def singular_at_diagonal(self) -> bool:
        return False

    @property
    def singular_at_origin(self) -> bool:
        return False

    @property
    def low_confidence(self) -> bool:
        """Quadrature accuracy below H = 0.1 is untested territory; flag it."""
        return getattr(self, "H", 0.5) < 0.1

    @property
    def rescalable(self) -> bool:
        return True

    def values(self, t: float, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def point(self, t: float, s: float) -> float:
        return float(self.values(t, np.asarray([s], dtype=float))[0])

    def cell_integrals(self, t: float, a: np.ndarray, b: np.ndarray):
        return None


@dataclass(frozen=True)
class BrownianMotion(KernelSpec):
    """K(t, s) = 1 on s <= t: the identity lift, Bhat = B."""

    T: float = 1.0
    family = "bm"

    @property
    def holder_alpha(self) -> float:
        return 1.0

    def values(self, t, u):
        u = np.asarray(u, dtype=float)
        if t <= 0:
            return np.zeros_like(u)
        return np.where(u <= t, 1.0, 0.0)

    def cell_integrals(self, t, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        return np.clip(np.minimum(b, t) - np.minimum(a, t), 0.0, None)


def _fbm_constant(H: float) -> float:
    """Normalizing constant c_H of the fractional kernel."""
    return math.sqrt(
        2.0 * H * math.gamma(1.5 - H) / (math.gamma(H + 0.5) * math.gamma(2.0 - 2.0 * H))
    )


@dataclass(frozen=True)
class FractionalBM(KernelSpec):
    """Fractional Brownian kernel on the Wiener filtration.

    K(t, s) = c_H [ (t/s)^(H-1/2) (t-s)^(H-1/2)
                    - (H-1/2) s^(1/2-H) integral{s..t} u^(H-3/2) (u-s)^(H-1/2) du ]

    with c_H = sqrt( 2H Gamma(3/2-H) / (Gamma(H+1/2) Gamma(2-2H)) ).  Covariance
    is the standard k_H(t,s) = (t^2H + s^2H - |t-s|^2H)/2.  H = 1/2 collapses to
    the Brownian kernel.
    """

    H: float
    T: float = 1.0
    family = "fbm"

    def __post_init__(self):
        if not 0.0 < self.H < 1.0:
            raise ValueError("Hurst index must lie in (0, 1)")

    @cached_property
    def c_H(self) -> float:
        return _fbm_constant(self.H)

    @property
    def holder_alpha(self) -> float:
        return min(2.0 * self.H, 1.0)

    @property
    def singular_at_diagonal(self) -> bool:
        return self.H < 0.5

    @property
    def singular_at_origin(self) -> bool:
        return self.H > 0.5

    def _edge_value(self) -> float:
        # value at u == t (and the sign of the blow-up at u == 0)
        if self.H < 0.5:
            return math.inf
        return 0.0

    def values(self, t, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        if t <= 0:
            return out
        h = self.H - 0.5
        if h == 0.0:
            return np.where(u <= t, 1.0, 0.0)
        inside = (u > 0) & (u < t)
        s = u[inside]
        if s.size:
            main = (t / s) ** h * (t - s) ** h
            inner = _fbm_inner_gauss(t, s, h)
            out[inside] = self.c_H * (main - h * s ** (-h) * inner)
        out[u == t] = self._edge_value()
        out[u == 0] = math.inf
        return out

    def point(self, t, s):
        if t <= 0 or s > t:
            return 0.0
        h = self.H - 0.5
        if h == 0.0:
            return 1.0
        if s == t:
            return self._edge_value()
        if s == 0.0:
            return math.inf
        inner = _fbm_inner_adaptive(t, s, h)
        return self.c_H * ((t / s) ** h * (t - s) ** h - h * s ** (-h) * inner)

    def covariance_exact(self, t: float, s: float) -> float:
        """Closed-form covariance, used as an oracle for the quadrature."""
        H2 = 2.0 * self.H
        return 0.5 * (t ** H2 + s ** H2 - abs(t - s) ** H2)


@dataclass(frozen=True)
class RiemannLiouville(KernelSpec):
    """K(t, s) = (t - s)^(H-1/2) / Gamma(H+1/2), the one-sided fractional kernel."""

    H: float
    T: float = 1.0
    family = "rl"

    def __post_init__(self):
        if not 0.0 < self.H < 1.0:
            raise ValueError("Hurst index must lie in (0, 1)")

    @property
    def holder_alpha(self) -> float:
        return 2.0 * self.H

    @property
    def singular_at_diagonal(self) -> bool:
        return self.H < 0.5

    def values(self, t, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        if t <= 0:
            return out
        h = self.H - 0.5
        g = math.gamma(self.H + 0.5)
        inside = u < t
        out[inside] = (t - u[inside]) ** h / g
        if h < 0:
            out[u == t] = math.inf
        elif h == 0:
            out[u == t] = 1.0
        return out

    def cell_integrals(self, t, a, b):
        a = np.minimum(np.asarray(a, dtype=float), t)
        b = np.minimum(np.asarray(b, dtype=float), t)
        p = self.H + 0.5
        return ((t - a) ** p - (t - b) ** p) / (p * math.gamma(p))


@dataclass(frozen=True)
class FractionalOU(KernelSpec):
    """Fractional Ornstein-Uhlenbeck kernel: the fractional kernel corrected by
    mean reversion at speed a > 0,

        K(t, s) = K_H(t, s) - a integral{s..t} exp(-a (t-u)) K_H(t, u) du.

    H = 1/2 collapses to the classical OU kernel exp(-a (t-s)).
    """

    H: float
    a: float
    T: float = 1.0
    family = "fou"

    def __post_init__(self):
        if not 0.0 < self.H < 1.0:
            raise ValueError("Hurst index must lie in (0, 1)")
        if not self.a > 0:
            raise ValueError("mean-reversion speed must be positive")

    @cached_property
    def _fbm(self) -> FractionalBM:
        return FractionalBM(H=self.H, T=self.T)

    @property
    def holder_alpha(self) -> float:
        return min(2.0 * self.H, 1.0)

    @property
    def singular_at_diagonal(self) -> bool:
        return self.H < 0.5

    @property
    def singular_at_origin(self) -> bool:
        return self.H > 0.5

    def _correction(self, t: float, s: np.ndarray) -> np.ndarray:
        """integral{s..t} exp(-a (t-x)) K_H(t, x) dx, vectorized over 0 < s < t.

        Split at m = max(s, t/2).  On [m, t] the fractional kernel is written
        as c_H (t/x)^h (t-x)^h - c_H h x^(-h) (t-x)^(h+1) J(x) with a smooth
        J(x) = integral{0..1} (x + (t-x) w)^(h-1) w^h dw; the two algebraic
        endpoint factors go into Gauss-Jacobi weights (beta = h and h+1).  On
        [s, m] the full kernel is smooth apart from x^(+-h) behaviour at the
        origin, which a log substitution turns into entire exponentials.
        """
        h = self.H - 0.5
        cH = self._fbm.c_H
        vj, wj = _jacobi_rule(h)
        vj1, wj1 = _jacobi_rule(h + 1.0)
        m = np.maximum(s, 0.5 * t)
        span = (t - m)[:, None]
        # main term on [m, t], weight (t-x)^h
        xa = t - span * vj
        ga = np.exp(-self.a * span * vj) * (t / xa) ** h
        corr = cH * (t - m) ** (h + 1.0) * (ga @ wj)
        # remainder term on [m, t], weight (t-x)^(h+1)
        xb = t - span * vj1
        jb = ((xb[:, :, None] + (t - xb)[:, :, None] * vj) ** (h - 1.0)) @ wj
        gb = np.exp(-self.a * span * vj1) * xb ** (-h) * jb
        corr -= cH * h * (t - m) ** (h + 2.0) * (gb @ wj1)
        # [s, m] piece in xi = log x, full kernel evaluation at the nodes
        todo = s < m
        if np.any(todo):
            xl, wl = _legendre_rule()
            lo = np.log(s[todo])
            L = np.log(m[todo]) - lo
            xi = lo[:, None] + (L[:, None] * 0.5) * (xl + 1.0)
            xc = np.exp(xi)
            kvals = self._fbm.values(t, xc.ravel()).reshape(xc.shape)
            gc = np.exp(-self.a * (t - xc)) * kvals * xc
            corr[todo] += (L * 0.5) * (gc @ wl)
        return corr

    def values(self, t, u):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        if t <= 0:
            return out
        if self.H == 0.5:
            inside = u <= t
            out[inside] = np.exp(-self.a * (t - u[inside]))
            return out
        inside = (u > 0) & (u < t)
        s = u[inside]
        if s.size:
            out[inside] = self._fbm.values(t, s) - self.a * self._correction(t, s)
        out[u == t] = math.inf if self.H < 0.5 else 0.0
        out[u == 0] = math.inf
        return out

    def point(self, t, s):
        if t <= 0 or s > t:
            return 0.0
        if self.H == 0.5:
            return math.exp(-self.a * (t - s))
        if s == t or s == 0.0:
            return float(self.values(t, np.asarray([s]))[0])
        mid = 0.5 * (s + t)
        f = lambda x: math.exp(-self.a * (t - x)) * self._fbm.point(t, x)
        c1, e1 = quad(f, s, mid, epsabs=1e-10, limit=100)
        c2, e2 = quad(f, mid, t, epsabs=1e-10, limit=100)
        if e1 + e2 > 1e-6:
            raise KernelError(f"correction quadrature failed at (t={t}, s={s})")
        return self._fbm.point(t, s) - self.a * (c1 + c2)


@dataclass(frozen=True)
class IntegratedBM(KernelSpec):
    """a-times iterated integral of Brownian motion: K(t, s) = (t-s)^a / a!."""

    a: int
    T: float = 1.0
    family = "ibm"

    def __post_init__(self):
        if self.a < 0 or int(self.a) != self.a:
            raise ValueError("integration order must be a nonnegative integer")

    @property
    def holder_alpha(self) -> float:
        return 2.0 * self.a + 1.0

    def values(self, t, u):
        u = np.asarray(u, dtype=float)
        if t <= 0:
            return np.zeros_like(u)
        fact = math.factorial(self.a)
        return np.where(u <= t, np.clip(t - u, 0.0, None) ** self.a / fact, 0.0)

    def cell_integrals(self, t, a, b):
        lo = np.minimum(np.asarray(a, dtype=float), t)
        hi = np.minimum(np.asarray(b, dtype=float), t)
        p = self.a + 1
        return ((t - lo) ** p - (t - hi) ** p) / (p * math.factorial(self.a))

    def covariance_exact(self, t: float, s: float) -> float:
        """k(t,s) = integral{0..min(t,s)} (t-u)^a (s-u)^a du / (a!)^2 exactly."""
        m = min(t, s)
        # expand (t-u)^a (s-u)^a and integrate term by term
        total = 0.0
        for i in range(self.a + 1):
            for j in range(self.a + 1):
                c = math.comb(self.a, i) * math.comb(self.a, j)
                p = i + j
                total += (
                    c * t ** (self.a - i) * s ** (self.a - j) * (-1) ** p
                    * m ** (p + 1) / (p + 1)
                )
        return total / math.factorial(self.a) ** 2


@dataclass(frozen=True)
class Conditioned(KernelSpec):
    """Kernel of a Volterra process restarted after observing it on [0, T_past]:
    K(t, s) = K_base(T_past + t, T_past + s)."""

    base: KernelSpec
    T_past: float
    T: float = 1.0
    family = "conditioned"

    def __post_init__(self):
        if not self.T_past > 0:
            raise ValueError("past horizon must be positive")
        if self.base.T < self.T_past + self.T - 1e-12:
            raise KernelError(
                "conditioned kernel needs the base kernel regular on "
                f"[0, {self.T_past + self.T}], base horizon is {self.base.T}"
            )

    @property
    def holder_alpha(self) -> float:
        return self.base.holder_alpha

    @property
    def singular_at_diagonal(self) -> bool:
        return self.base.singular_at_diagonal

    @property
    def low_confidence(self) -> bool:
        return self.base.low_confidence

    @property
    def rescalable(self) -> bool:
        return False

    def values(self, t, u):
        u = np.asarray(u, dtype=float)
        if t <= 0:
            return np.zeros_like(u)
        return self.base.values(self.T_past + t, self.T_past + u)

    def point(self, t, s):
        if t <= 0 or s > t:
            return 0.0
        return self.base.point(self.T_past + t, self.T_past + s)

    def cell_integrals(self, t, a, b):
        # stationary closed forms shift exactly; others fall back to midpoint
        sub = self.base.cell_integrals(
            self.T_past + t,
            self.T_past + np.asarray(a, dtype=float),
            self.T_past + np.asarray(b, dtype=float),
        )
        return sub


# ---------------------------------------------------------------------------
# Pointwise evaluation and covariance quadrature
# ---------------------------------------------------------------------------

def _check_domain(spec: KernelSpec, t: float, s: float) -> None:
    if s < 0:
        raise KernelError(f"kernel argument s={s} is negative")
    if t < 0 or t > spec.T * (1 + 1e-12) + 1e-15:
        raise KernelError(f"kernel argument t={t} outside [0, {spec.T}]")


def eval_kernel(spec: KernelSpec, t: float, s: float) -> float:
    """K(t, s).  Zero for s > t and for t = 0; integral terms evaluated by
    adaptive quadrature with absolute tolerance 1e-10."""
    _check_domain(spec, t, s)
    if s > t or t == 0.0:
        return 0.0
    return spec.point(t, s)


def kernel_values(spec: KernelSpec, t: float, u) -> np.ndarray:
    """Vectorized K(t, u) over an array of u; the fast path behind quadratures."""
    _check_domain(spec, t, 0.0)
    return spec.values(t, np.asarray(u, dtype=float))


def covariance(spec: KernelSpec, t: float, s: float, quad_N: int = 512) -> float:
    """k(t, s) = integral{0..min(t,s)} K(t,u) K(s,u) du by midpoint quadrature.

    Midpoints avoid both integrable singularities (u = min(t,s) for H < 1/2,
    u = 0 for H > 1/2).
    """
    if quad_N < 16:
        raise ValueError("quad_N must be at least 16")
    _check_domain(spec, t, s)
    _check_domain(spec, s, t)
    m = min(t, s)
    if m <= 0.0:
        return 0.0
    du = m / quad_N
    mids = (np.arange(quad_N) + 0.5) * du
    kt = spec.values(t, mids)
    ks = kt if s == t else spec.values(s, mids)
    return float(kt @ ks * du)


def covariance_matrix(spec: KernelSpec, times, quad_N: int = 512) -> np.ndarray:
    """Symmetric covariance matrix over a set of times."""
    times = np.asarray(times, dtype=float)
    n = times.size
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i + 1):
            out[i, j] = out[j, i] = covariance(spec, times[i], times[j], quad_N)
    return out


# ---------------------------------------------------------------------------
# Cameron-Martin lift
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LiftedPath:
    """Nodal values of fhat(t) = integral{0..t} K(t, u) fdot(u) du; starts at 0."""

    values: np.ndarray
    grid: Grid


_MIDPOINT_SUBCELLS = 16


def _build_lift_matrix(spec: KernelSpec, grid: Grid) -> np.ndarray:
    """Lower-triangular W with W[i-1, j-1] = integral{t_(j-1)..t_j} K(t_i, u) du."""
    N = grid.N
    nodes = grid.nodes
    W = np.zeros((N, N))
    closed = spec.cell_integrals(grid.T, nodes[:1], nodes[1:2]) is not None
    if closed:
        for i in range(1, N + 1):
            W[i - 1, :i] = spec.cell_integrals(nodes[i], nodes[:i], nodes[1 : i + 1])
    else:
        # composite midpoint with endpoint-avoiding sub-midpoints per cell
        n_sub = _MIDPOINT_SUBCELLS
        sub = (np.arange(N * n_sub) + 0.5) * (grid.delta / n_sub)
        for i in range(1, N + 1):
            vals = spec.values(nodes[i], sub[: i * n_sub])
            W[i - 1, :i] = vals.reshape(i, n_sub).mean(axis=1) * grid.delta
    return W


@lru_cache(maxsize=32)
def _lift_matrix_cached(spec: KernelSpec, grid: Grid):
    W = _build_lift_matrix(spec, grid)
    W.setflags(write=False)
    return W


def lift_matrix(spec: KernelSpec, grid: Grid) -> np.ndarray:
    """Cached, read-only matrix of per-cell kernel integrals."""
    if grid.T > spec.T * (1 + 1e-12):
        raise KernelError(f"grid horizon {grid.T} exceeds kernel horizon {spec.T}")
    return _lift_matrix_cached(spec, grid)


def lift(spec: KernelSpec, control, grid: Grid) -> LiftedPath:
    """Apply the kernel integral operator to a piecewise-constant control.

    fhat(t_i) = sum_{j<=i} fdot_j integral{cell j} K(t_i, u) du; fhat(0) = 0.
    """
    fdot = np.asarray(getattr(control, "fdot", control), dtype=float)
    if fdot.shape != (grid.N,):
        raise KernelError(
            f"control has {fdot.shape} cells, grid expects ({grid.N},)"
        )
    W = lift_matrix(spec, grid)
    values = np.concatenate(([0.0], W @ fdot))
    return LiftedPath(values=values, grid=grid)


# ---------------------------------------------------------------------------
# Regularity diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModulusReport:
    """Estimated squared-increment modulus M(delta) and fitted exponent."""

    deltas: tuple
    values: tuple
    alpha_hat: float


def _increment_energy(spec: KernelSpec, t1: float, t2: float, quad_N: int) -> float:
    """integral{0..T} (K(t2,s) - K(t1,s))^2 ds for t1 < t2, split at t1.

    The integrand vanishes beyond t2; splitting at t1 keeps every kernel
    singularity at a sub-interval endpoint, where midpoints never sample.
    """
    total = 0.0
    if t1 > 0.0:
        n1 = max(32, int(quad_N * t1 / t2))
        mids = (np.arange(n1) + 0.5) * (t1 / n1)
        diff = spec.values(t2, mids) - spec.values(t1, mids)
        total += float(diff @ diff) * (t1 / n1)
    n2 = max(32, quad_N - int(quad_N * t1 / t2))
    mids = t1 + (np.arange(n2) + 0.5) * ((t2 - t1) / n2)
    tail = spec.values(t2, mids)
    total += float(tail @ tail) * ((t2 - t1) / n2)
    return total


def modulus_estimate(
    spec: KernelSpec,
    deltas,
    quad_N: int = 512,
    probe: int = 33,
) -> ModulusReport:
    """Estimate M(delta) over pairs at distance delta and fit log M ~ alpha log delta.

    The exponent fit uses only the smallest half of the deltas (the asymptotic
    regime governs the Holder exponent).
    """
    deltas = sorted(float(d) for d in deltas)
    if not deltas or deltas[0] <= 0 or deltas[-1] > spec.T:
        raise ValueError("deltas must lie in (0, T]")
    values = []
    for d in deltas:
        t1s = np.linspace(0.0, spec.T - d, probe)
        best = max(_increment_energy(spec, t1, t1 + d, quad_N) for t1 in t1s)
        values.append(best)
    k = max(2, (len(deltas) + 1) // 2)
    logd = np.log(deltas[:k])
    logm = np.log(values[:k])
    alpha = float(np.polyfit(logd, logm, 1)[0])
    return ModulusReport(deltas=tuple(deltas), values=tuple(values), alpha_hat=alpha)


@dataclass(frozen=True)
class ScaledFamilyTable:
    """Sup-gap between the rescaled, renormalized covariance and a limit kernel."""

    epsilons: tuple
    gaps: tuple
    normalizer: float
    decreasing: bool

    def rows(self):
        return list(zip(self.epsilons, self.gaps))


def scaled_family_check(
    spec: KernelSpec,
    epsilons,
    normalizer: float,
    limit: KernelSpec,
    probe_N: int = 8,
    quad_N: int = 256,
) -> ScaledFamilyTable:
    """Check k(eps t, eps s) / eps^(2 nu) -> k_limit(t, s) on a probe grid.

    A valid (family, normalizer, limit) triple yields gaps decreasing in eps.
    """
    if not spec.rescalable:
        raise KernelError(f"family '{spec.family}' does not support time rescaling")
    eps = [float(e) for e in epsilons]
    if not eps or any(e <= 0 for e in eps) or any(b <= a for a, b in zip(eps[1:], eps)):
        raise ValueError("epsilons must be strictly decreasing and positive")
    T = limit.T
    if eps[0] * T > spec.T * (1 + 1e-12):
        raise KernelError("rescaled horizon exceeds the kernel horizon")
    ts = np.linspace(T / probe_N, T, probe_N)
    k_lim = covariance_matrix(limit, ts, quad_N)
    gaps = []
    for e in eps:
        k_eps = covariance_matrix(spec, e * ts, quad_N) / e ** (2.0 * normalizer)
        gaps.append(float(np.max(np.abs(k_eps - k_lim))))
    dec = all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    return ScaledFamilyTable(
        epsilons=tuple(eps), gaps=tuple(gaps), normalizer=float(normalizer), decreasing=dec
    )


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------

def kernel_to_dict(spec: KernelSpec) -> dict:
    if isinstance(spec, BrownianMotion):
        return {"family": "bm", "T": spec.T}
    if isinstance(spec, FractionalBM):
        return {"family": "fbm", "H": spec.H, "T": spec.T}
    if isinstance(spec, RiemannLiouville):
        return {"family": "rl", "H": spec.H, "T": spec.T}
    if isinstance(spec, FractionalOU):
        return {"family": "fou", "H": spec.H, "a": spec.a, "T": spec.T}
    if isinstance(spec, IntegratedBM):
        return {"family": "ibm", "a": spec.a, "T": spec.T}
    if isinstance(spec, Conditioned):
        return {
            "family": "conditioned",
            "base": kernel_to_dict(spec.base),
            "T_past": spec.T_past,
            "T": spec.T,
        }
    raise KernelError(f"unknown kernel spec {spec!r}")


def kernel_from_dict(d: dict) -> KernelSpec:
    try:
        family = d["family"]
    except (TypeError, KeyError):
        raise KernelError("kernel object needs a 'family' key") from None
    T = float(d.get("T", 1.0))
    if family == "bm":
        return BrownianMotion(T=T)
    if family == "fbm":
        return FractionalBM(H=float(d["H"]), T=T)
    if family == "rl":
        return RiemannLiouville(H=float(d["H"]), T=T)
    if family == "fou":
        return FractionalOU(H=float(d["H"]), a=float(d["a"]), T=T)
    if family == "ibm":
        return IntegratedBM(a=int(d["a"]), T=T)
    if family == "conditioned":
        return Conditioned(base=kernel_from_dict(d["base"]), T_past=float(d["T_past"]), T=T)
    raise KernelError(f"unknown kernel family '{family}'")
