"""Drift/volatility catalog, model assembly, and assumption validation.

The catalog is closed on purpose: the rate optimizer consumes exact pointwise
derivatives and the simulator consumes analytic range bounds, neither of which
survive arbitrary user-supplied callables.  Every entry is smooth or Lipschitz,
maps floats and arrays alike, and knows its own positivity and growth class.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .kernels import KernelSpec, kernel_from_dict, kernel_to_dict


class ModelError(ValueError):
    """Invalid model assembly or coefficient parameters."""


# ---------------------------------------------------------------------------
# Scalar coefficient functions
# ---------------------------------------------------------------------------

class ScalarFunction:
    """A scalar coefficient x -> f(x) with exact derivative and range bounds."""

    kind = "abstract"

    def __call__(self, x):
        raise NotImplementedError

    def derivative(self, x):
        raise NotImplementedError

    def range_on(self, M: float) -> tuple[float, float]:
        """Tight (min, max) of f over [-M, M]."""
        raise NotImplementedError

    @property
    def strictly_positive(self) -> bool:
        """Whether inf f > 0 on every bounded set (required of a volatility)."""
        return False

    @property
    def superpolynomial(self) -> bool:
        """Whether f outgrows every power of |x| (blocks power-growth bounds)."""
        return False


@dataclass(frozen=True)
class Constant(ScalarFunction):
    c: float
    kind = "constant"

    def __call__(self, x):
        return self.c * np.ones_like(np.asarray(x, dtype=float)) if np.ndim(x) else self.c

    def derivative(self, x):
        return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0

    def range_on(self, M):
        return (self.c, self.c)

    @property
    def strictly_positive(self):
        return self.c > 0


@dataclass(frozen=True)
class AffineFloor(ScalarFunction):
    """max(a + b x, floor); the floor keeps an affine volatility positive."""

    a: float
    b: float
    floor: float
    kind = "affine_floor"

    def __post_init__(self):
        if not self.floor > 0:
            raise ModelError("AffineFloor needs floor > 0")

    def __call__(self, x):
        return np.maximum(self.a + self.b * np.asarray(x, dtype=float), self.floor)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(self.a + self.b * x > self.floor, self.b, 0.0)

    def range_on(self, M):
        ends = (self.a - self.b * M, self.a + self.b * M)
        return (max(self.floor, min(ends)), max(self.floor, max(ends)))

    @property
    def strictly_positive(self):
        return True


@dataclass(frozen=True)
class Exponential(ScalarFunction):
    """c exp(lam x).  Outgrows every power; accepted as volatility only with a
    warning when the model is correlated, since the rate-identification step
    needs power growth."""

    c: float
    lam: float
    kind = "exponential"

    def __call__(self, x):
        return self.c * np.exp(self.lam * np.asarray(x, dtype=float))

    def derivative(self, x):
        return self.c * self.lam * np.exp(self.lam * np.asarray(x, dtype=float))

    def range_on(self, M):
        lo = self.c * math.exp(-abs(self.lam) * M)
        hi = self.c * math.exp(abs(self.lam) * M)
        return (min(lo, hi), max(lo, hi)) if self.c > 0 else (self.c * math.e ** (abs(self.lam) * M), self.c)

    @property
    def strictly_positive(self):
        return self.c > 0

    @property
    def superpolynomial(self):
        return self.lam != 0.0


@dataclass(frozen=True)
class PowerGrowth(ScalarFunction):
    """c (1 + x^2)^(beta/2): smooth, grows like |x|^beta, positive for c > 0."""

    c: float
    beta: float
    kind = "power_growth"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.c * (1.0 + x * x) ** (0.5 * self.beta)
        return out if out.ndim else float(out)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        out = self.c * self.beta * x * (1.0 + x * x) ** (0.5 * self.beta - 1.0)
        return out if out.ndim else float(out)

    def range_on(self, M):
        at0, atM = self.c, self.c * (1.0 + M * M) ** (0.5 * self.beta)
        return (min(at0, atM), max(at0, atM))

    @property
    def strictly_positive(self):
        return self.c > 0


@dataclass(frozen=True)
class Sigmoid(ScalarFunction):
    """lo + (hi - lo) expit(x): bounded, increasing from lo to hi."""

    lo: float
    hi: float
    kind = "sigmoid"

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ModelError("Sigmoid needs hi > lo")

    def __call__(self, x):
        out = self.lo + (self.hi - self.lo) * expit(np.asarray(x, dtype=float))
        return out if np.ndim(x) else float(out)

    def derivative(self, x):
        e = expit(np.asarray(x, dtype=float))
        out = (self.hi - self.lo) * e * (1.0 - e)
        return out if np.ndim(x) else float(out)

    def range_on(self, M):
        return (
            self.lo + (self.hi - self.lo) * float(expit(-M)),
            self.lo + (self.hi - self.lo) * float(expit(M)),
        )

    @property
    def strictly_positive(self):
        return self.lo > 0


def eval_fn(f: ScalarFunction, x: float) -> float:
    """Pointwise coefficient evaluation."""
    return float(f(x))


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelSpec:
    """A log-price model: volatility sigma(Bhat), drift mu(Bhat), leverage rho.

    The driving pair is (B, W) with corr(B, W) = rho; the price noise splits as
    rho dB + rho_bar dW with rho_bar = sqrt(1 - rho^2) > 0.
    """

    sigma: ScalarFunction
    mu: ScalarFunction
    rho: float
    kernel: KernelSpec
    x0: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ModelError(f"leverage rho={self.rho} must lie in (-1, 1)")
        if not self.sigma.strictly_positive:
            raise ModelError(f"volatility kind '{self.sigma.kind}' is not strictly positive")
        if self.kernel.T < self.T * (1 - 1e-12):
            raise ModelError(
                f"kernel horizon {self.kernel.T} shorter than model horizon {self.T}"
            )
        if not self.T > 0:
            raise ModelError("model horizon T must be positive")
        if self.sigma.superpolynomial and self.rho != 0.0:
            warnings.warn(
                "super-polynomial volatility in a correlated model: tail-rate "
                "identification is not guaranteed",
                stacklevel=2,
            )

    @property
    def rho_bar(self) -> float:
        return math.sqrt(1.0 - self.rho * self.rho)

    @property
    def s0(self) -> float:
        """Initial price level exp(x0)."""
        return math.exp(self.x0)


@dataclass(frozen=True)
class SpeedSchedule:
    """Strictly decreasing noise sizes eps_n; LDP speeds are eps_n^(-2)."""

    epsilons: tuple

    def __post_init__(self):
        eps = self.epsilons
        if len(eps) == 0 or any(e <= 0 for e in eps):
            raise ModelError("epsilons must be positive")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ModelError("epsilons must be strictly decreasing")

    @property
    def speeds(self) -> tuple:
        return tuple(1.0 / (e * e) for e in self.epsilons)


# ---------------------------------------------------------------------------
# Assumption validation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AssumptionReport:
    """Numerical standing-assumption checks for a model.

    The three checks: strict positivity of sigma on the probe window, a local
    continuity modulus for sigma (sup increment over shrinking lags, with a
    fitted exponent), and a log-log growth fit of sigma + |mu| against |x|.
    `qualifies` maps result names to booleans:

      uncorrelated_ldp     sample-path large deviations, leverage rho = 0
      correlated_ldp       sample-path large deviations, any |rho| < 1
      rate_identification  tail rates identified by the variational problem
                           (needs the power-growth bound)
    """

    sigma_positive: bool
    sigma_min_sampled: float
    continuity_ok: bool
    continuity_exponent: float
    local_modulus: tuple
    growth_ok: bool
    growth_exponent: float
    qualifies: dict
    notes: tuple


def _local_modulus(f: ScalarFunction, xs: np.ndarray, n_lags: int = 7):
    """L(delta) = max |f(x) - f(y)| over |x - y| <= delta, on a uniform probe."""
    vals = np.asarray(f(xs), dtype=float)
    dx = xs[1] - xs[0]
    lags = []
    lag = max(1, (xs.size - 1) // 2)
    while lag >= 1 and len(lags) < n_lags:
        lags.append(lag)
        lag //= 2
    max_lag = lags[0]
    row = np.array([np.max(np.abs(vals[j:] - vals[:-j])) for j in range(1, max_lag + 1)])
    running = np.maximum.accumulate(row)  # L is monotone in the lag
    return sorted((lag * dx, float(running[lag - 1])) for lag in lags)


def validate_assumptions(model: ModelSpec, probe_range: tuple = (-4.0, 4.0), n_probe: int = 2001) -> AssumptionReport:
    """Probe the standing assumptions on a bounded window; always returns a report."""
    lo, hi = float(probe_range[0]), float(probe_range[1])
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ModelError("probe_range must be a bounded interval (lo, hi)")
    xs = np.linspace(lo, hi, n_probe)
    sig = np.asarray(model.sigma(xs), dtype=float)
    sigma_min = float(sig.min())
    sigma_positive = sigma_min > 0.0

    # (ii) local continuity modulus of sigma, with fitted exponent
    modulus = _local_modulus(model.sigma, xs)
    deltas = np.array([d for d, _ in modulus])
    Ls = np.array([v for _, v in modulus])
    if np.all(Ls < 1e-14):
        cont_exp = math.inf  # constant function: modulus identically zero
        continuity_ok = True
    else:
        mask = Ls > 1e-14
        cont_exp = float(np.polyfit(np.log(deltas[mask]), np.log(Ls[mask]), 1)[0]) if mask.sum() >= 2 else 0.0
        continuity_ok = cont_exp > 0.05

    # (iii) growth fit of sigma + |mu| on the outer half of the probe window
    g = sig + np.abs(np.asarray(model.mu(xs), dtype=float))
    absx = np.abs(xs)
    cutoff = 0.5 * max(abs(lo), abs(hi))
    sel = absx >= cutoff
    lx, lg = np.log(absx[sel]), np.log(np.maximum(g[sel], 1e-300))
    growth_exp = float(np.polyfit(lx, lg, 1)[0])
    # super-polynomial growth shows as a slope that keeps increasing with |x|
    median = np.median(lx)
    s1 = float(np.polyfit(lx[lx <= median], lg[lx <= median], 1)[0])
    s2 = float(np.polyfit(lx[lx > median], lg[lx > median], 1)[0])
    structural = model.sigma.superpolynomial or model.mu.superpolynomial
    superpoly = structural or (s2 - s1) > 0.5
    growth_ok = not superpoly

    notes = []
    if structural:
        notes.append("volatility or drift is structurally super-polynomial")
    if model.kernel.low_confidence:
        notes.append("kernel roughness is below the validated quadrature range")
    qualifies = {
        "uncorrelated_ldp": bool(sigma_positive and continuity_ok and model.rho == 0.0),
        "correlated_ldp": bool(sigma_positive and continuity_ok),
        "rate_identification": bool(sigma_positive and continuity_ok and growth_ok),
    }
    if not qualifies["rate_identification"]:
        notes.append("tail-rate identification not guaranteed for this volatility")
    return AssumptionReport(
        sigma_positive=sigma_positive,
        sigma_min_sampled=sigma_min,
        continuity_ok=continuity_ok,
        continuity_exponent=cont_exp,
        local_modulus=tuple(modulus),
        growth_ok=growth_ok,
        growth_exponent=growth_exp,
        qualifies=qualifies,
        notes=tuple(notes),
    )


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------

_FN_FIELDS = {
    "constant": (Constant, ("c",)),
    "affine_floor": (AffineFloor, ("a", "b", "floor")),
    "exponential": (Exponential, ("c", "lam")),
    "power_growth": (PowerGrowth, ("c", "beta")),
    "sigmoid": (Sigmoid, ("lo", "hi")),
}


def fn_to_dict(f: ScalarFunction) -> dict:
    try:
        _, fields = _FN_FIELDS[f.kind]
    except KeyError:
        raise ModelError(f"unknown coefficient kind '{f.kind}'") from None
    return {"kind": f.kind, **{name: getattr(f, name) for name in fields}}


def fn_from_dict(d: dict) -> ScalarFunction:
    try:
        kind = d["kind"]
    except (TypeError, KeyError):
        raise ModelError("coefficient object needs a 'kind' key") from None
    if kind not in _FN_FIELDS:
        raise ModelError(f"unknown coefficient kind '{kind}'")
    cls, fields = _FN_FIELDS[kind]
    try:
        return cls(**{name: float(d[name]) for name in fields})
    except KeyError as e:
        raise ModelError(f"coefficient kind '{kind}' missing parameter {e}") from None


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "sigma": fn_to_dict(model.sigma),
        "mu": fn_to_dict(model.mu),
        "rho": model.rho,
        "x0": model.x0,
        "T": model.T,
        "kernel": kernel_to_dict(model.kernel),
    }


def model_from_dict(d: dict) -> ModelSpec:
    for key in ("sigma", "mu", "rho", "kernel"):
        if key not in d:
            raise ModelError(f"model object missing '{key}'")
    return ModelSpec(
        sigma=fn_from_dict(d["sigma"]),
        mu=fn_from_dict(d["mu"]),
        rho=float(d["rho"]),
        kernel=kernel_from_dict(d["kernel"]),
        x0=float(d.get("x0", 0.0)),
        T=float(d.get("T", 1.0)),
    )
