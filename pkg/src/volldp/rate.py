"""Variational rate functionals of the small-noise log-price family.

Everything is discretized on a uniform grid with piecewise-constant control
derivatives fdot, which keeps the Cameron-Martin energy exact and lines up
with the left-point Euler simulator: the volatility argument on cell j is the
lifted path at the cell's left node, fhat(t_j).

Functionals (all cell sums, delta = T/N):

  energy      H(f, x)   = 1/2 sum fdot_j^2 delta
                        + 1/2 sum ((xdot_j - mu_j - rho sig_j fdot_j)/(rho_bar sig_j))^2 delta
  pathwise    I(x)      = inf_f H(f, x)
  terminal    I_T(y)    = inf_f 1/2 ||f||^2
                        + (y - sum (mu_j + rho sig_j fdot_j) delta)^2 / (2 rho_bar^2 sum sig_j^2 delta)
  crossing    I_U(U)    = inf_f min_i 1/2 ||f||^2
                        + (log U - x0 - rho Psi_i)^2 / (2 rho_bar^2 S_i),
              Psi_i = sum_{j<i} sig_j fdot_j delta,  S_i = sum_{j<i} sig_j^2 delta

with sig_j = sigma(fhat(t_j)), mu_j = mu(fhat(t_j)).  Gradients are analytic:
direct terms plus a chain term through the lift matrix and the catalog
derivatives of sigma and mu.  The minimizer is limited-memory quasi-Newton
from multiple deterministic starts; a brute-force tensor-grid oracle over
block-constant controls validates it from above.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .kernels import Grid, lift_matrix
from .model import Constant, ModelSpec


class RateError(ValueError):
    """Invalid rate-functional request."""


# ---------------------------------------------------------------------------
# Controls and path hypotheses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlFunction:
    """Piecewise-constant derivative fdot on grid cells; f(0) = 0."""

    fdot: np.ndarray
    grid: Grid

    def __post_init__(self):
        fdot = np.asarray(self.fdot, dtype=float)
        if fdot.shape != (self.grid.N,):
            raise RateError(f"control needs one fdot value per cell, shape ({self.grid.N},)")
        if not np.all(np.isfinite(fdot)):
            raise RateError("control derivative must be finite")
        object.__setattr__(self, "fdot", fdot)

    @property
    def f(self) -> np.ndarray:
        """Nodal values of the reconstructed f."""
        return np.concatenate(([0.0], np.cumsum(self.fdot) * self.grid.delta))

    @property
    def energy(self) -> float:
        """Cameron-Martin energy 1/2 integral fdot^2."""
        return 0.5 * float(self.fdot @ self.fdot) * self.grid.delta


@dataclass(frozen=True)
class PathHypothesis:
    """Candidate nodal path x with x(0) = 0."""

    x: np.ndarray
    grid: Grid

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.shape != (self.grid.N + 1,):
            raise RateError(f"path hypothesis needs {self.grid.N + 1} nodal values")
        if x[0] != 0.0:
            raise RateError("path hypothesis must start at 0")
        if not np.all(np.isfinite(x)):
            raise RateError("path hypothesis must be finite")
        object.__setattr__(self, "x", x)

    @property
    def xdot(self) -> np.ndarray:
        return np.diff(self.x) / self.grid.delta


# ---------------------------------------------------------------------------
# Psi functionals
# ---------------------------------------------------------------------------

def _lift_left(model: ModelSpec, fdot: np.ndarray, grid: Grid) -> np.ndarray:
    """Lifted path at cell left nodes: fhat(t_j) for j = 0..N-1."""
    W = lift_matrix(model.kernel, grid)
    return np.concatenate(([0.0], (W @ fdot)[: grid.N - 1]))


def psi(model: ModelSpec, control: ControlFunction, grid: Grid) -> np.ndarray:
    """Nodal Psi(f, fhat)(t_i) = integral{0..t_i} sigma(fhat(s)) fdot(s) ds,
    left-point rule per cell."""
    if control.grid != grid:
        raise RateError("control grid does not match the requested grid")
    g = _lift_left(model, control.fdot, grid)
    sig = np.asarray(model.sigma(g), dtype=float)
    return np.concatenate(([0.0], np.cumsum(sig * control.fdot) * grid.delta))


def psi_m(model: ModelSpec, m: int, f_path, g_path, grid: Grid) -> np.ndarray:
    """Block-frozen Psi_m on raw nodal paths (lifted or simulated alike): the
    volatility argument is held at the last breakpoint k T/m below each cell.
    Exact telescoping sum, no quadrature error."""
    f = np.asarray(f_path, dtype=float)
    g = np.asarray(g_path, dtype=float)
    N = grid.N
    if f.shape != (N + 1,) or g.shape != (N + 1,):
        raise RateError(f"paths must be nodal arrays of length {N + 1}")
    if m < 1 or N % m != 0:
        raise RateError(f"breakpoints T/{m} do not land on grid nodes (N={N})")
    b = N // m
    frozen = (np.arange(N) // b) * b
    sig = np.asarray(model.sigma(g[frozen]), dtype=float)
    return np.concatenate(([0.0], np.cumsum(sig * np.diff(f))))


# ---------------------------------------------------------------------------
# Conditional rate and energy
# ---------------------------------------------------------------------------

def conditional_rate(model: ModelSpec, x: PathHypothesis, phi) -> float:
    """J(x | phi) = 1/2 integral ((xdot - mu(phi)) / (rho_bar sigma(phi)))^2 dt,
    with phi a nodal path evaluated at cell left nodes."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (x.grid.N + 1,):
        raise RateError("conditioning path must be nodal on the same grid")
    left = phi[:-1]
    sig = np.asarray(model.sigma(left), dtype=float)
    mu = np.asarray(model.mu(left), dtype=float)
    r = (x.xdot - mu) / (model.rho_bar * sig)
    return 0.5 * float(r @ r) * x.grid.delta


def energy(model: ModelSpec, control: ControlFunction, x: PathHypothesis) -> float:
    """H((f, fhat), x): control energy plus the conditional quadratic cost."""
    if control.grid != x.grid:
        raise RateError("control and path hypothesis must share a grid")
    grid = control.grid
    g = _lift_left(model, control.fdot, grid)
    sig = np.asarray(model.sigma(g), dtype=float)
    mu = np.asarray(model.mu(g), dtype=float)
    r = (x.xdot - mu - model.rho * sig * control.fdot) / (model.rho_bar * sig)
    return control.energy + 0.5 * float(r @ r) * grid.delta


def _energy_m(model: ModelSpec, control: ControlFunction, x: PathHypothesis, m: int) -> float:
    """Test fixture: the energy with Psi replaced by the block-frozen Psi_m,
    through the identity H_m = 1/2 ||f||^2 + J(x - rho Psi_m | fhat)."""
    grid = control.grid
    W = lift_matrix(model.kernel, grid)
    fhat = np.concatenate(([0.0], W @ control.fdot))
    pm = psi_m(model, m, control.f, fhat, grid)
    shifted = PathHypothesis(x=x.x - model.rho * pm, grid=grid)
    return control.energy + conditional_rate(model, shifted, fhat)


# ---------------------------------------------------------------------------
# Objectives (value + analytic gradient + batch evaluation)
# ---------------------------------------------------------------------------

class _Objective:
    """Shared machinery: left-node volatility evaluation and the lift chain."""

    def __init__(self, model: ModelSpec, grid: Grid):
        self.model = model
        self.grid = grid
        self.W = lift_matrix(model.kernel, grid)
        self.delta = grid.delta
        self.N = grid.N

    def _coeffs(self, fdot):
        g = np.concatenate(([0.0], (self.W @ fdot)[: self.N - 1]))
        m = self.model
        return (
            np.asarray(m.sigma(g), dtype=float),
            np.asarray(m.mu(g), dtype=float),
            np.asarray(m.sigma.derivative(g), dtype=float),
            np.asarray(m.mu.derivative(g), dtype=float),
        )

    def _batch_coeffs(self, F):
        """F: (M, N) batch of controls -> (sig, mu) arrays of shape (M, N)."""
        G = np.zeros_like(F)
        G[:, 1:] = F @ self.W[: self.N - 1].T
        m = self.model
        return np.asarray(m.sigma(G), dtype=float), np.asarray(m.mu(G), dtype=float)

    def _chain(self, c):
        """Gradient contribution of a per-cell sensitivity c_k = dval/dg_k."""
        return self.W[: self.N - 1].T @ c[1:]

    def value(self, fdot) -> float:
        return self.value_and_grad(fdot)[0]


class _PathwiseObjective(_Objective):
    def __init__(self, model, grid, x: PathHypothesis):
        super().__init__(model, grid)
        self.xdot = x.xdot

    def value_and_grad(self, fdot):
        m, d = self.model, self.delta
        sig, mu, dsig, dmu = self._coeffs(fdot)
        r = (self.xdot - mu - m.rho * sig * fdot) / (m.rho_bar * sig)
        val = 0.5 * d * float(fdot @ fdot) + 0.5 * d * float(r @ r)
        drdg = (-dmu - m.rho * dsig * fdot) / (m.rho_bar * sig) - r * dsig / sig
        grad = d * fdot - (m.rho / m.rho_bar) * d * r + self._chain(d * r * drdg)
        return val, grad

    def batch_values(self, F):
        m, d = self.model, self.delta
        sig, mu = self._batch_coeffs(F)
        r = (self.xdot - mu - m.rho * sig * F) / (m.rho_bar * sig)
        return 0.5 * d * np.einsum("ij,ij->i", F, F) + 0.5 * d * np.einsum("ij,ij->i", r, r)


class _TerminalObjective(_Objective):
    def __init__(self, model, grid, y: float):
        super().__init__(model, grid)
        self.y = float(y)

    def value_and_grad(self, fdot):
        m, d = self.model, self.delta
        sig, mu, dsig, dmu = self._coeffs(fdot)
        A = d * float(np.sum(mu + m.rho * sig * fdot))
        S = d * float(sig @ sig)
        q = self.y - A
        rb2 = m.rho_bar ** 2
        val = 0.5 * d * float(fdot @ fdot) + 0.5 * q * q / (rb2 * S)
        cA = -q / (rb2 * S)
        cS = -0.5 * q * q / (rb2 * S * S)
        grad = d * fdot + cA * m.rho * sig * d \
            + self._chain(d * (cA * (dmu + m.rho * dsig * fdot) + cS * 2.0 * sig * dsig))
        return val, grad

    def batch_values(self, F):
        m, d = self.model, self.delta
        sig, mu = self._batch_coeffs(F)
        A = d * np.sum(mu + m.rho * sig * F, axis=1)
        S = d * np.einsum("ij,ij->i", sig, sig)
        q = self.y - A
        return 0.5 * d * np.einsum("ij,ij->i", F, F) + 0.5 * q * q / (m.rho_bar ** 2 * S)


class _CrossingObjective(_Objective):
    def __init__(self, model, grid, U: float):
        super().__init__(model, grid)
        if U <= model.s0:
            raise RateError(f"barrier U={U} must exceed the initial price {model.s0}")
        self.b = math.log(U) - model.x0
        if not (isinstance(model.mu, Constant) and model.mu.c == 0.0):
            warnings.warn(
                "crossing rate assumes a driftless normalized model; "
                "mu is ignored by the crossing functional",
                stacklevel=3,
            )

    def _node_terms(self, fdot, sig):
        m, d = self.model, self.delta
        Psi = np.cumsum(sig * fdot) * d      # Psi at nodes 1..N
        S = np.cumsum(sig * sig) * d
        q = self.b - m.rho * Psi
        cost = 0.5 * q * q / (m.rho_bar ** 2 * S)
        return Psi, S, q, cost

    def value_and_grad(self, fdot):
        m, d = self.model, self.delta
        sig, mu, dsig, dmu = self._coeffs(fdot)
        Psi, S, q, cost = self._node_terms(fdot, sig)
        i = int(np.argmin(cost))             # node index i+1; cells 0..i
        e = 0.5 * d * float(fdot @ fdot)
        val = e + float(cost[i])
        rb2 = m.rho_bar ** 2
        cPsi = -m.rho * q[i] / (rb2 * S[i])
        cS = -0.5 * q[i] * q[i] / (rb2 * S[i] * S[i])
        mask = np.zeros(self.N)
        mask[: i + 1] = 1.0
        grad = d * fdot + cPsi * sig * d * mask \
            + self._chain(d * mask * (cPsi * dsig * fdot + cS * 2.0 * sig * dsig))
        return val, grad

    def t_star(self, fdot) -> float:
        sig = self._coeffs(fdot)[0]
        cost = self._node_terms(fdot, sig)[3]
        return self.grid.nodes[int(np.argmin(cost)) + 1]

    def batch_values(self, F):
        m, d = self.model, self.delta
        sig, _ = self._batch_coeffs(F)
        Psi = np.cumsum(sig * F, axis=1) * d
        S = np.cumsum(sig * sig, axis=1) * d
        q = self.b - m.rho * Psi
        cost = 0.5 * q * q / (m.rho_bar ** 2 * S)
        return 0.5 * d * np.einsum("ij,ij->i", F, F) + np.min(cost, axis=1)


# ---------------------------------------------------------------------------
# Multistart minimization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateConfig:
    """Optimizer settings for the variational problems."""

    N: int = 256
    multistarts: int = 8
    grad_tol: float = 1e-7
    max_iter: int = 500
    seed: int = 0
    start_energies: tuple = (0.1, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0)

    def __post_init__(self):
        if self.multistarts < 1:
            raise RateError("need at least one optimizer start")


@dataclass(frozen=True)
class RateResult:
    """Minimization outcome; value >= 0, argmin is the best control found."""

    value: float
    argmin: ControlFunction
    grad_norm: float
    iterations: int
    multistart_index: int
    converged: bool
    multistart_values: tuple
    fd_gap: float
    t_star: float | None = None


def rate_result_to_dict(res: RateResult) -> dict:
    return {
        "value": res.value,
        "t_star": res.t_star,
        "converged": res.converged,
        "grad_norm": res.grad_norm,
        "fdot": [float(v) for v in res.argmin.fdot],
    }


def _starts(objective, cfg: RateConfig, grid: Grid):
    """Zero control plus Gaussian controls scaled to an energy ladder."""
    N = grid.N
    yield np.zeros(N)
    zero_val = objective.value(np.zeros(N))
    scale = max(zero_val, 0.5)
    rng = np.random.default_rng(cfg.seed)
    ladder = cfg.start_energies
    for k in range(cfg.multistarts - 1):
        raw = rng.standard_normal(N)
        target = ladder[k % len(ladder)] * scale
        norm = float(raw @ raw) * grid.delta
        yield raw * math.sqrt(2.0 * target / norm)


def _fd_gap(objective, fdot, grad) -> float:
    """Gap between the analytic directional derivative and a central finite
    difference along a fixed direction.  Relative where the derivative has
    size, floored by the objective scale: at a minimum both sides are pure
    roundoff and a raw ratio would be meaningless."""
    d = grad if float(np.linalg.norm(grad)) > 1e-12 else np.ones_like(fdot)
    d = d / float(np.linalg.norm(d))
    h = 1e-5 * max(1.0, float(np.linalg.norm(fdot)))
    up = objective.value(fdot + h * d)
    dn = objective.value(fdot - h * d)
    fd = (up - dn) / (2.0 * h)
    an = float(grad @ d)
    floor = 1e-6 * (1.0 + abs(up) + abs(dn))
    return abs(fd - an) / max(abs(an), abs(fd), floor)


def _minimize(objective, cfg: RateConfig, grid: Grid) -> RateResult:
    best = None
    values = []
    for idx, start in enumerate(_starts(objective, cfg, grid)):
        res = minimize(
            objective.value_and_grad,
            start,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": cfg.max_iter, "ftol": 1e-16, "gtol": cfg.grad_tol},
        )
        gnorm = float(np.max(np.abs(res.jac)))
        values.append(float(res.fun))
        if best is None or res.fun < best[0]:
            best = (float(res.fun), np.asarray(res.x), gnorm, int(res.nit), idx)
    val, x, gnorm, nit, idx = best
    _, grad = objective.value_and_grad(x)
    gnorm = float(np.max(np.abs(grad)))
    control = ControlFunction(fdot=x, grid=grid)
    return RateResult(
        value=val,
        argmin=control,
        grad_norm=gnorm,
        iterations=nit,
        multistart_index=idx,
        converged=gnorm <= cfg.grad_tol,
        multistart_values=tuple(values),
        fd_gap=_fd_gap(objective, x, grad),
        t_star=objective.t_star(x) if isinstance(objective, _CrossingObjective) else None,
    )


def pathwise_rate(model: ModelSpec, x: PathHypothesis, cfg: RateConfig = RateConfig()) -> RateResult:
    """I(x) = inf over controls of the energy functional."""
    grid = x.grid
    if grid.N != cfg.N:
        raise RateError(f"path hypothesis grid N={grid.N} does not match cfg.N={cfg.N}")
    return _minimize(_PathwiseObjective(model, grid, x), cfg, grid)


def terminal_rate(model: ModelSpec, y: float, cfg: RateConfig = RateConfig()) -> RateResult:
    """Terminal-value rate at log-return level y (relative to x0)."""
    grid = Grid(N=cfg.N, T=model.T)
    return _minimize(_TerminalObjective(model, grid, y), cfg, grid)


def crossing_rate(model: ModelSpec, U: float, cfg: RateConfig = RateConfig()) -> RateResult:
    """Barrier-crossing rate for the price to reach U; t_star is the optimal
    crossing node."""
    grid = Grid(N=cfg.N, T=model.T)
    return _minimize(_CrossingObjective(model, grid, U), cfg, grid)


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

def _build_objective(model: ModelSpec, objective: tuple, grid: Grid):
    kind, arg = objective
    if kind == "pathwise":
        x = arg if isinstance(arg, PathHypothesis) else PathHypothesis(np.asarray(arg, dtype=float), grid)
        if x.grid != grid:
            raise RateError("pathwise target must live on the oracle grid")
        return _PathwiseObjective(model, grid, x)
    if kind == "terminal":
        return _TerminalObjective(model, grid, float(arg))
    if kind == "crossing":
        return _CrossingObjective(model, grid, float(arg))
    raise RateError(f"unknown objective kind '{kind}'")


def oracle_rate(
    model: ModelSpec,
    objective: tuple,
    cells: int,
    grid_values,
    cfg: RateConfig = RateConfig(),
) -> float:
    """Exhaustive tensor-grid search over block-constant controls.

    objective is ("pathwise", nodal x), ("terminal", y) or ("crossing", U).
    The control derivative is held constant on `cells` near-equal blocks and
    every combination of grid_values is evaluated; returns the smallest value
    (an upper bound for the true infimum).
    """
    if not 2 <= cells <= 4:
        raise RateError("oracle supports 2 to 4 control cells")
    vals = np.asarray(list(grid_values), dtype=float)
    if vals.size < 2:
        raise RateError("oracle needs at least two candidate values per cell")
    grid = Grid(N=cfg.N, T=model.T)
    obj = _build_objective(model, objective, grid)
    sizes = [len(chunk) for chunk in np.array_split(np.arange(cfg.N), cells)]
    mesh = np.meshgrid(*([vals] * cells), indexing="ij")
    combos = np.stack([m.ravel() for m in mesh], axis=1)  # (n_combos, cells)
    best = math.inf
    step = max(1, 262144 // cfg.N)
    for lo in range(0, combos.shape[0], step):
        block = combos[lo : lo + step]
        F = np.repeat(block, sizes, axis=1)
        best = min(best, float(np.min(obj.batch_values(F))))
    return best
