"""Joint sampling of (B, Bhat, W) and Euler simulation of the scaled log-price.

The volatility driver Bhat and the price noises share one normal array xi per
path; W comes from an independent array eta.  Nodal paths:

    B(t_i)    = sqrt(delta) * sum_{j<=i} xi_j
    Bhat(t_i) = sum_{j<=i} L[i][j] * xi_j,    L[i][j] = integral{cell j} K(t_i,u) du / sqrt(delta)
    W(t_i)    = sqrt(delta) * sum_{j<=i} eta_j

so that Var Bhat(t_i) matches the kernel covariance k(t_i, t_i) up to cell
averaging.  The log-price follows left-point Euler:

    Z(t_{i+1}) = Z(t_i) + [mu(eps Bhat(t_i)) - eps^2 sigma^2(eps Bhat(t_i))/2] delta
               + eps rho_bar sigma(eps Bhat(t_i)) dW_i + eps rho sigma(eps Bhat(t_i)) dB_i

split into X (drift, Ito correction, W-noise; starts at x0) plus V (B-noise;
starts at 0).  Noise is drawn from counter-based Philox streams in fixed-size
blocks keyed by (seed, block index), so results are bit-identical no matter
how the blocks are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ._util import wilson_interval
from .kernels import Grid, KernelSpec, lift_matrix
from .model import ModelSpec

MAX_NODES = 4096
NOISE_BLOCK = 4096


class SimulationError(ValueError):
    """Invalid simulation request (grid, horizon, or block structure)."""


# ---------------------------------------------------------------------------
# Volterra matrix and path bundles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VolterraMatrix:
    """Lower-triangular kernel weights L[i][j] = integral{cell j} K(t_i, u) du / sqrt(delta)."""

    L: np.ndarray
    grid: Grid
    kernel: KernelSpec


def build_volterra_matrix(kernel: KernelSpec, grid: Grid) -> VolterraMatrix:
    """Discretize the kernel; exact cell integrals where closed forms exist."""
    if grid.N > MAX_NODES:
        raise SimulationError(
            f"grid has {grid.N} cells; the dense Volterra matrix is capped at {MAX_NODES}"
        )
    if grid.T > kernel.T * (1 + 1e-12):
        raise SimulationError(
            f"grid horizon {grid.T} exceeds kernel horizon {kernel.T}"
        )
    L = lift_matrix(kernel, grid) / math.sqrt(grid.delta)
    L.setflags(write=False)
    return VolterraMatrix(L=L, grid=grid, kernel=kernel)


@dataclass(frozen=True)
class PathBundle:
    """Sampled driving noise: per-path xi/eta draws and the nodal B, Bhat, W."""

    xi: np.ndarray
    eta: np.ndarray
    B: np.ndarray
    Bhat: np.ndarray
    W: np.ndarray
    grid: Grid
    seed: int | None

    @property
    def n_paths(self) -> int:
        return self.xi.shape[0]


def _block_normals(seed: int, block_index: int, N: int):
    """Draws (xi, eta) for one noise block; block streams never overlap."""
    bitgen = np.random.Philox(key=seed, counter=block_index << 128)
    z = np.random.Generator(bitgen).standard_normal((NOISE_BLOCK, 2, N))
    return z[:, 0, :], z[:, 1, :]


def iter_noise_blocks(seed: int, n_paths: int, N: int, eta_shift=None):
    """Yield (xi, eta) blocks covering n_paths; a fixed seed fixes every draw."""
    done = 0
    block = 0
    while done < n_paths:
        xi, eta = _block_normals(seed, block, N)
        take = min(NOISE_BLOCK, n_paths - done)
        xi, eta = xi[:take], eta[:take]
        if eta_shift is not None:
            eta = eta + eta_shift
        yield xi, eta
        done += take
        block += 1


def bundle_from_noise(vm: VolterraMatrix, xi, eta, seed=None) -> PathBundle:
    """Assemble nodal (B, Bhat, W) from raw draws."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    eta = np.atleast_2d(np.asarray(eta, dtype=float))
    N = vm.grid.N
    if xi.shape[1] != N or eta.shape != xi.shape:
        raise SimulationError(f"noise arrays must have shape (n_paths, {N})")
    sq = math.sqrt(vm.grid.delta)
    n = xi.shape[0]
    B = np.zeros((n, N + 1))
    W = np.zeros((n, N + 1))
    Bhat = np.zeros((n, N + 1))
    np.cumsum(xi, axis=1, out=B[:, 1:])
    B[:, 1:] *= sq
    np.cumsum(eta, axis=1, out=W[:, 1:])
    W[:, 1:] *= sq
    Bhat[:, 1:] = xi @ vm.L.T
    return PathBundle(xi=xi, eta=eta, B=B, Bhat=Bhat, W=W, grid=vm.grid, seed=seed)


_BUNDLE_CAP = 131072


def sample_bundle(vm: VolterraMatrix, n_paths: int, seed: int, eta_shift=None) -> PathBundle:
    """Sample a full in-memory bundle (capped; stream blocks for larger runs)."""
    if n_paths > _BUNDLE_CAP:
        raise SimulationError(
            f"{n_paths} paths exceed the in-memory bundle cap {_BUNDLE_CAP}; "
            "iterate noise blocks instead"
        )
    xis, etas = [], []
    for xi, eta in iter_noise_blocks(seed, n_paths, vm.grid.N, eta_shift):
        xis.append(xi)
        etas.append(eta)
    return bundle_from_noise(vm, np.vstack(xis), np.vstack(etas), seed=seed)


# ---------------------------------------------------------------------------
# Log-price simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimResult:
    """Nodal log-price paths: Z = X + V with X carrying drift/Ito/W-noise."""

    Z: np.ndarray
    X: np.ndarray
    V: np.ndarray
    epsilon: float
    model: ModelSpec
    grid: Grid


def _check_bundle(model: ModelSpec, bundle: PathBundle) -> None:
    if abs(bundle.grid.T - model.T) > 1e-12 * max(1.0, model.T):
        raise SimulationError(
            f"bundle horizon {bundle.grid.T} does not match model horizon {model.T}"
        )


def _euler(model: ModelSpec, bundle: PathBundle, epsilon: float, freeze_m=None):
    """Shared Euler core.  freeze_m holds the B-noise volatility at m-block
    breakpoints; drift, Ito correction, and W-noise always use the live value."""
    grid = bundle.grid
    delta = grid.delta
    A = epsilon * bundle.Bhat[:, :-1]
    sig = np.asarray(model.sigma(A), dtype=float)
    mu = np.asarray(model.mu(A), dtype=float)
    dW = np.diff(bundle.W, axis=1)
    dB = np.diff(bundle.B, axis=1)
    dX = (mu - 0.5 * epsilon * epsilon * sig * sig) * delta \
        + epsilon * model.rho_bar * sig * dW
    sig_B = sig if freeze_m is None else sig[:, frozen_sigma_nodes(grid.N, freeze_m)]
    dV = epsilon * model.rho * sig_B * dB
    n = dX.shape[0]
    X = np.empty((n, grid.N + 1))
    V = np.zeros((n, grid.N + 1))
    X[:, 0] = model.x0
    np.cumsum(dX, axis=1, out=X[:, 1:])
    X[:, 1:] += model.x0
    np.cumsum(dV, axis=1, out=V[:, 1:])
    return X, V


def simulate_log_price(model: ModelSpec, bundle: PathBundle, epsilon: float) -> SimResult:
    """Left-point Euler log-price paths at noise size epsilon."""
    _check_bundle(model, bundle)
    X, V = _euler(model, bundle, epsilon)
    return SimResult(Z=X + V, X=X, V=V, epsilon=epsilon, model=model, grid=bundle.grid)


def frozen_sigma_nodes(N: int, m: int) -> np.ndarray:
    """Node index at which the piecewise-frozen volatility is evaluated,
    for each Euler cell: the last breakpoint of the m-block partition."""
    if m < 1 or N % m != 0:
        raise SimulationError(f"block count m={m} must divide the grid size N={N}")
    b = N // m
    j = np.arange(N)
    return (j // b) * b


def simulate_approx_log_price(
    model: ModelSpec, bundle: PathBundle, epsilon: float, m: int
) -> SimResult:
    """Euler paths with the B-noise volatility frozen on an m-block partition.

    Only the rho-correlated noise term changes: within each block the
    volatility multiplying dB is held at its value at the block's left
    breakpoint.  m = N reproduces simulate_log_price exactly.
    """
    _check_bundle(model, bundle)
    X, V = _euler(model, bundle, epsilon, freeze_m=m)
    return SimResult(Z=X + V, X=X, V=V, epsilon=epsilon, model=model, grid=bundle.grid)


# ---------------------------------------------------------------------------
# Approximation-gap diagnostic
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TailEstimate:
    """Hit-frequency estimate with a Wilson 95% interval."""

    p_hat: float
    ci_lo: float
    ci_hi: float
    n_paths: int
    n_hits: int


def approx_gap_tail(
    model: ModelSpec,
    epsilon: float,
    m: int,
    delta: float,
    M: int,
    seed: int,
    N: int | None = None,
) -> TailEstimate:
    """Estimate P(sup_t |Z - Z_m| > delta) by shared-noise coupling.

    A fixed seed reuses the same noise blocks for every m, so gap estimates
    across m values are comparable path by path.
    """
    if delta <= 0:
        raise SimulationError("gap threshold delta must be positive")
    if M < 1000:
        raise SimulationError("gap tail estimation needs at least 1000 paths")
    grid = Grid(N=_default_gap_N(m) if N is None else N, T=model.T)
    vm = build_volterra_matrix(model.kernel, grid)
    frozen_sigma_nodes(grid.N, m)  # validate divisibility up front
    hits = 0
    for xi, eta in iter_noise_blocks(seed, M, grid.N):
        bundle = bundle_from_noise(vm, xi, eta, seed=seed)
        full = simulate_log_price(model, bundle, epsilon)
        part = simulate_approx_log_price(model, bundle, epsilon, m)
        gap = np.max(np.abs(full.Z - part.Z), axis=1)
        hits += int(np.count_nonzero(gap > delta))
    p, lo, hi = wilson_interval(hits, M)
    return TailEstimate(p_hat=p, ci_lo=lo, ci_hi=hi, n_paths=M, n_hits=hits)


def _default_gap_N(m: int) -> int:
    """Smallest grid of at least 256 cells that m divides."""
    N = max(1, math.ceil(256 / m)) * m
    if N > MAX_NODES:
        raise SimulationError(f"no grid of at most {MAX_NODES} cells fits m={m} blocks")
    return N
