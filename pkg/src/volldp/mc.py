"""Monte-Carlo estimation of small-noise event probabilities and LDP slopes.

Events are terminal tails {Z_T - x0 >= y} and barrier crossings
{max_t Z_t >= log U}.  Optional importance sampling shifts only the W noise:
the mean shift is the optimal W-control implied by a rate-functional argmin
(per cell: beta rho_bar sigma(fhat*), beta the Lagrange multiplier of the
terminal or crossing constraint), and every path carries the exact Girsanov
likelihood ratio exp(-c.z + |c|^2/2) of the shift c it was drawn under.
Shifting B as well would couple the shift through the Volterra matrix; the
W-only scheme keeps weights elementary at the cost of efficiency as
|rho| -> 1.

The LDP slope check regresses log p_hat on eps^(-2): the regression slope
should approach minus the variational rate.  Estimates with fewer than 10
hits are excluded from the regression (their log is too noisy to use).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._util import ols_line, wilson_interval
from .kernels import Grid, lift_matrix
from .model import Constant, ModelSpec, SpeedSchedule
from .rate import ControlFunction, RateConfig, RateResult, crossing_rate, terminal_rate
from .simulate import build_volterra_matrix, bundle_from_noise, iter_noise_blocks, simulate_log_price


class InsufficientHitsError(RuntimeError):
    """Too few regression points survive the hit-count filter."""

    def __init__(self, failed):
        self.failed = tuple(failed)
        eps = ", ".join(f"{e:g}" for e in self.failed)
        super().__init__(
            f"fewer than 10 hits at epsilon in [{eps}]; "
            "increase n_paths or enable importance sampling"
        )


@dataclass(frozen=True)
class MCEstimate:
    """Probability estimate with Wilson 95% interval and IS effective size."""

    p_hat: float
    ci_lo: float
    ci_hi: float
    n_paths: int
    n_hits: int
    ess: float
    epsilon: float


# ---------------------------------------------------------------------------
# Importance-sampling shift
# ---------------------------------------------------------------------------

def _shift_profile(
    model: ModelSpec, kind: str, target: float, epsilon: float, control: ControlFunction
) -> np.ndarray:
    """Per-cell W-drift ydot for the mean shift, derived from a rate argmin.

    Only W is shifted, so B-hat keeps sampling around zero and the W channel
    must carry the whole displacement to the event.  The profile follows
    sigma along the argmin's lifted path (and stops at the argmin's crossing
    node for barrier events); its multiplier is calibrated against the
    volatility the shifted paths actually see, sigma at lifted path zero,
    so the shifted mean lands on the event boundary.  The required tilt
    scales like 1/rho_bar, which is where IS efficiency dies as |rho| -> 1.
    """
    grid = control.grid
    fdot = control.fdot
    W = lift_matrix(model.kernel, grid)
    g = np.concatenate(([0.0], (W @ fdot)[: grid.N - 1]))
    sig = np.asarray(model.sigma(g), dtype=float)
    d = grid.delta
    rb = model.rho_bar
    sig0 = float(model.sigma(0.0))
    mu0 = float(model.mu(0.0))
    if kind == "terminal":
        i = grid.N - 1
        b = target
    elif kind == "crossing":
        b = math.log(target) - model.x0
        # LDP-optimal crossing node: argmin of the full variational node cost
        Psi = np.cumsum(sig * fdot) * d
        S = np.cumsum(sig * sig) * d
        q = b - model.rho * Psi
        i = int(np.argmin(0.5 * q * q / (rb * rb * S)))
    else:
        raise ValueError(f"unknown event kind '{kind}'")
    t_star = (i + 1) * d
    gap = b - mu0 * t_star + 0.5 * epsilon * epsilon * sig0 * sig0 * t_star
    # Variance-optimal damping for a W-only tilt: the rho B channel stays
    # unshifted, and centering the shifted mean on the boundary overtilts.
    # A Gaussian proxy (Mills-ratio stationarity of the second moment) puts
    # the optimum at fraction rho_bar^2/(1 + rho^2) of the gap; at rho = 0
    # this is the classical boundary-centering tilt.
    gap *= rb * rb / (1.0 + model.rho ** 2)
    beta = gap / (rb * rb * sig0 * d * float(np.sum(sig[: i + 1])))
    ydot = beta * rb * sig
    ydot[i + 1 :] = 0.0
    return ydot


# ---------------------------------------------------------------------------
# Core estimation loop
# ---------------------------------------------------------------------------

def _estimate_event(
    model: ModelSpec,
    epsilon: float,
    n_paths: int,
    seed: int,
    hit_level: float,
    terminal_only: bool,
    is_shift: ControlFunction | None,
    kind: str,
    target: float,
    N: int,
    threads: int = 1,
) -> MCEstimate:
    grid = Grid(N=N, T=model.T)
    vm = build_volterra_matrix(model.kernel, grid)
    c = None
    if is_shift is not None:
        if is_shift.grid != grid:
            raise ValueError(f"importance shift lives on N={is_shift.grid.N}, estimator uses N={N}")
        ydot = _shift_profile(model, kind, target, epsilon, is_shift)
        c = ydot * math.sqrt(grid.delta) / epsilon
        half_c2 = 0.5 * float(c @ c)

    def one_block(args):
        xi, eta = args
        bundle = bundle_from_noise(vm, xi, eta, seed=seed)
        Z = simulate_log_price(model, bundle, epsilon).Z
        stat = Z[:, -1] if terminal_only else np.max(Z, axis=1)
        hit = stat >= hit_level
        k = int(np.count_nonzero(hit))
        if c is None:
            return k, float(k), float(k)
        w = np.exp(-(eta @ c) + half_c2)[hit]
        return k, float(np.sum(w)), float(w @ w)

    blocks = iter_noise_blocks(seed, n_paths, N, eta_shift=c)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(one_block, blocks))
    else:
        partials = [one_block(b) for b in blocks]
    # ordered reduction in block index order, independent of scheduling
    n_hits = sum(p[0] for p in partials)
    S1 = math.fsum(p[1] for p in partials)
    S2 = math.fsum(p[2] for p in partials)

    p_hat = min(S1 / n_paths, 1.0)
    ess = (S1 * S1 / S2) if S2 > 0 else 0.0
    var_est = max(S2 / n_paths - p_hat * p_hat, 0.0) / n_paths
    if 0.0 < p_hat < 1.0 and var_est > 0.0:
        n_eff = min(p_hat * (1.0 - p_hat) / var_est, float(n_paths))
    else:
        n_eff = float(n_paths)
    _, lo, hi = wilson_interval(p_hat * n_paths, n_paths, n_eff=n_eff)
    return MCEstimate(
        p_hat=p_hat, ci_lo=lo, ci_hi=hi,
        n_paths=n_paths, n_hits=n_hits, ess=ess, epsilon=epsilon,
    )


def estimate_terminal_tail(
    model: ModelSpec,
    epsilon: float,
    y: float,
    n_paths: int,
    seed: int,
    is_shift: ControlFunction | None = None,
    N: int = 256,
    threads: int = 1,
) -> MCEstimate:
    """P(Z_T - x0 >= y) by plain or mean-shifted Monte Carlo."""
    return _estimate_event(
        model, epsilon, n_paths, seed,
        hit_level=model.x0 + y, terminal_only=True,
        is_shift=is_shift, kind="terminal", target=y, N=N, threads=threads,
    )


def estimate_crossing(
    model: ModelSpec,
    epsilon: float,
    U: float,
    n_paths: int,
    seed: int,
    is_shift: ControlFunction | None = None,
    N: int = 256,
    threads: int = 1,
) -> MCEstimate:
    """P(max over nodes of Z >= log U).  The start node counts, so a barrier
    at or below the initial price is hit with probability one."""
    if not (isinstance(model.mu, Constant) and model.mu.c == 0.0):
        warnings.warn(
            "crossing-event theory assumes a driftless model; estimates remain "
            "valid but rate comparisons do not",
            stacklevel=2,
        )
    return _estimate_event(
        model, epsilon, n_paths, seed,
        hit_level=math.log(U), terminal_only=False,
        is_shift=is_shift, kind="crossing", target=U, N=N, threads=threads,
    )


# ---------------------------------------------------------------------------
# LDP slope regression
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlopeReport:
    """Regression of log p_hat on eps^(-2) against the variational prediction."""

    epsilons: tuple
    inv_eps_sq: tuple
    p_hats: tuple
    log_p_hats: tuple
    ci_los: tuple
    ci_his: tuple
    n_hits: tuple
    used: tuple          # epsilons that survived the hit filter
    slope: float
    intercept: float
    predicted: float     # minus the variational rate
    rel_error: float
    rate_result: RateResult

    def rows(self):
        cols = zip(self.epsilons, self.inv_eps_sq, self.p_hats, self.log_p_hats,
                   self.ci_los, self.ci_his, self.n_hits)
        return list(cols)


MIN_HITS = 10


def ldp_slope(
    model: ModelSpec,
    schedule: SpeedSchedule,
    event: tuple,
    n_paths: int,
    seed: int,
    use_is: bool = True,
    cfg: RateConfig = RateConfig(),
    threads: int = 1,
) -> SlopeReport:
    """Estimate the event probability along the schedule and regress its log
    decay against the rate module's prediction.

    event is ("terminal", y) or ("crossing", U).  The rate problem is solved
    once; with use_is its argmin control doubles as the importance shift at
    every epsilon.
    """
    if len(schedule.epsilons) < 4:
        raise ValueError("slope regression needs at least 4 epsilons")
    kind, target = event
    if kind == "terminal":
        rate_res = terminal_rate(model, float(target), cfg)
        estimator = estimate_terminal_tail
    elif kind == "crossing":
        rate_res = crossing_rate(model, float(target), cfg)
        estimator = estimate_crossing
    else:
        raise ValueError(f"unknown event kind '{kind}'")
    shift = rate_res.argmin if use_is else None

    ests = [
        estimator(model, e, float(target), n_paths, seed,
                  is_shift=shift, N=cfg.N, threads=threads)
        for e in schedule.epsilons
    ]
    kept = [(e, est) for e, est in zip(schedule.epsilons, ests)
            if est.n_hits >= MIN_HITS and est.p_hat > 0.0]
    if len(kept) < 2:
        raise InsufficientHitsError(
            e for e, est in zip(schedule.epsilons, ests) if est.n_hits < MIN_HITS
        )
    xs = [1.0 / (e * e) for e, _ in kept]
    ys = [math.log(est.p_hat) for _, est in kept]
    slope, intercept = ols_line(xs, ys)
    predicted = -rate_res.value
    rel_error = abs(slope - predicted) / max(abs(predicted), 1e-12)
    return SlopeReport(
        epsilons=tuple(schedule.epsilons),
        inv_eps_sq=tuple(1.0 / (e * e) for e in schedule.epsilons),
        p_hats=tuple(est.p_hat for est in ests),
        log_p_hats=tuple(math.log(est.p_hat) if est.p_hat > 0 else -math.inf for est in ests),
        ci_los=tuple(est.ci_lo for est in ests),
        ci_his=tuple(est.ci_hi for est in ests),
        n_hits=tuple(est.n_hits for est in ests),
        used=tuple(e for e, _ in kept),
        slope=slope,
        intercept=intercept,
        predicted=predicted,
        rel_error=rel_error,
        rate_result=rate_res,
    )
