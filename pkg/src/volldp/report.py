"""Artifact writers: delimited tables, JSON summaries, and figures.

CSV and JSON files are the authoritative outputs and are byte-reproducible
for a fixed config and seed: floats are written in shortest round-trip form,
JSON keys are sorted, and nothing time-dependent enters file content (run
timestamps appear only in file names).  Figures are rendered next to the
tables as a convenience view of the same numbers.
"""

from __future__ import annotations

import json
import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .mc import SlopeReport

SLOPE_HEADER = "epsilon,inv_eps_sq,p_hat,log_p_hat,ci_lo,ci_hi,n_hits"
PATH_HEADER = "t,B,Bhat,W,Z,X,V"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header: str, rows) -> None:
    lines = [header]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def write_json(path, obj: dict) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Slope report
# ---------------------------------------------------------------------------

def slope_rows(report: SlopeReport):
    return report.rows()


def slope_summary(report: SlopeReport) -> dict:
    return {
        "slope": report.slope,
        "intercept": report.intercept,
        "predicted_minus_I": report.predicted,
        "rate": -report.predicted,
        "rel_error": report.rel_error,
        "epsilons": list(report.epsilons),
        "epsilons_used": list(report.used),
        "rate_converged": report.rate_result.converged,
        "rate_t_star": report.rate_result.t_star,
    }


def save_slope_figure(report: SlopeReport, path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    x = np.asarray(report.inv_eps_sq)
    logp = np.asarray(report.log_p_hats)
    lo = np.array([math.log(v) if v > 0 else np.nan for v in report.ci_los])
    hi = np.array([math.log(v) if v > 0 else np.nan for v in report.ci_his])
    yerr = np.vstack([np.nan_to_num(logp - lo, nan=0.0), np.nan_to_num(hi - logp, nan=0.0)])
    ax.errorbar(x, logp, yerr=yerr, fmt="o", capsize=3, label="estimates")
    xx = np.linspace(0.0, float(x.max()) * 1.05, 50)
    ax.plot(xx, report.intercept + report.slope * xx, "-",
            label=f"fit slope {report.slope:.4f}")
    ax.plot(xx, report.intercept + report.predicted * xx, "--",
            label=f"rate prediction {report.predicted:.4f}")
    ax.set_xlabel(r"$\varepsilon^{-2}$")
    ax.set_ylabel(r"$\log \hat p$")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Simulated paths
# ---------------------------------------------------------------------------

def path_rows(grid, B, Bhat, W, Z, X, V, k: int):
    """Rows of one replication's nodal series."""
    return [
        (t, B[k, i], Bhat[k, i], W[k, i], Z[k, i], X[k, i], V[k, i])
        for i, t in enumerate(grid.nodes)
    ]


def save_paths_figure(grid, Z, path, max_paths: int = 32) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    k = min(max_paths, Z.shape[0])
    ax.plot(grid.nodes, Z[:k].T, lw=0.7, alpha=0.7)
    ax.set_xlabel("t")
    ax.set_ylabel("log price")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Rate argmin
# ---------------------------------------------------------------------------

def save_control_figure(grid, fdot, path, t_star=None) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    f = np.concatenate(([0.0], np.cumsum(fdot) * grid.delta))
    ax.step(grid.nodes[1:], fdot, where="pre", label="control derivative")
    ax.plot(grid.nodes, f, label="control path")
    if t_star is not None:
        ax.axvline(t_star, color="k", ls=":", lw=1, label=f"crossing time {t_star:.3f}")
    ax.set_xlabel("t")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_modulus_figure(deltas, values, alpha_hat, path) -> None:
    """Log-log plot of the squared-increment modulus with its fitted slope."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    d = np.asarray(deltas)
    v = np.asarray(values)
    ax.loglog(d, v, "o-", label="modulus estimate")
    ref = v[0] * (d / d[0]) ** alpha_hat
    ax.loglog(d, ref, "--", label=f"fitted exponent {alpha_hat:.3f}")
    ax.set_xlabel("increment delta")
    ax.set_ylabel("sup squared increment energy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_gap_figure(ms, estimates, path) -> None:
    """Tail probabilities of the volatility-freezing gap per block count m."""
    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    p = [e.p_hat for e in estimates]
    lo = [e.p_hat - e.ci_lo for e in estimates]
    hi = [e.ci_hi - e.p_hat for e in estimates]
    ax.errorbar(ms, p, yerr=[lo, hi], fmt="o-", capsize=3)
    ax.set_xscale("log", base=2)
    if min(p) > 0:
        ax.set_yscale("log")
    ax.set_xlabel("freeze blocks m")
    ax.set_ylabel("gap tail probability")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
