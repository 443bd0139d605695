"""Report comparing the low-temperature expansion with numerical oracles."""
from __future__ import annotations

import numpy as np

from .. import lowtemp as lt
from ..errors import ValidationError
from ..network import ClampContext, Network
from ..thermal import BoltzmannGrid, default_bounds

FD_STEP = 1e-5


def loglog_slope(ts, errs) -> float:
    """Least-squares slope of ``log err`` against ``log T``."""
    ts, errs = np.asarray(ts, float), np.asarray(errs, float)
    if len(ts) < 2 or np.any(errs <= 0):
        return float("nan")
    return float(np.polyfit(np.log(ts), np.log(errs), 1)[0])


def appendix_fd_errors(net: Network, clamp: ClampContext, h: float = FD_STEP) -> dict:
    """Max error of each beta-derivative formula against a central difference over ``beta``."""
    ctx = lt.expansion_context(net, clamp, 0.0)
    plus = lt.expansion_context(net, clamp.with_beta(clamp.beta + h), 0.0, ctx.z_bar)
    minus = lt.expansion_context(net, clamp.with_beta(clamp.beta - h), 0.0, ctx.z_bar)

    def fd(fn):
        return (np.asarray(fn(plus)) - np.asarray(fn(minus))) / (2 * h)

    errs = {"dhinv_dbeta": float(np.max(np.abs(fd(lambda c: c.hinv) - lt.dhinv_dbeta(ctx)))),
            "dV3_dbeta": float(np.max(np.abs(fd(lambda c: c.v3.dense()) - lt.dV3_dbeta(ctx).dense())))}
    dd, d2z = 0.0, 0.0
    for i, j in net.pairs():
        dd = max(dd, float(np.max(np.abs(fd(lambda c: lt.dH_dW(c, i, j)) - lt.d_dHdW_dbeta(ctx, i, j)))))
        d2z = max(d2z, float(np.max(np.abs(
            fd(lambda c: lt.dzbar_dtheta(c, ("W", i, j))) - lt.d2zbar_dWdbeta(ctx, i, j)))))
    errs["d_dHdW_dbeta"] = dd
    errs["d2zbar_dWdbeta"] = d2z
    return errs


def lambda1_residual(net: Network, clamp: ClampContext) -> float:
    ctx = lt.expansion_context(net, clamp, 0.0)
    return max((abs(lt.dF_dW_lambda1(ctx, i, j) - lt.dF_dW_correction(ctx, i, j)) for i, j in net.pairs()),
               default=0.0)


def quadrature_dF_dW(net, clamp, T, i, j, bounds, n_points, h=1e-4) -> float:
    w0 = net.weights[i, j]
    fp = BoltzmannGrid(net.with_weight(i, j, w0 + h), clamp, T, bounds, n_points).free_energy
    fm = BoltzmannGrid(net.with_weight(i, j, w0 - h), clamp, T, bounds, n_points).free_energy
    return (fp - fm) / (2 * h)


def expansion_report(net: Network, clamp: ClampContext, temperatures, n_points: int = 201) -> dict:
    """Errors of every expansion output at each temperature, their log-log slopes and consistency residuals.

    Quadrature comparisons need ``n_nodes <= 3``; larger nets report only
    the consistency and finite-difference checks.
    """
    temperatures = sorted((float(t) for t in temperatures), reverse=True)
    if any(t <= 0 for t in temperatures):
        raise ValidationError("temperatures must be positive")
    report: dict = {
        "lambda1_residual": lambda1_residual(net, clamp),
        "appendix_fd_max_error": appendix_fd_errors(net, clamp),
    }
    if net.n_nodes > BoltzmannGrid.max_nodes:
        return report
    rows = []
    pairs = net.pairs()
    for T in temperatures:
        ctx = lt.expansion_context(net, clamp, T)
        bounds = default_bounds(net, clamp, T)
        grid = BoltzmannGrid(net, clamp, T, bounds, n_points)
        row = {
            "T": T,
            "free_energy": abs(lt.free_energy_expansion(ctx) - grid.free_energy),
            "mean_z": float(np.max(np.abs(lt.mean_z_correction(ctx) - grid.expectation(lambda z: z)))),
        }
        if pairs:
            row["dF_dW"] = max(abs(lt.dF_dW_orderT(ctx, i, j) - quadrature_dF_dW(net, clamp, T, i, j, bounds, n_points))
                               for i, j in pairs)
        rows.append(row)
    report["by_temperature"] = rows
    report["slopes"] = {key: loglog_slope([r["T"] for r in rows], [r[key] for r in rows])
                        for key in rows[0] if key != "T"}
    return report
