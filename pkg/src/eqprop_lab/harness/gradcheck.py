"""Compare each regime's gradient estimator with a brute-force oracle."""
from __future__ import annotations

import numpy as np

from .. import deterministic as det
from .. import quantum as qm
from .. import thermal as th
from ..errors import ValidationError
from ..report import GradientReport
from .config import RunConfig
from .training import setup

MAX_NODES = 8
MAX_QUBITS = 4
REL_FLOOR = 1e-8
THERMAL_SE_BAND = 4.0


def relative_errors(est: np.ndarray, oracle: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    """``|est - oracle| / |oracle|``; entries with ``|oracle| < floor`` use the absolute error over ``floor``."""
    est, oracle = np.asarray(est, float), np.asarray(oracle, float)
    return np.abs(est - oracle) / np.maximum(np.abs(oracle), floor)


def _summary(labels, est: GradientReport, oracle: GradientReport, errs: np.ndarray, tol: float, kind: str) -> dict:
    worst = int(np.argmax(errs)) if errs.size else 0
    return {
        "estimator": est.method,
        "oracle": oracle.method,
        "error_kind": kind,
        "max_error": float(errs.max(initial=0.0)),
        "mean_error": float(errs.mean()) if errs.size else 0.0,
        "worst_parameter": labels[worst] if labels else None,
        "tolerance": tol,
        "passed": bool(np.all(errs < tol)),
        "parameters": {lab: {"estimate": float(a), "oracle": float(b), "error": float(e)}
                       for lab, a, b, e in zip(labels, est.flat(), oracle.flat(), errs)},
    }


def fd_thermal_cost_gradient(net, ctx, T: float, step: float = 1e-4, n_points: int = 101) -> GradientReport:
    """Finite differences of the quadrature ``<C>_T`` in every parameter (``n_nodes <= 3``)."""
    bounds = th.default_bounds(net, ctx, T)

    def mean_cost(n):
        grid = th.BoltzmannGrid(n, ctx, T, bounds, n_points)
        return float(grid.expectation(lambda z: th.cost(z, ctx.d, n.output_nodes)))

    def central(make):
        return (mean_cost(make(step)) - mean_cost(make(-step))) / (2 * step)

    gw = np.zeros_like(net.weights)
    for i, j in net.pairs():
        w0 = net.weights[i, j]
        gw[i, j] = gw[j, i] = central(lambda h: net.with_weight(i, j, w0 + h))
    gl = np.zeros(net.n_nodes)
    for k in range(net.n_nodes):
        def shifted(h, k=k):
            lam = net.lam.copy()
            lam[k] += h
            return net.with_params(lam=lam)
        gl[k] = central(shifted)
    return GradientReport({"W": gw, "lambda": gl}, "finite-difference-quadrature", meta={"step": step})


def gradcheck(cfg: RunConfig) -> dict:
    regime, model, examples = setup(cfg)
    k = cfg.gradcheck_example
    if not 0 <= k < len(examples):
        raise ValidationError(f"gradcheck_example {k} out of range")
    ex = examples[k]
    seed = th.derive_seed(cfg.hyper.seed, 0, k)
    if cfg.regime == "quantum":
        if model.n_qubits > MAX_QUBITS:
            raise ValidationError(f"gradcheck is limited to {MAX_QUBITS} qubits")
        sys = regime.system(model, ex)
        est = qm.qep_gradient(sys, cfg.hyper.delta_beta, cfg.which)
        oracle = qm.fd_quantum_cost_gradient(sys, cfg.which)
        errs = relative_errors(est.flat(), oracle.flat())
        return _summary(est.labels(), est, oracle, errs, cfg.gradcheck_tol, "relative")
    if model.n_nodes > MAX_NODES:
        raise ValidationError(f"gradcheck is limited to {MAX_NODES} nodes")
    ctx = regime.clamp(ex)
    if cfg.regime == "deterministic":
        est = det.ep_gradient_symmetric(model, ctx, cfg.hyper.delta_beta, cfg.solver)
        oracle = det.fd_cost_gradient(model, ctx)
        errs = relative_errors(est.flat(), oracle.flat())
        return _summary(est.labels(), est, oracle, errs, cfg.gradcheck_tol, "relative")
    if model.n_nodes > th.BoltzmannGrid.max_nodes:
        raise ValidationError(f"thermal gradcheck uses quadrature and is limited to {th.BoltzmannGrid.max_nodes} nodes")
    est = regime.gradient(model, ex, seed)
    oracle = fd_thermal_cost_gradient(model, ctx, cfg.hyper.temperature)
    se = est.flat_stderr()
    errs = np.abs(est.flat() - oracle.flat()) / np.where(se > 0, se, np.inf)
    return _summary(est.labels(), est, oracle, errs, THERMAL_SE_BAND, "standard-errors")
