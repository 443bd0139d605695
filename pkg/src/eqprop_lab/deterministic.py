"""Zero-temperature equilibrium propagation.

The network is relaxed to a minimum of its energy by explicit gradient
descent; cost gradients are read off from how the parameter-conjugate
observables respond when the output is nudged by ``+-delta_beta``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DivergenceError, NonConvergenceError, ValidationError
from .network import (
    ClampContext,
    Network,
    activation_derivs,
    cost,
    energy,
    theta_observables,
)
from .report import GradientReport

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverParams:
    step_size: float = 0.25
    tol: float = 1e-10
    max_iters: int = 200_000

    def __post_init__(self):
        if self.step_size <= 0 or self.tol <= 0 or self.max_iters <= 0:
            raise ValidationError("step_size, tol and max_iters must be positive")


@dataclass
class FixedPoint:
    z_bar: np.ndarray
    residual: float
    iters: int
    converged: bool


def _clamp_vectors(net: Network, ctx: ClampContext):
    if ctx.u.shape[0] != len(net.input_nodes) or ctx.d.shape[0] != len(net.output_nodes):
        raise DimensionError("clamp targets do not match the network's input/output sets")
    kappa = np.zeros(net.n_nodes)
    target = np.zeros(net.n_nodes)
    ins, outs = list(net.input_nodes), list(net.output_nodes)
    kappa[ins] = ctx.alpha
    target[ins] = ctx.u
    kappa[outs] = ctx.beta
    target[outs] = ctx.d
    return kappa, target


def relax(net: Network, z0, ctx: ClampContext, params: SolverParams = SolverParams()) -> FixedPoint:
    """Gradient-descent relaxation ``z <- z - step_size * grad_z(z)``.

    Stops when the max-norm of the gradient drops to ``params.tol``. Running
    out of iterations is reported through ``converged=False``.
    """
    z = np.array(z0, dtype=float)
    if z.shape != (net.n_nodes,):
        raise DimensionError(f"z0 must have shape ({net.n_nodes},)")
    kappa, target = _clamp_vectors(net, ctx)
    w, lam, act = net.weights, net.lam, net.activation
    eta = params.step_size
    with np.errstate(over="ignore", invalid="ignore"):
        return _descend(z, kappa, target, w, lam, act, eta, params)


def _descend(z, kappa, target, w, lam, act, eta, params):
    residual = np.inf
    for it in range(params.max_iters + 1):
        rho, drho = activation_derivs(act, z, 1)
        g = lam * z - drho * (w @ rho) + kappa * (z - target)
        residual = float(np.abs(g).max())
        if not np.isfinite(residual):
            raise DivergenceError(
                f"relaxation produced non-finite values at iteration {it}; "
                "reduce step_size",
                step=it,
            )
        if residual <= params.tol:
            return FixedPoint(z, residual, it, True)
        if it == params.max_iters:
            break
        z = z - eta * g
    return FixedPoint(z, residual, params.max_iters, False)


def relax_multistart(
    net: Network,
    ctx: ClampContext,
    params: SolverParams = SolverParams(),
    n_starts: int = 4,
    seed: int = 0,
    scale: float = 1.0,
) -> FixedPoint:
    """Relax from zero plus ``n_starts - 1`` random states; keep the lowest energy.

    Logs a warning when converged starts disagree beyond ``100 * tol``,
    i.e. when the energy has more than one minimum reachable from them.
    """
    rng = np.random.default_rng(seed)
    starts = [np.zeros(net.n_nodes)]
    starts += [rng.uniform(-scale, scale, net.n_nodes) for _ in range(n_starts - 1)]
    results = [relax(net, s, ctx, params) for s in starts]
    conv = [r for r in results if r.converged] or results
    best = min(conv, key=lambda r: energy(net, r.z_bar, ctx))
    spread = max(float(np.max(np.abs(r.z_bar - best.z_bar))) for r in conv)
    if spread > 100 * params.tol:
        log.warning("restarts reached distinct fixed points (max spread %.3g)", spread)
    return best


def _require(fp: FixedPoint, what: str) -> np.ndarray:
    if not fp.converged:
        raise NonConvergenceError(
            f"{what} relaxation did not converge (residual {fp.residual:.3g} after {fp.iters} iterations)"
        )
    return fp.z_bar


def free_energy_T0(net: Network, ctx: ClampContext, params: SolverParams = SolverParams(), z0=None) -> float:
    z0 = np.zeros(net.n_nodes) if z0 is None else z0
    z = _require(relax(net, z0, ctx, params), "fixed-point")
    return energy(net, z, ctx)


def cost_T0(net: Network, ctx: ClampContext, params: SolverParams = SolverParams(), z0=None) -> float:
    z0 = np.zeros(net.n_nodes) if z0 is None else z0
    z = _require(relax(net, z0, ctx, params), "fixed-point")
    return cost(z, ctx.d, net.output_nodes)


def _nudged(net, ctx0, beta, z_start, params, sign):
    fp = relax(net, z_start, ctx0.with_beta(beta), params)
    if not fp.converged:
        raise NonConvergenceError(
            f"{sign} nudged relaxation (beta={beta:+g}) did not converge: "
            f"residual {fp.residual:.3g} after {fp.iters} iterations"
        )
    return fp


def _phases(net, ctx0, delta_beta, params, z0):
    if delta_beta <= 0:
        raise ValidationError("delta_beta must be positive")
    if ctx0.beta != 0.0:
        raise ValidationError("the free-phase context must have beta == 0")
    z0 = np.zeros(net.n_nodes) if z0 is None else np.asarray(z0, float)
    free = relax(net, z0, ctx0, params)
    if not free.converged:
        raise NonConvergenceError(f"free-phase relaxation did not converge (residual {free.residual:.3g})")
    return free


def ep_gradient_symmetric(
    net: Network,
    ctx0: ClampContext,
    delta_beta: float = 1e-3,
    params: SolverParams = SolverParams(),
    z0=None,
) -> GradientReport:
    """Symmetric-nudging estimate of ``dC/dtheta`` at ``beta = 0``.

    Both nudged phases are warm-started from the free-phase fixed point.
    """
    free = _phases(net, ctx0, delta_beta, params, z0)
    plus = _nudged(net, ctx0, +delta_beta, free.z_bar, params, "positive")
    minus = _nudged(net, ctx0, -delta_beta, free.z_bar, params, "negative")
    gp = theta_observables(net, plus.z_bar)
    gm = theta_observables(net, minus.z_bar)
    grads = {k: (gp[k] - gm[k]) / (2.0 * delta_beta) for k in gp}
    return GradientReport(
        grads=grads,
        method="ep-symmetric",
        delta_beta=delta_beta,
        meta={
            "z_free": free.z_bar.tolist(),
            "free_cost": cost(free.z_bar, ctx0.d, net.output_nodes),
            "iters": [free.iters, plus.iters, minus.iters],
        },
    )


def ep_gradient_onesided(
    net: Network,
    ctx0: ClampContext,
    delta_beta: float = 1e-3,
    params: SolverParams = SolverParams(),
    z0=None,
) -> GradientReport:
    free = _phases(net, ctx0, delta_beta, params, z0)
    plus = _nudged(net, ctx0, +delta_beta, free.z_bar, params, "positive")
    gp = theta_observables(net, plus.z_bar)
    g0 = theta_observables(net, free.z_bar)
    grads = {k: (gp[k] - g0[k]) / delta_beta for k in gp}
    return GradientReport(
        grads=grads,
        method="ep-onesided",
        delta_beta=delta_beta,
        meta={"z_free": free.z_bar.tolist(), "free_cost": cost(free.z_bar, ctx0.d, net.output_nodes)},
    )


def update_params(net: Network, grads: GradientReport, tau: float) -> Network:
    """Gradient step ``theta <- theta - tau * grad`` on every family in ``grads``.

    Each unordered pair is updated once from the upper triangle and mirrored,
    so ``W`` stays exactly symmetric with a zero diagonal.
    """
    if tau < 0:
        raise ValidationError("learning rate must be non-negative")
    weights, lam = None, None
    if "W" in grads.grads:
        g = np.asarray(grads.grads["W"], float)
        if g.shape != net.weights.shape:
            raise DimensionError("W gradient has the wrong shape")
        step = tau * np.triu(np.where(net.mask, g, 0.0), 1)
        weights = net.weights - step - step.T
    if "lambda" in grads.grads:
        g = np.asarray(grads.grads["lambda"], float)
        if g.shape != net.lam.shape:
            raise DimensionError("lambda gradient has the wrong shape")
        lam = net.lam - tau * g
    return net.with_params(weights=weights, lam=lam)


def fd_cost_gradient(
    net: Network,
    ctx0: ClampContext,
    params: SolverParams = SolverParams(tol=1e-13),
    step: float = 1e-4,
    z0=None,
) -> GradientReport:
    """Brute-force ``dC/dtheta``: re-relax with each parameter shifted.

    Central differences at ``step`` and ``step/2`` combined by Richardson
    extrapolation. Every relaxation is warm-started from the unperturbed
    fixed point so all evaluations follow the same minimum.
    """
    z0 = np.zeros(net.n_nodes) if z0 is None else z0
    base = _require(relax(net, z0, ctx0, params), "reference")

    def c_of(n):
        fp = relax(n, base, ctx0, params)
        return cost(_require(fp, "perturbed"), ctx0.d, n.output_nodes)

    def central(make, h):
        return (c_of(make(h)) - c_of(make(-h))) / (2 * h)

    def richardson(make):
        d1, d2 = central(make, step), central(make, step / 2)
        return (4 * d2 - d1) / 3

    gw = np.zeros_like(net.weights)
    for i, j in net.pairs():
        w0 = net.weights[i, j]
        gw[i, j] = gw[j, i] = richardson(lambda h: net.with_weight(i, j, w0 + h))
    gl = np.zeros(net.n_nodes)
    for k in range(net.n_nodes):
        def shifted(h, k=k):
            lam = net.lam.copy()
            lam[k] += h
            return net.with_params(lam=lam)
        gl[k] = richardson(shifted)
    return GradientReport(grads={"W": gw, "lambda": gl}, method="finite-difference",
                          meta={"step": step})
