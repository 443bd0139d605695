"""Saddle-point expansion of the free energy and its derivatives to first order in T.

Everything is evaluated at a minimum ``z_bar`` of the energy from the
Hessian ``H``, its inverse and the sparse third/fourth derivative tensors.
The ``dF/dW`` correction is available in two algebraically independent
forms (explicit implicit-derivative form and the generic expectation
expansion of ``-rho_i rho_j``); tests assert they coincide.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .deterministic import SolverParams, relax
from .errors import NonConvergenceError, NotPositiveDefiniteError, NumericalError, ValidationError
from .network import (
    ClampContext,
    Network,
    SymTensor3,
    SymTensor4,
    activation_derivs,
    derivative_tensors,
    energy,
)

TIGHT = SolverParams(tol=1e-13)


@dataclass(frozen=True)
class ExpansionContext:
    net: Network
    clamp: ClampContext
    z_bar: np.ndarray
    hessian: np.ndarray
    hinv: np.ndarray
    v3: SymTensor3 | None
    v4: SymTensor4 | None
    T: float

    @property
    def dim(self) -> int:
        return self.z_bar.shape[0]

    def rho(self, order: int = 1) -> list[np.ndarray]:
        return activation_derivs(self.net.activation, self.z_bar, order)

    def at_temperature(self, T: float) -> "ExpansionContext":
        if T < 0:
            raise ValidationError("temperature must be non-negative")
        return ExpansionContext(self.net, self.clamp, self.z_bar, self.hessian, self.hinv, self.v3, self.v4, float(T))


def _inverse_pd(h: np.ndarray) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        ev = np.linalg.eigvalsh(h)
        raise NotPositiveDefiniteError(f"Hessian is not positive definite (min eigenvalue {ev[0]:.3g})") from None
    linv = np.linalg.inv(chol)
    hinv = linv.T @ linv
    err = np.max(np.abs(h @ hinv - np.eye(h.shape[0])))
    if err > 1e-10:
        raise NumericalError(f"Hessian too ill-conditioned to invert (|H H^-1 - I| = {err:.2e})")
    return hinv


def expansion_context(
    net: Network, clamp: ClampContext, T: float, z0=None, params: SolverParams = TIGHT
) -> ExpansionContext:
    """Relax to the minimum and precompute ``H``, ``H^-1``, ``V3`` and ``V4`` there."""
    if T < 0:
        raise ValidationError("temperature must be non-negative")
    z0 = np.zeros(net.n_nodes) if z0 is None else z0
    fp = relax(net, z0, clamp, params)
    if not fp.converged:
        raise NonConvergenceError(f"fixed point not found (residual {fp.residual:.3g})")
    order = 2 if net.activation == "hard-sigmoid" else 4
    tens = derivative_tensors(net, fp.z_bar, clamp, order=order)
    hinv = _inverse_pd(tens.hessian)
    return ExpansionContext(net, clamp, fp.z_bar, tens.hessian, hinv, tens.v3, tens.v4, float(T))


def _need_v3(ctx: ExpansionContext) -> SymTensor3:
    if ctx.v3 is None:
        raise ValidationError("this quantity needs third derivatives of the activation")
    return ctx.v3


def _need_v4(ctx: ExpansionContext) -> SymTensor4:
    if ctx.v4 is None:
        raise ValidationError("this quantity needs fourth derivatives of the activation")
    return ctx.v4


def _pair(ctx: ExpansionContext, i: int, j: int) -> tuple[int, int]:
    if i == j or not (0 <= i < ctx.dim and 0 <= j < ctx.dim):
        raise ValidationError(f"({i}, {j}) is not a valid node pair")
    return i, j


# ---------------------------------------------------------------------------
# free energy and fixed-point response


def free_energy_expansion(ctx: ExpansionContext) -> float:
    """``f(z_bar) - (T D / 2) log(2 pi T) + (T / 2) log det H``."""
    f0 = energy(ctx.net, ctx.z_bar, ctx.clamp)
    if ctx.T == 0:
        return f0
    logdet = float(np.sum(np.log(np.linalg.eigvalsh(ctx.hessian))))
    return f0 - 0.5 * ctx.T * ctx.dim * np.log(2 * np.pi * ctx.T) + 0.5 * ctx.T * logdet


def mixed_z_theta(ctx: ExpansionContext, theta) -> np.ndarray:
    """``d^2 f / dz dtheta`` at ``z_bar`` for ``("W", i, j)``, ``("lambda", k)`` or ``"beta"``."""
    n = ctx.dim
    out = np.zeros(n)
    if theta == "beta":
        outs = list(ctx.net.output_nodes)
        out[outs] = ctx.z_bar[outs] - ctx.clamp.d
        return out
    kind = theta[0]
    if kind == "W":
        i, j = _pair(ctx, theta[1], theta[2])
        rho, d1 = ctx.rho(1)
        out[i] -= d1[i] * rho[j]
        out[j] -= rho[i] * d1[j]
        return out
    if kind == "lambda":
        out[theta[1]] = ctx.z_bar[theta[1]]
        return out
    raise ValidationError(f"unknown parameter {theta!r}")


def dzbar_dtheta(ctx: ExpansionContext, theta) -> np.ndarray:
    """Implicit derivative ``-H^-1 d^2f/dz dtheta`` of the fixed point."""
    if theta != "beta" and theta[0] == "W":
        # two-column form: only columns i and j of H^-1 contribute
        i, j = _pair(ctx, theta[1], theta[2])
        rho, d1 = ctx.rho(1)
        return ctx.hinv[:, i] * d1[i] * rho[j] + ctx.hinv[:, j] * rho[i] * d1[j]
    return -ctx.hinv @ mixed_z_theta(ctx, theta)


# ---------------------------------------------------------------------------
# dF/dW


def dH_dW(ctx: ExpansionContext, i: int, j: int) -> np.ndarray:
    """Explicit (fixed-``z``) derivative of the Hessian in ``W_ij``."""
    i, j = _pair(ctx, i, j)
    rho, d1, d2 = ctx.rho(2)
    m = np.zeros((ctx.dim, ctx.dim))
    m[i, j] = m[j, i] = -d1[i] * d1[j]
    m[i, i] = -d2[i] * rho[j]
    m[j, j] = -rho[i] * d2[j]
    return m


def _v3_hinv(ctx: ExpansionContext) -> np.ndarray:
    """``y_c = sum_ab V3_abc Hinv_ab``."""
    return _need_v3(ctx).contract_mat(ctx.hinv)


def _bracket(ctx: ExpansionContext, i: int, j: int) -> float:
    dz = dzbar_dtheta(ctx, ("W", i, j))
    return float(np.sum(ctx.hinv * dH_dW(ctx, i, j)) + _v3_hinv(ctx) @ dz)


def dF_dW_correction(ctx: ExpansionContext, i: int, j: int) -> float:
    """Coefficient of ``T`` in ``dF/dW_ij``."""
    return 0.5 * _bracket(ctx, i, j)


def dF_dW_orderT(ctx: ExpansionContext, i: int, j: int) -> float:
    rho = ctx.rho(0)[0]
    lead = -rho[i] * rho[j]
    if ctx.T == 0:
        return float(lead)
    return float(lead + ctx.T * dF_dW_correction(ctx, i, j))


def dF_dW_lambda1(ctx: ExpansionContext, i: int, j: int) -> float:
    """Same coefficient obtained as the thermal correction to ``E[-rho_i rho_j]``."""
    obs = pair_product_observable(ctx.net, i, j)
    return expectation_correction(ctx, obs)


# ---------------------------------------------------------------------------
# d^2F / dW dbeta


def d2F_dWdbeta_leading(ctx: ExpansionContext, i: int, j: int) -> float:
    """Zero-temperature cost gradient in closed form."""
    i, j = _pair(ctx, i, j)
    rho, d1 = ctx.rho(1)
    outs = list(ctx.net.output_nodes)
    s = ctx.hinv[:, outs] @ (ctx.z_bar[outs] - ctx.clamp.d)
    return float(d1[i] * rho[j] * s[i] + rho[i] * d1[j] * s[j])


def dH_dbeta_explicit(ctx: ExpansionContext) -> np.ndarray:
    m = np.zeros(ctx.dim)
    m[list(ctx.net.output_nodes)] = 1.0
    return np.diag(m)


def dH_dbeta_total(ctx: ExpansionContext) -> np.ndarray:
    dzb = dzbar_dtheta(ctx, "beta")
    return dH_dbeta_explicit(ctx) + _need_v3(ctx).contract_vec(dzb)


def dhinv_dbeta(ctx: ExpansionContext) -> np.ndarray:
    return -ctx.hinv @ dH_dbeta_total(ctx) @ ctx.hinv


def dV3_dW(ctx: ExpansionContext, i: int, j: int) -> SymTensor3:
    """Explicit derivative of ``V3`` in ``W_ij``."""
    i, j = _pair(ctx, i, j)
    rho, d1, d2, d3 = ctx.rho(3)
    diag = np.zeros(ctx.dim)
    pair = np.zeros((ctx.dim, ctx.dim))
    diag[i] = -d3[i] * rho[j]
    diag[j] = -rho[i] * d3[j]
    pair[i, j] = -d2[i] * d1[j]
    pair[j, i] = -d2[j] * d1[i]
    return SymTensor3(diag, pair)


def d_dHdW_dbeta(ctx: ExpansionContext, i: int, j: int) -> np.ndarray:
    """Total ``beta`` derivative of ``dH/dW_ij`` (through ``z_bar`` only)."""
    return dV3_dW(ctx, i, j).contract_vec(dzbar_dtheta(ctx, "beta"))


def dV3_dbeta(ctx: ExpansionContext) -> SymTensor3:
    return _need_v4(ctx).contract_vec(dzbar_dtheta(ctx, "beta"))


def d2zbar_dWdbeta(ctx: ExpansionContext, i: int, j: int) -> np.ndarray:
    """Mixed second derivative of the fixed point, from differentiating ``H dz/dW = -b_W``."""
    v3 = _need_v3(ctx)
    dzw = dzbar_dtheta(ctx, ("W", i, j))
    dzb = dzbar_dtheta(ctx, "beta")
    rhs = dH_dW(ctx, i, j) @ dzb + dH_dbeta_explicit(ctx) @ dzw + v3.contract_vec(dzb) @ dzw
    return -ctx.hinv @ rhs


def d2F_dWdbeta_correction(ctx: ExpansionContext, i: int, j: int) -> float:
    """Coefficient of ``T`` in ``d^2F / dW_ij dbeta``."""
    v3 = _need_v3(ctx)
    dzw = dzbar_dtheta(ctx, ("W", i, j))
    g = dH_dW(ctx, i, j) + v3.contract_vec(dzw)
    dg = (
        d_dHdW_dbeta(ctx, i, j)
        + dV3_dbeta(ctx).contract_vec(dzw)
        + v3.contract_vec(d2zbar_dWdbeta(ctx, i, j))
    )
    return 0.5 * float(np.sum(dhinv_dbeta(ctx) * g) + np.sum(ctx.hinv * dg))


def d2F_dWdbeta_orderT(ctx: ExpansionContext, i: int, j: int) -> float:
    lead = d2F_dWdbeta_leading(ctx, i, j)
    if ctx.T == 0:
        return lead
    return lead + ctx.T * d2F_dWdbeta_correction(ctx, i, j)


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Observable:
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]


def constant_observable(c: float, n: int) -> Observable:
    return Observable(lambda z: c, lambda z: np.zeros(n), lambda z: np.zeros((n, n)))


def node_observable(a: int, n: int) -> Observable:
    e = np.zeros(n)
    e[a] = 1.0
    return Observable(lambda z: float(z[a]), lambda z: e.copy(), lambda z: np.zeros((n, n)))


def pair_product_observable(net: Network, i: int, j: int) -> Observable:
    """``-rho(z_i) rho(z_j)``, the energy's derivative in ``W_ij``."""
    n = net.n_nodes

    def parts(z):
        return activation_derivs(net.activation, np.asarray(z, float), 2)

    def value(z):
        rho = parts(z)[0]
        return float(-rho[i] * rho[j])

    def grad(z):
        rho, d1, _ = parts(z)
        g = np.zeros(n)
        g[i] -= d1[i] * rho[j]
        g[j] -= rho[i] * d1[j]
        return g

    def hess(z):
        rho, d1, d2 = parts(z)
        h = np.zeros((n, n))
        h[i, i] = -d2[i] * rho[j]
        h[j, j] = -rho[i] * d2[j]
        h[i, j] = h[j, i] = -d1[i] * d1[j]
        return h

    return Observable(value, grad, hess)


def expectation_correction(ctx: ExpansionContext, obs: Observable) -> float:
    """Coefficient of ``T`` in the thermal expectation of ``obs``."""
    z = ctx.z_bar
    second = float(np.sum(obs.hess(z) * ctx.hinv))
    g = np.asarray(obs.grad(z), float)
    if not np.any(g):
        return 0.5 * second
    # contract the H^-1 pair first, then the remaining index
    third = float(_v3_hinv(ctx) @ (ctx.hinv @ g)) if ctx.v3 is not None else 0.0
    return 0.5 * (second - third)


def expectation_expansion(ctx: ExpansionContext, obs: Observable) -> float:
    val = float(obs.value(ctx.z_bar))
    if ctx.T == 0:
        return val
    return val + ctx.T * expectation_correction(ctx, obs)


def mean_z_correction(ctx: ExpansionContext) -> np.ndarray:
    """``E[z] = z_bar - (T/2) H^-1 y`` with ``y_c = sum_ab V3_abc H^-1_ab``."""
    if ctx.v3 is None or ctx.T == 0:
        return ctx.z_bar.copy()
    return ctx.z_bar - 0.5 * ctx.T * (ctx.hinv @ _v3_hinv(ctx))
