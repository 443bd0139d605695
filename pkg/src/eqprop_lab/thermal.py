"""Finite-temperature equilibrium propagation.

Samples the Boltzmann density ``exp(-f/T)`` with overdamped Langevin
dynamics (Euler-Maruyama, no Metropolis correction) and estimates the cost
gradient ``d<C>_T/dtheta`` three ways:

* clamped: symmetric difference of ``E_beta[df/dtheta]`` over ``beta = +-db``;
* covariance: ``-(1/T) Cov[df/dtheta, c]`` from a single unclamped chain;
* reweighted: the clamped expectations recovered from the unclamped chain
  through importance weights ``exp(-+beta c / T)``.

Chains are vectorised: ``n_chains`` walkers advance together. The noise for
one step is a ``(n_chains, n_nodes)`` block drawn from a single PCG64 stream
seeded with ``SamplerParams.seed``; row ``k`` drives chain ``k``. Independent
runs derive their seeds from a master seed with :func:`derive_seed`.

Standard errors come from batch means: each chain is cut into time blocks,
every (block, chain) cell is a batch, and adjacent blocks are merged
pairwise while at least ``MIN_BATCHES`` batches remain, keeping the largest
estimate over the levels.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DimensionError,
    DivergenceError,
    ReweightingDegeneracyError,
    ValidationError,
)
from .network import ClampContext, Network, activation_derivs, cost, energy, hessian
from .report import GradientReport

MIN_BATCHES = 32


@dataclass(frozen=True)
class SamplerParams:
    dt: float = 1e-2
    temperature: float = 0.1
    burn_in: int = 1000
    n_samples: int = 100_000
    thin: int = 10
    seed: int = 0
    n_chains: int = 100

    def __post_init__(self):
        if self.dt <= 0 or self.temperature <= 0:
            raise ValidationError("dt and temperature must be positive")
        if self.thin < 1 or self.burn_in < 0 or self.n_chains < 1:
            raise ValidationError("thin >= 1, burn_in >= 0 and n_chains >= 1 required")
        if self.n_samples < self.n_chains or self.n_samples % self.n_chains:
            raise ValidationError("n_samples must be a positive multiple of n_chains")

    @property
    def per_chain(self) -> int:
        return self.n_samples // self.n_chains


def derive_seed(master: int, *counters: int) -> int:
    """Child seed for run ``counters`` (e.g. epoch, example) of a master seed."""
    ss = np.random.SeedSequence([int(master) & (2**64 - 1), *[int(c) for c in counters]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class SampleSet:
    """Retained states, shape ``(per_chain, n_chains, n_nodes)`` in time order."""

    samples: np.ndarray
    params: SamplerParams
    ctx: ClampContext
    weights: np.ndarray | None = None

    def __len__(self) -> int:
        return self.samples.shape[0] * self.samples.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.samples.shape[-1])


# ---------------------------------------------------------------------------
# sampling


def langevin_chain(net: Network, ctx: ClampContext, params: SamplerParams, z0=None) -> SampleSet:
    """Euler-Maruyama ``z <- z - grad_z(z) dt + sqrt(2 T dt) xi``.

    All chains start from ``z0`` (default: the origin). After ``burn_in``
    steps, every ``thin``-th state is kept until ``n_samples`` states (over
    all chains) are collected. Identical inputs give bitwise-identical output.
    """
    n = net.n_nodes
    z0 = np.zeros(n) if z0 is None else np.asarray(z0, float)
    if z0.shape != (n,):
        raise DimensionError(f"z0 must have shape ({n},)")
    if ctx.u.shape[0] != len(net.input_nodes) or ctx.d.shape[0] != len(net.output_nodes):
        raise DimensionError("clamp targets do not match the network's input/output sets")
    kappa = np.zeros(n)
    target = np.zeros(n)
    kappa[list(net.input_nodes)] = ctx.alpha
    target[list(net.input_nodes)] = ctx.u
    kappa[list(net.output_nodes)] = ctx.beta
    target[list(net.output_nodes)] = ctx.d
    w, lam, act = net.weights, net.lam, net.activation
    dt = params.dt
    noise = np.sqrt(2.0 * params.temperature * dt)
    rng = np.random.Generator(np.random.PCG64(params.seed))

    m = params.n_chains
    z = np.tile(z0, (m, 1))
    out = np.empty((params.per_chain, m, n))
    total = params.burn_in + params.per_chain * params.thin
    kept = 0
    # overflow is detected below and reported as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, total + 1):
            rho, drho = activation_derivs(act, z, 1)
            g = lam * z - drho * (rho @ w) + kappa * (z - target)
            z = z - dt * g + noise * rng.standard_normal((m, n))
            if step > params.burn_in and (step - params.burn_in) % params.thin == 0:
                if not np.all(np.isfinite(z)):
                    raise DivergenceError(
                        f"Langevin chain diverged by step {step}; try a smaller dt", step=step
                    )
                out[kept] = z
                kept += 1
    if not np.all(np.isfinite(z)):
        raise DivergenceError(f"Langevin chain diverged by step {total}; try a smaller dt", step=total)
    return SampleSet(out, params, ctx)


# ---------------------------------------------------------------------------
# statistics


class BlockStats:
    """Means of a vector observable over time blocks of every chain.

    ``means`` has shape ``(n_blocks, n_chains, P)``; ``lengths`` gives the
    number of steps in each block. Linear combinations of block means are
    again block means, which is how the estimators build their series.
    """

    def __init__(self, means: np.ndarray, lengths: np.ndarray):
        self.means = means
        self.lengths = np.asarray(lengths, float)

    def mean(self) -> np.ndarray:
        w = self.lengths / self.lengths.sum()
        return np.tensordot(w, self.means, axes=(0, 0)).mean(axis=0)

    def stderr(self) -> np.ndarray:
        return block_se(self.means, self.lengths)


def block_se(means: np.ndarray, lengths) -> np.ndarray:
    """Batch-means standard error with batch-size doubling.

    Batches are (time block, chain) cells. Adjacent time blocks merge
    pairwise at each level; levels with at least ``MIN_BATCHES`` batches
    contribute and the largest standard error is returned.
    """
    means = np.asarray(means, float)
    lengths = np.asarray(lengths, float)
    best = np.zeros(means.shape[2:])
    while True:
        k, m = means.shape[:2]
        nb = k * m
        if nb >= min(MIN_BATCHES, max(nb, 2)) and nb >= 2:
            flat = means.reshape(nb, *means.shape[2:])
            best = np.maximum(best, flat.std(axis=0, ddof=1) / np.sqrt(nb))
        if k < 2:
            break
        k2 = k // 2
        la, lb = lengths[0 : 2 * k2 : 2], lengths[1 : 2 * k2 : 2]
        shape = (-1,) + (1,) * (means.ndim - 1)
        merged = (means[0 : 2 * k2 : 2] * la.reshape(shape) + means[1 : 2 * k2 : 2] * lb.reshape(shape)) / (la + lb).reshape(shape)
        if k % 2:
            # fold an odd trailing block into the last merged one
            lc = lengths[-1]
            tot = la[-1] + lb[-1] + lc
            merged[-1] = (merged[-1] * (la[-1] + lb[-1]) + means[-1] * lc) / tot
            lengths = np.concatenate([la[:-1] + lb[:-1], [tot]])
        else:
            lengths = la + lb
        means = merged
    return best


def block_means(samples: SampleSet, fn: Callable[[np.ndarray], np.ndarray], n_blocks: int = 64) -> BlockStats:
    """Apply ``fn`` (``(N, n_nodes) -> (N, P)``) and average over time blocks per chain."""
    s = samples.samples
    t, m, n = s.shape
    edges = np.linspace(0, t, min(n_blocks, t) + 1).astype(int)
    out = []
    for a, b in zip(edges[:-1], edges[1:]):
        vals = np.asarray(fn(s[a:b].reshape(-1, n)))
        out.append(vals.reshape(b - a, m, -1).mean(axis=0))
    return BlockStats(np.stack(out), np.diff(edges))


def mc_expectation(samples: SampleSet, observable: Callable[[np.ndarray], np.ndarray]):
    """Mean of ``observable`` over the sample set and its batch-means standard error.

    ``observable`` maps an ``(N, n_nodes)`` array to ``(N,)`` values. When the
    set carries weights the self-normalised weighted mean is returned.
    """
    if len(samples) == 0:
        raise ValidationError("empty sample set")
    if samples.weights is None:
        bs = block_means(samples, lambda z: np.reshape(observable(z), (-1, 1)))
        return float(bs.mean()[0]), float(bs.stderr()[0])
    t, m, _ = samples.samples.shape
    w_all = samples.weights.reshape(t, m)
    # attach each state's weight as an extra coordinate so blocks stay aligned
    aug = replace(samples, samples=np.concatenate([samples.samples, w_all[:, :, None]], axis=2))

    def fn(zw):
        w = zw[:, -1]
        a = np.reshape(observable(zw[:, :-1]), -1)
        return np.stack([w * a, w], axis=1)

    bs = block_means(aug, fn)
    wa, w = bs.mean()
    ratio = wa / w
    lin = (bs.means[..., 0] - ratio * bs.means[..., 1]) / w
    return float(ratio), float(block_se(lin[..., None], bs.lengths)[0])


def effective_sample_size(log_weights: np.ndarray) -> float:
    lw = np.asarray(log_weights, float).ravel()
    return float(np.exp(2 * logsumexp(lw) - logsumexp(2 * lw)))


def reweight(samples: SampleSet, net: Network, beta: float) -> SampleSet:
    """Attach weights ``exp(-beta c / T)`` (normalised to sum to the sample count)."""
    if samples.ctx.beta != 0.0:
        raise ValidationError("reweighting expects samples drawn at beta == 0")
    T = samples.params.temperature
    c = cost(samples.flat, samples.ctx.d, net.output_nodes)
    lw = -beta * c / T
    w = np.exp(lw - logsumexp(lw)) * len(samples)
    return replace(samples, weights=w, ctx=samples.ctx.with_beta(beta))


# ---------------------------------------------------------------------------
# gradient estimators


def _observable_vector(net: Network):
    """``df/dtheta`` for every trainable parameter, as a flat vector per state.

    Order: trainable ``W`` pairs (upper triangle), then ``lambda``.
    """
    pairs = net.pairs()
    pi = np.array([p[0] for p in pairs], dtype=int)
    pj = np.array([p[1] for p in pairs], dtype=int)
    act = net.activation

    def fn(z):
        rho = activation_derivs(act, z, 0)[0]
        return np.concatenate([-rho[:, pi] * rho[:, pj], 0.5 * z * z], axis=1)

    return fn, pairs


def _unflatten(net: Network, pairs, vec: np.ndarray) -> dict[str, np.ndarray]:
    w = np.zeros((net.n_nodes, net.n_nodes))
    for k, (i, j) in enumerate(pairs):
        w[i, j] = w[j, i] = vec[k]
    return {"W": w, "lambda": np.array(vec[len(pairs):])}


def _free_start(net, ctx0, z0):
    if z0 is not None:
        return np.asarray(z0, float)
    from .deterministic import SolverParams, relax

    fp = relax(net, np.zeros(net.n_nodes), ctx0, SolverParams(tol=1e-8))
    return fp.z_bar


def grad_clamped_thermal(
    net: Network, ctx0: ClampContext, delta_beta: float, params: SamplerParams, z0=None
) -> GradientReport:
    """``[E_+(df/dtheta) - E_-(df/dtheta)] / (2 delta_beta)`` from two clamped chains.

    Both chains share the seed (common random numbers), so the standard
    error is computed from the paired difference of block means.
    """
    if delta_beta <= 0:
        raise ValidationError("delta_beta must be positive")
    start = _free_start(net, ctx0, z0)
    fn, pairs = _observable_vector(net)
    plus = block_means(langevin_chain(net, ctx0.with_beta(+delta_beta), params, start), fn)
    minus = block_means(langevin_chain(net, ctx0.with_beta(-delta_beta), params, start), fn)
    diff = BlockStats((plus.means - minus.means) / (2 * delta_beta), plus.lengths)
    return GradientReport(
        grads=_unflatten(net, pairs, diff.mean()),
        stderr=_unflatten(net, pairs, diff.stderr()),
        method="thermal-clamped",
        delta_beta=delta_beta,
        n_samples=2 * params.n_samples,
        meta={"temperature": params.temperature, "dt": params.dt},
    )


def covariance_from_samples(samples: SampleSet, net: Network) -> GradientReport:
    """``-(1/T) Cov[df/dtheta, c]`` with batch-means standard errors."""
    if samples.ctx.beta != 0.0:
        raise ValidationError("the covariance estimator samples the unclamped (beta == 0) system")
    T = samples.params.temperature
    fn, pairs = _observable_vector(net)
    d, outs = samples.ctx.d, net.output_nodes

    def joint(z):
        g = fn(z)
        c = cost(z, d, outs)[:, None]
        return np.concatenate([g, c, g * c], axis=1)

    bs = block_means(samples, joint)
    p = len(pairs) + net.n_nodes
    mu = bs.mean()
    gbar, cbar = mu[:p], mu[p]
    g, c, gc = bs.means[..., :p], bs.means[..., p : p + 1], bs.means[..., p + 1 :]
    # block average of -(g - gbar)(c - cbar)/T, linear in the block means
    lin = -(gc - gbar * c - cbar * g + gbar * cbar) / T
    lw = bs.lengths / bs.lengths.sum()
    est = np.tensordot(lw, lin, axes=(0, 0)).mean(axis=0)
    return GradientReport(
        grads=_unflatten(net, pairs, est),
        stderr=_unflatten(net, pairs, block_se(lin, bs.lengths)),
        method="thermal-covariance",
        n_samples=len(samples),
        meta={"temperature": T, "dt": samples.params.dt, "mean_cost": float(cbar),
              "mean_cost_se": float(block_se(c, bs.lengths)[0])},
    )


def grad_covariance(net: Network, ctx0: ClampContext, params: SamplerParams, z0=None) -> GradientReport:
    """Unclamped estimator: one chain at ``beta = 0``; ``d`` enters only through the cost."""
    if ctx0.beta != 0.0:
        raise ValidationError("grad_covariance requires beta == 0")
    samples = langevin_chain(net, ctx0, params, _free_start(net, ctx0, z0))
    return covariance_from_samples(samples, net)


def reweighted_from_samples(
    samples: SampleSet, net: Network, beta_probe: float, ess_floor: float = 0.1
) -> GradientReport:
    if beta_probe == 0:
        raise ValidationError("beta_probe must be nonzero")
    if samples.ctx.beta != 0.0:
        raise ValidationError("reweighting expects samples drawn at beta == 0")
    T = samples.params.temperature
    fn, pairs = _observable_vector(net)
    d, outs = samples.ctx.d, net.output_nodes
    c_all = cost(samples.flat, d, outs)
    ess = {}
    for sign in (+1, -1):
        ess[sign] = effective_sample_size(-sign * beta_probe * c_all / T)
        if ess[sign] < ess_floor * c_all.size:
            raise ReweightingDegeneracyError(
                f"effective sample size {ess[sign]:.0f} below floor "
                f"{ess_floor * c_all.size:.0f} at beta={sign * beta_probe:+g}",
                ess=ess[sign],
            )
    # shift keeps exp() in range; it cancels in the self-normalised ratio
    shift = beta_probe * c_all.min() / T, -beta_probe * c_all.max() / T

    def joint(z):
        g = fn(z)
        c = cost(z, d, outs)
        wp = np.exp(-beta_probe * c / T + shift[0])[:, None]
        wm = np.exp(+beta_probe * c / T + shift[1])[:, None]
        return np.concatenate([wp * g, wp, wm * g, wm], axis=1)

    bs = block_means(samples, joint)
    p = len(pairs) + net.n_nodes
    mu = bs.mean()
    lin = []
    ratios = []
    for off in (0, p + 1):
        wg, w = bs.means[..., off : off + p], bs.means[..., off + p : off + p + 1]
        r = mu[off : off + p] / mu[off + p]
        ratios.append(r)
        lin.append((wg - r * w) / mu[off + p])
    est = (ratios[0] - ratios[1]) / (2 * beta_probe)
    se = block_se((lin[0] - lin[1]) / (2 * beta_probe), bs.lengths)
    return GradientReport(
        grads=_unflatten(net, pairs, est),
        stderr=_unflatten(net, pairs, se),
        method="thermal-reweighted",
        delta_beta=beta_probe,
        n_samples=len(samples),
        meta={"temperature": T, "ess_plus": ess[1], "ess_minus": ess[-1]},
    )


def grad_reweighted(
    net: Network,
    ctx0: ClampContext,
    beta_probe: float,
    params: SamplerParams,
    z0=None,
    ess_floor: float = 0.1,
) -> GradientReport:
    """Clamped expectations at ``+-beta_probe`` recovered from one unclamped chain."""
    if beta_probe == 0:
        raise ValidationError("beta_probe must be nonzero")
    if ctx0.beta != 0.0:
        raise ValidationError("grad_reweighted requires beta == 0")
    samples = langevin_chain(net, ctx0, params, _free_start(net, ctx0, z0))
    return reweighted_from_samples(samples, net, beta_probe, ess_floor)


# ---------------------------------------------------------------------------
# quadrature oracle


class BoltzmannGrid:
    """Tensor-product rectangle-rule quadrature of ``exp(-f/T)`` (``n_nodes <= 3``).

    ``bounds`` is a list of ``(lo, hi)`` per node; by default each axis spans
    ``z_bar +- 12 sigma`` with ``sigma`` from the Hessian at the T=0 fixed point.
    """

    max_nodes = 3

    def __init__(self, net: Network, ctx: ClampContext, T: float, bounds=None, n_points: int = 101):
        if net.n_nodes > self.max_nodes:
            raise ValidationError(f"quadrature oracle limited to {self.max_nodes} nodes")
        if T <= 0:
            raise ValidationError("temperature must be positive")
        self.net, self.ctx, self.T = net, ctx, T
        if bounds is None:
            bounds = default_bounds(net, ctx, T)
        bounds = [tuple(map(float, b)) for b in bounds]
        if len(bounds) != net.n_nodes:
            raise DimensionError("one (lo, hi) pair per node required")
        axes = [np.linspace(lo, hi, n_points) for lo, hi in bounds]
        self.cell = float(np.prod([(hi - lo) / (n_points - 1) for lo, hi in bounds]))
        mesh = np.meshgrid(*axes, indexing="ij")
        self.z = np.stack([m.ravel() for m in mesh], axis=1)
        f = energy(net, self.z, ctx)
        self.logw = -f / T
        self.log_z = float(logsumexp(self.logw) + np.log(self.cell))
        self.p = np.exp(self.logw - logsumexp(self.logw))
        edge = np.zeros(mesh[0].shape, dtype=bool)
        for ax in range(net.n_nodes):
            sl = [slice(None)] * net.n_nodes
            sl[ax] = 0
            edge[tuple(sl)] = True
            sl[ax] = -1
            edge[tuple(sl)] = True
        self.boundary_ratio = float(np.exp(self.logw[edge.ravel()].max() - self.logw.max()))
        if self.boundary_ratio > 1e-12:
            warnings.warn(
                f"quadrature box too small: boundary density ratio {self.boundary_ratio:.2e}",
                RuntimeWarning,
                stacklevel=2,
            )

    @property
    def free_energy(self) -> float:
        return -self.T * self.log_z

    def expectation(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        vals = np.asarray(fn(self.z))
        return np.tensordot(self.p, vals, axes=(0, 0))

    def cost_gradient(self) -> GradientReport:
        """Exact ``d<C>_T/dtheta = -(1/T) Cov[df/dtheta, c]`` on the grid."""
        fn, pairs = _observable_vector(self.net)
        g = fn(self.z)
        c = cost(self.z, self.ctx.d, self.net.output_nodes)
        cov = self.p @ (g * c[:, None]) - (self.p @ g) * (self.p @ c)
        return GradientReport(
            grads=_unflatten(self.net, pairs, -cov / self.T), method="quadrature-covariance",
            meta={"temperature": self.T},
        )


def default_bounds(net: Network, ctx: ClampContext, T: float, width: float = 12.0):
    from .deterministic import SolverParams, relax

    zb = relax(net, np.zeros(net.n_nodes), ctx, SolverParams(tol=1e-10)).z_bar
    h = hessian(net, zb, ctx)
    ev = np.linalg.eigvalsh(h)
    if ev[0] <= 0:
        raise ValidationError("fixed point is not a minimum; supply explicit bounds")
    sigma = np.sqrt(T / ev[0])
    return [(z - width * sigma, z + width * sigma) for z in zb]


def free_energy_quadrature(net: Network, ctx: ClampContext, T: float, bounds=None, n_points: int = 101) -> float:
    """``-T log int exp(-f/T) dz`` by tensor-product quadrature."""
    return BoltzmannGrid(net, ctx, T, bounds, n_points).free_energy


def quadrature_expectation(net, ctx, T, fn, bounds=None, n_points: int = 101):
    return BoltzmannGrid(net, ctx, T, bounds, n_points).expectation(fn)


# ---------------------------------------------------------------------------
# export


def dump_samples(samples: SampleSet, fh) -> None:
    """Line-delimited JSON: a header record with metadata, then one state per line."""
    header = {
        "type": "header",
        "sampler": asdict(samples.params),
        "clamp": {
            "u": samples.ctx.u.tolist(),
            "d": samples.ctx.d.tolist(),
            "alpha": samples.ctx.alpha,
            "beta": samples.ctx.beta,
        },
        "shape": list(samples.samples.shape),
        "weighted": samples.weights is not None,
    }
    fh.write(json.dumps(header) + "\n")
    flat = samples.flat
    wts = samples.weights
    for k, z in enumerate(flat):
        rec = {"z": z.tolist()}
        if wts is not None:
            rec["w"] = float(wts[k])
        fh.write(json.dumps(rec) + "\n")


def load_samples(fh) -> SampleSet:
    header = json.loads(fh.readline())
    if header.get("type") != "header":
        raise ValidationError("sample file must start with a header record")
    rows = [json.loads(line) for line in fh if line.strip()]
    shape = tuple(header["shape"])
    z = np.array([r["z"] for r in rows], dtype=float).reshape(shape)
    w = np.array([r["w"] for r in rows]) if header["weighted"] else None
    return SampleSet(z, SamplerParams(**header["sampler"]), ClampContext(**header["clamp"]), w)
