"""Classical Hopfield-style energy, cost and their analytic derivatives.

The energy of a state ``z`` is

    f(z) = alpha/2 sum_{in} (u_i - z_i)^2 + sum_i lambda_i z_i^2 / 2
           - 1/2 sum_{i != j} W_ij rho(z_i) rho(z_j)
           + beta/2 sum_{out} (z_i - d_i)^2

Trainable parameters are the symmetric couplings ``W`` and the local
curvatures ``lambda``. All functions here are pure. ``energy``, ``grad_z``
and ``cost`` accept a batch of states with shape ``(..., n_nodes)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import DimensionError, UnsupportedActivationError, ValidationError
from .report import GradientReport

ACTIVATIONS = ("tanh", "identity", "hard-sigmoid")
HESSIAN_VARIANTS = ("exact", "as-printed")


# ---------------------------------------------------------------------------
# activations


def activation_derivs(name: str, z: np.ndarray, order: int) -> list[np.ndarray]:
    """Return ``[rho, rho', ..., rho^(order)]`` evaluated at ``z``."""
    z = np.asarray(z, dtype=float)
    if name == "tanh":
        t = np.tanh(z)
        if order == 0:
            return [t]
        s = 1.0 - t * t
        if order == 1:
            return [t, s]
        out = [t, s, -2.0 * t * s, 2.0 * s * (3.0 * t * t - 1.0), 8.0 * t * s * (2.0 - 3.0 * t * t)]
    elif name == "identity":
        zero = np.zeros_like(z)
        out = [z.copy(), np.ones_like(z), zero, zero, zero]
    elif name == "hard-sigmoid":
        if order > 2:
            raise UnsupportedActivationError(
                f"hard-sigmoid is not differentiable to order {order}"
            )
        inside = (z > 0.0) & (z < 1.0)
        out = [np.clip(z, 0.0, 1.0), inside.astype(float), np.zeros_like(z)]
    else:
        raise UnsupportedActivationError(f"unknown activation {name!r}")
    return out[: order + 1]


# ---------------------------------------------------------------------------
# data types


@dataclass(frozen=True)
class Network:
    n_nodes: int
    input_nodes: tuple[int, ...]
    output_nodes: tuple[int, ...]
    weights: np.ndarray
    lam: np.ndarray
    activation: str = "tanh"
    # Trainable-pair mask; None means fully connected.
    mask: np.ndarray | None = None

    def __post_init__(self):
        n = int(self.n_nodes)
        if n <= 0:
            raise ValidationError("n_nodes must be positive")
        ins = tuple(int(i) for i in self.input_nodes)
        outs = tuple(int(i) for i in self.output_nodes)
        if not ins or not outs:
            raise ValidationError("input and output node sets must be non-empty")
        if set(ins) & set(outs):
            raise ValidationError("input and output node sets overlap")
        if len(set(ins)) != len(ins) or len(set(outs)) != len(outs):
            raise ValidationError("duplicate node index")
        if min(ins + outs) < 0 or max(ins + outs) >= n:
            raise ValidationError("node index out of range")
        w = np.array(self.weights, dtype=float)
        if w.shape != (n, n):
            raise DimensionError(f"weights must be {n}x{n}, got {w.shape}")
        if not np.array_equal(w, w.T):
            raise ValidationError("weights must be exactly symmetric")
        if np.any(np.diag(w) != 0.0):
            raise ValidationError("weights must have a zero diagonal")
        lam = np.array(self.lam, dtype=float).reshape(-1)
        if lam.shape != (n,):
            raise DimensionError(f"lambda must have length {n}")
        if np.any(lam <= 0.0):
            raise ValidationError("local curvatures lambda must be positive")
        if self.activation not in ACTIVATIONS:
            raise UnsupportedActivationError(f"unknown activation {self.activation!r}")
        if self.mask is None:
            mask = ~np.eye(n, dtype=bool)
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != (n, n) or not np.array_equal(mask, mask.T):
                raise ValidationError("mask must be a symmetric n x n boolean matrix")
            mask &= ~np.eye(n, dtype=bool)
            if np.any(w[~mask] != 0.0):
                raise ValidationError("weights must vanish outside the mask")
        for arr in (w, lam, mask):
            arr.flags.writeable = False
        object.__setattr__(self, "n_nodes", n)
        object.__setattr__(self, "input_nodes", ins)
        object.__setattr__(self, "output_nodes", outs)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mask", mask)

    @property
    def fully_connected(self) -> bool:
        return bool(np.array_equal(self.mask, ~np.eye(self.n_nodes, dtype=bool)))

    @property
    def hidden_nodes(self) -> tuple[int, ...]:
        clamped = set(self.input_nodes) | set(self.output_nodes)
        return tuple(i for i in range(self.n_nodes) if i not in clamped)

    def pairs(self) -> list[tuple[int, int]]:
        """Trainable unordered pairs ``(i, j)`` with ``i < j``."""
        iu = np.triu_indices(self.n_nodes, 1)
        return [(int(i), int(j)) for i, j in zip(*iu) if self.mask[i, j]]

    def with_params(self, weights=None, lam=None) -> "Network":
        return replace(
            self,
            weights=self.weights if weights is None else weights,
            lam=self.lam if lam is None else lam,
        )

    def with_weight(self, i: int, j: int, value: float) -> "Network":
        w = self.weights.copy()
        w[i, j] = w[j, i] = value
        return self.with_params(weights=w)


@dataclass(frozen=True)
class ClampContext:
    u: np.ndarray
    d: np.ndarray
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        u = np.array(self.u, dtype=float).reshape(-1)
        d = np.array(self.d, dtype=float).reshape(-1)
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")
        if np.any(np.abs(d) > 1):
            raise ValidationError("output targets d must lie in [-1, 1]")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))

    def with_beta(self, beta: float) -> "ClampContext":
        return replace(self, beta=beta)


class SymTensor3:
    """Symmetric rank-3 tensor with the sparsity of the energy's third derivative.

    Only index patterns ``(a, a, a)`` and ``(a, a, b)`` can be nonzero;
    ``diag[a] = V[a, a, a]`` and ``pair[a, b] = V[a, a, b]`` for ``a != b``.
    """

    def __init__(self, diag: np.ndarray, pair: np.ndarray):
        self.diag = np.asarray(diag, dtype=float)
        self.pair = np.array(pair, dtype=float)
        np.fill_diagonal(self.pair, 0.0)

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> np.ndarray:
        n = self.n
        v = np.zeros((n, n, n))
        idx = np.arange(n)
        v[idx, idx, idx] = self.diag
        a, b = np.nonzero(self.pair)
        p = self.pair[a, b]
        v[a, a, b] = p
        v[a, b, a] = p
        v[b, a, a] = p
        return v

    def contract_vec(self, x: np.ndarray) -> np.ndarray:
        """``M[a, b] = sum_c V[a, b, c] x[c]``."""
        px = self.pair * x[:, None]
        m = px + px.T
        np.fill_diagonal(m, self.diag * x + self.pair @ x)
        return m

    def contract_mat(self, s: np.ndarray) -> np.ndarray:
        """``y[c] = sum_{a,b} V[a, b, c] S[a, b]`` for symmetric ``S``."""
        sd = np.diag(s)
        off = s - np.diag(sd)
        return self.diag * sd + 2.0 * np.sum(self.pair * off, axis=1) + self.pair.T @ sd

    def __add__(self, other: "SymTensor3") -> "SymTensor3":
        return SymTensor3(self.diag + other.diag, self.pair + other.pair)

    def __mul__(self, c: float) -> "SymTensor3":
        return SymTensor3(self.diag * c, self.pair * c)

    __rmul__ = __mul__


class SymTensor4:
    """Symmetric rank-4 tensor; nonzero patterns ``aaaa``, ``aaab``, ``aabb``.

    ``diag[a] = V[a,a,a,a]``, ``p31[a, b] = V[a,a,a,b]``, ``p22[a, b] = V[a,a,b,b]``.
    """

    def __init__(self, diag, p31, p22):
        self.diag = np.asarray(diag, dtype=float)
        self.p31 = np.array(p31, dtype=float)
        self.p22 = np.array(p22, dtype=float)
        np.fill_diagonal(self.p31, 0.0)
        np.fill_diagonal(self.p22, 0.0)

    @property
    def n(self) -> int:
        return self.diag.shape[0]

    def dense(self) -> np.ndarray:
        from itertools import permutations

        n = self.n
        v = np.zeros((n, n, n, n))
        for a in range(n):
            v[a, a, a, a] = self.diag[a]
            for b in range(n):
                if a == b:
                    continue
                for perm in set(permutations((a, a, a, b))):
                    v[perm] = self.p31[a, b]
                if a < b:
                    for perm in set(permutations((a, a, b, b))):
                        v[perm] = self.p22[a, b]
        return v

    def contract_vec(self, x: np.ndarray) -> SymTensor3:
        """``R[a, b, c] = sum_d V[a, b, c, d] x[d]``, itself a :class:`SymTensor3`."""
        diag = self.diag * x + self.p31 @ x
        pair = self.p31 * x[:, None] + self.p22 * x[None, :]
        return SymTensor3(diag, pair)


@dataclass
class DerivativeTensors:
    grad_z: np.ndarray
    hessian: np.ndarray
    v3: SymTensor3 | None = None
    v4: SymTensor4 | None = None


# ---------------------------------------------------------------------------
# energy and derivatives


def _check(net: Network, z: np.ndarray, ctx: ClampContext) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != net.n_nodes:
        raise DimensionError(f"state has {z.shape[-1]} components, network has {net.n_nodes}")
    if ctx.u.shape[0] != len(net.input_nodes):
        raise DimensionError(f"|u|={ctx.u.shape[0]} but |I_in|={len(net.input_nodes)}")
    if ctx.d.shape[0] != len(net.output_nodes):
        raise DimensionError(f"|d|={ctx.d.shape[0]} but |I_out|={len(net.output_nodes)}")
    return z


def cost(z, d, output_nodes: Sequence[int]) -> np.ndarray | float:
    """Half squared distance between output components of ``z`` and ``d``."""
    z = np.asarray(z, dtype=float)
    d = np.asarray(d, dtype=float).reshape(-1)
    idx = list(output_nodes)
    if d.shape[0] != len(idx):
        raise DimensionError(f"|d|={d.shape[0]} but |I_out|={len(idx)}")
    r = z[..., idx] - d
    out = 0.5 * np.sum(r * r, axis=-1)
    return float(out) if out.ndim == 0 else out


def energy(net: Network, z, ctx: ClampContext):
    z = _check(net, z, ctx)
    rho = activation_derivs(net.activation, z, 0)[0]
    zin = z[..., list(net.input_nodes)]
    zout = z[..., list(net.output_nodes)]
    e = 0.5 * ctx.alpha * np.sum((ctx.u - zin) ** 2, axis=-1)
    e = e + 0.5 * np.sum(net.lam * z * z, axis=-1)
    e = e - 0.5 * np.sum(rho * (rho @ net.weights), axis=-1)
    e = e + 0.5 * ctx.beta * np.sum((zout - ctx.d) ** 2, axis=-1)
    return float(e) if np.ndim(e) == 0 else e


def grad_z(net: Network, z, ctx: ClampContext) -> np.ndarray:
    z = _check(net, z, ctx)
    rho, drho = activation_derivs(net.activation, z, 1)
    g = net.lam * z - drho * (rho @ net.weights)
    ins, outs = list(net.input_nodes), list(net.output_nodes)
    g[..., ins] += ctx.alpha * (z[..., ins] - ctx.u)
    g[..., outs] += ctx.beta * (z[..., outs] - ctx.d)
    return g


def theta_observables(net: Network, z) -> dict[str, np.ndarray]:
    """``df/dtheta`` at state(s) ``z``: ``W`` pairs as matrices, ``lambda`` as vectors.

    For a batch ``z`` of shape ``(m, n)`` the ``W`` entry has shape ``(m, n, n)``.
    """
    z = np.asarray(z, dtype=float)
    rho = activation_derivs(net.activation, z, 0)[0]
    gw = -rho[..., :, None] * rho[..., None, :]
    gw = gw * net.mask
    return {"W": gw, "lambda": 0.5 * z * z}


def grad_theta(net: Network, z, ctx: ClampContext) -> GradientReport:
    """Partial derivatives of the energy in ``W_ij`` (unordered pairs) and ``lambda_i``."""
    z = _check(net, z, ctx)
    if z.ndim != 1:
        raise DimensionError("grad_theta takes a single state")
    return GradientReport(grads=theta_observables(net, z), method="partial")


def hessian(net: Network, z, ctx: ClampContext, variant: str = "exact") -> np.ndarray:
    """Hessian of the energy.

    ``variant="as-printed"`` drops the local-curvature term on clamped
    (input and output) nodes, so it differs from the true second derivative
    by ``lambda_i`` there.
    """
    if variant not in HESSIAN_VARIANTS:
        raise ValidationError(f"unknown hessian variant {variant!r}")
    z = _check(net, z, ctx)
    rho, d1, d2 = activation_derivs(net.activation, z, 2)
    field_ = net.weights @ rho
    t = -d2 * field_
    clamp = np.zeros(net.n_nodes)
    clamp[list(net.input_nodes)] += ctx.alpha
    clamp[list(net.output_nodes)] += ctx.beta
    if variant == "exact":
        t = clamp + net.lam + t
    else:
        hidden = np.zeros(net.n_nodes)
        hidden[list(net.hidden_nodes)] = net.lam[list(net.hidden_nodes)]
        t = clamp + hidden + t
    h = -(d1[:, None] * d1[None, :]) * net.weights
    h[np.diag_indices(net.n_nodes)] = t
    return h


def third_derivative(net: Network, z) -> SymTensor3:
    rho, d1, d2, d3 = activation_derivs(net.activation, np.asarray(z, float), 3)
    w = net.weights
    return SymTensor3(-d3 * (w @ rho), -(d2[:, None] * d1[None, :]) * w)


def fourth_derivative(net: Network, z) -> SymTensor4:
    rho, d1, d2, d3, d4 = activation_derivs(net.activation, np.asarray(z, float), 4)
    w = net.weights
    return SymTensor4(
        -d4 * (w @ rho),
        -(d3[:, None] * d1[None, :]) * w,
        -(d2[:, None] * d2[None, :]) * w,
    )


def derivative_tensors(
    net: Network, z, ctx: ClampContext, order: int = 2, hessian_variant: str = "exact"
) -> DerivativeTensors:
    if order not in (2, 3, 4):
        raise ValidationError("order must be 2, 3 or 4")
    if order >= 3 and net.activation == "hard-sigmoid":
        raise UnsupportedActivationError("hard-sigmoid supports derivative order <= 2 only")
    z = _check(net, z, ctx)
    out = DerivativeTensors(grad_z(net, z, ctx), hessian(net, z, ctx, hessian_variant))
    if order >= 3:
        out.v3 = third_derivative(net, z)
    if order >= 4:
        out.v4 = fourth_derivative(net, z)
    return out


# ---------------------------------------------------------------------------
# construction helpers and serialization


def random_network(
    n_nodes: int,
    input_nodes: Sequence[int],
    output_nodes: Sequence[int],
    rng: np.random.Generator,
    scale: float = 0.5,
    activation: str = "tanh",
    lam: float = 1.0,
    mask: np.ndarray | None = None,
) -> Network:
    """Couplings drawn from ``U(-scale, scale)`` on every pair allowed by ``mask``."""
    w = rng.uniform(-scale, scale, size=(n_nodes, n_nodes))
    w = np.triu(w, 1)
    w = w + w.T
    if mask is not None:
        w = np.where(mask, w, 0.0)
    return Network(n_nodes, tuple(input_nodes), tuple(output_nodes), w,
                   np.full(n_nodes, lam), activation, mask)


def layered_mask(layer_sizes: Sequence[int]) -> np.ndarray:
    """Adjacency that couples only consecutive layers."""
    n = sum(layer_sizes)
    mask = np.zeros((n, n), dtype=bool)
    starts = np.cumsum([0, *layer_sizes])
    for k in range(len(layer_sizes) - 1):
        a = slice(starts[k], starts[k + 1])
        b = slice(starts[k + 1], starts[k + 2])
        mask[a, b] = True
        mask[b, a] = True
    return mask


def network_to_dict(net: Network) -> dict:
    d = {
        "n_nodes": net.n_nodes,
        "input_nodes": list(net.input_nodes),
        "output_nodes": list(net.output_nodes),
        "weights": net.weights.tolist(),
        "lambda": net.lam.tolist(),
        "activation": net.activation,
    }
    if not net.fully_connected:
        d["mask"] = net.mask.astype(int).tolist()
    return d


def network_from_dict(d: dict) -> Network:
    try:
        return Network(
            n_nodes=d["n_nodes"],
            input_nodes=tuple(d["input_nodes"]),
            output_nodes=tuple(d["output_nodes"]),
            weights=np.array(d["weights"], dtype=float),
            lam=np.array(d["lambda"], dtype=float),
            activation=d.get("activation", "tanh"),
            mask=None if d.get("mask") is None else np.array(d["mask"], dtype=bool),
        )
    except KeyError as exc:
        raise ValidationError(f"network document missing field {exc}") from None


def dumps_network(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=1) + "\n"


def loads_network(text: str) -> Network:
    return network_from_dict(json.loads(text))


def save_network(net: Network, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_network(net))


def load_network(path) -> Network:
    with open(path) as fh:
        return loads_network(fh.read())
