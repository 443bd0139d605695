"""Eigenstate equilibrium propagation for a network of qubits.

The Hamiltonian is

    H = sum_{in} u_i Z_i + sum_{i<j} (a_ij X_i X_j + b_ij Z_i Z_j)
        + beta/2 sum_{out} (Z_i - d_i)^2

with qubit 0 the leftmost Kronecker factor and ``|0>`` the ``Z = +1`` state.
Because every eigenstate extremises the mean energy, ``dE/dtheta`` equals
``<dH/dtheta>`` and the cost gradient follows from how ``<X_i X_j>`` and
``<Z_i Z_j>`` respond to a small output clamp.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import reduce

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegenerateEigenstateError,
    DimensionError,
    EigenstateTrackingError,
    ValidationError,
)
from .report import GradientReport

MAX_QUBITS = 12
DEGENERACY_TOL = 1e-9
OVERLAP_THRESHOLD = 0.9

PAULI = {
    "I": np.eye(2),
    "X": np.array([[0.0, 1.0], [1.0, 0.0]]),
    "Y": np.array([[0.0, -1j], [1j, 0.0]]),
    "Z": np.array([[1.0, 0.0], [0.0, -1.0]]),
}


@dataclass(frozen=True, eq=False)
class QuantumSystem:
    n_qubits: int
    input_qubits: tuple[int, ...]
    u: np.ndarray
    output_qubits: tuple[int, ...]
    d: np.ndarray
    xx: np.ndarray  # symmetric coupling matrix a_ij, zero diagonal
    zz: np.ndarray  # symmetric coupling matrix b_ij, zero diagonal
    beta: float = 0.0
    max_qubits: int = field(default=MAX_QUBITS, compare=False)

    def __post_init__(self):
        n = int(self.n_qubits)
        if n <= 0:
            raise ValidationError("n_qubits must be positive")
        if n > self.max_qubits:
            raise ValidationError(f"{n} qubits exceeds the memory budget of {self.max_qubits}")
        ins = tuple(int(i) for i in self.input_qubits)
        outs = tuple(int(i) for i in self.output_qubits)
        if set(ins) & set(outs):
            raise ValidationError("input and output qubit sets overlap")
        if any(i < 0 or i >= n for i in ins + outs):
            raise ValidationError("qubit index out of range")
        u = np.array(self.u, float).reshape(-1)
        d = np.array(self.d, float).reshape(-1)
        if u.shape[0] != len(ins) or d.shape[0] != len(outs):
            raise DimensionError("u / d lengths must match the input / output qubit sets")
        if np.any(np.abs(d) > 1):
            raise ValidationError("targets d must lie in [-1, 1]")
        mats = []
        for name in ("xx", "zz"):
            m = np.array(getattr(self, name), float)
            if m.shape != (n, n):
                raise DimensionError(f"{name} couplings must be {n}x{n}")
            if not np.array_equal(m, m.T) or np.any(np.diag(m) != 0):
                raise ValidationError(f"{name} couplings must be symmetric with zero diagonal")
            m.flags.writeable = False
            mats.append(m)
        object.__setattr__(self, "n_qubits", n)
        object.__setattr__(self, "input_qubits", ins)
        object.__setattr__(self, "output_qubits", outs)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "xx", mats[0])
        object.__setattr__(self, "zz", mats[1])
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def dim(self) -> int:
        return 2**self.n_qubits

    def with_beta(self, beta: float) -> "QuantumSystem":
        return replace(self, beta=beta)

    def with_coupling(self, family: str, i: int, j: int, value: float) -> "QuantumSystem":
        m = np.array(getattr(self, family))
        m[i, j] = m[j, i] = value
        return replace(self, **{family: m})

    def pairs(self) -> list[tuple[int, int]]:
        n = self.n_qubits
        return [(i, j) for i in range(n) for j in range(i + 1, n)]


@dataclass
class EigenSolution:
    eigenvalue: float
    statevector: np.ndarray
    index: int
    gap_below: float
    gap_above: float
    residual: float
    spectrum: np.ndarray
    norm: float  # spectral norm of H


# ---------------------------------------------------------------------------
# operators


def pauli_string(n: int, ops: dict[int, str]) -> np.ndarray:
    """Kronecker product with ``ops[i]`` on qubit ``i`` and identity elsewhere."""
    return reduce(np.kron, [PAULI[ops.get(q, "I")] for q in range(n)])


def _z_signs(n: int) -> np.ndarray:
    """``signs[k, i]`` is the ``Z_i`` eigenvalue of computational basis state ``k``."""
    k = np.arange(2**n)
    bits = (k[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    return 1.0 - 2.0 * bits


def _flip_index(n: int, i: int, j: int) -> np.ndarray:
    k = np.arange(2**n)
    return k ^ ((1 << (n - 1 - i)) | (1 << (n - 1 - j)))


def cost_operator(sys: QuantumSystem) -> np.ndarray:
    """``1/2 sum_out (Z_i - d_i)^2`` as a (diagonal) matrix."""
    zs = _z_signs(sys.n_qubits)
    diag = 0.5 * np.sum((zs[:, list(sys.output_qubits)] - sys.d) ** 2, axis=1)
    return np.diag(diag)


def build_hamiltonian(sys: QuantumSystem) -> np.ndarray:
    """Dense real-symmetric Hamiltonian.

    ``Z`` strings are diagonal, so they are filled in from basis-state signs;
    each ``X_i X_j`` is a bit-flip permutation. Both agree entrywise with the
    Kronecker-product form built by :func:`pauli_string`.
    The output clamp uses ``(Z - d)^2 = (1 + d^2) - 2 d Z``.
    """
    n = sys.n_qubits
    zs = _z_signs(n)
    diag = zs[:, list(sys.input_qubits)] @ sys.u
    for i, j in sys.pairs():
        if sys.zz[i, j]:
            diag = diag + sys.zz[i, j] * zs[:, i] * zs[:, j]
    outs = list(sys.output_qubits)
    diag = diag + 0.5 * sys.beta * np.sum((1.0 + sys.d**2) - 2.0 * sys.d * zs[:, outs], axis=1)
    h = np.diag(diag)
    rows = np.arange(2**n)
    for i, j in sys.pairs():
        if sys.xx[i, j]:
            h[rows, _flip_index(n, i, j)] += sys.xx[i, j]
    return h


def pair_expectations(psi: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(<X_i X_j>, <Z_i Z_j>)`` as symmetric matrices with zero diagonal."""
    psi = np.asarray(psi)
    prob = np.abs(psi) ** 2
    zs = _z_signs(n)
    zz = (zs * prob[:, None]).T @ zs
    xx = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            xx[i, j] = xx[j, i] = float(np.real(np.vdot(psi, psi[_flip_index(n, i, j)])))
    np.fill_diagonal(zz, 0.0)
    return xx, zz


# ---------------------------------------------------------------------------
# eigenstates


def _solution(h: np.ndarray, evals, evecs, k: int, degeneracy_tol: float) -> EigenSolution:
    norm = float(np.max(np.abs(evals)))
    below = evals[k] - evals[k - 1] if k > 0 else np.inf
    above = evals[k + 1] - evals[k] if k + 1 < len(evals) else np.inf
    scale = degeneracy_tol * max(norm, np.finfo(float).tiny)
    if min(below, above) <= scale:
        other = evals[k - 1] if below <= scale else evals[k + 1]
        raise DegenerateEigenstateError(
            f"eigenstate {k} is degenerate: eigenvalues {evals[k]:.12g} and {other:.12g}",
            eigenvalues=(float(evals[k]), float(other)),
        )
    psi = evecs[:, k].astype(complex)
    psi /= np.linalg.norm(psi)
    lam = float(evals[k])
    residual = float(np.linalg.norm(h @ psi - lam * psi))
    return EigenSolution(lam, psi, k, float(below), float(above), residual, evals, norm)


def eigensolve(sys: QuantumSystem, which: int = 0, degeneracy_tol: float = DEGENERACY_TOL) -> EigenSolution:
    """Full dense diagonalisation; returns eigenstate ``which`` (0 = ground)."""
    h = build_hamiltonian(sys)
    evals, evecs = np.linalg.eigh(h)
    if not 0 <= which < len(evals):
        raise ValidationError(f"eigenstate index {which} out of range")
    return _solution(h, evals, evecs, which, degeneracy_tol)


def track_eigenstate(
    sys: QuantumSystem,
    reference: np.ndarray,
    degeneracy_tol: float = DEGENERACY_TOL,
    threshold: float = OVERLAP_THRESHOLD,
) -> EigenSolution:
    """Eigenstate of ``sys`` with maximal overlap with ``reference``."""
    h = build_hamiltonian(sys)
    evals, evecs = np.linalg.eigh(h)
    overlaps = np.abs(evecs.T @ np.conj(reference)) ** 2
    k = int(np.argmax(overlaps))
    if overlaps[k] < threshold:
        raise EigenstateTrackingError(
            f"best overlap {overlaps[k]:.3f} below threshold {threshold} at beta={sys.beta:+g}"
        )
    return _solution(h, evals, evecs, k, degeneracy_tol)


def expectation(sol: EigenSolution, observable: np.ndarray) -> float:
    a = np.asarray(observable)
    psi = sol.statevector
    if a.shape != (psi.shape[0], psi.shape[0]):
        raise DimensionError("observable dimension does not match the state")
    val = np.vdot(psi, a @ psi)
    if abs(val.imag) > 1e-10:
        raise ValidationError(f"imaginary expectation {val.imag:.2e}: observable is not Hermitian")
    return float(val.real)


def cost_expectation(sys: QuantumSystem, sol: EigenSolution) -> float:
    zs = _z_signs(sys.n_qubits)
    prob = np.abs(sol.statevector) ** 2
    c = 0.5 * np.sum((zs[:, list(sys.output_qubits)] - sys.d) ** 2, axis=1)
    return float(prob @ c)


def output_magnetisation(sys: QuantumSystem, sol: EigenSolution) -> np.ndarray:
    """``<Z_i>`` on the output qubits."""
    zs = _z_signs(sys.n_qubits)[:, list(sys.output_qubits)]
    return (np.abs(sol.statevector) ** 2) @ zs


# ---------------------------------------------------------------------------
# gradients


def qep_gradient(
    sys: QuantumSystem,
    delta_beta: float = 1e-4,
    which: int = 0,
    degeneracy_tol: float = DEGENERACY_TOL,
) -> GradientReport:
    """``[<dH/dtheta>_+ - <dH/dtheta>_-] / (2 delta_beta)`` for every ``a_ij`` and ``b_ij``.

    The nudged eigenstates are matched to the ``beta = 0`` state by overlap.
    """
    if delta_beta <= 0:
        raise ValidationError("delta_beta must be positive")
    if sys.beta != 0.0:
        raise ValidationError("qep_gradient expects a beta == 0 system")
    free = eigensolve(sys, which, degeneracy_tol)
    plus = track_eigenstate(sys.with_beta(+delta_beta), free.statevector, degeneracy_tol)
    minus = track_eigenstate(sys.with_beta(-delta_beta), free.statevector, degeneracy_tol)
    xp, zp = pair_expectations(plus.statevector, sys.n_qubits)
    xm, zm = pair_expectations(minus.statevector, sys.n_qubits)
    return GradientReport(
        grads={"a": (xp - xm) / (2 * delta_beta), "b": (zp - zm) / (2 * delta_beta)},
        method="qep-symmetric",
        delta_beta=delta_beta,
        meta={"eigenvalue": free.eigenvalue, "cost": cost_expectation(sys, free),
              "index": which, "tracked_index": [plus.index, minus.index]},
    )


def _richardson(fn, x0: float, h: float) -> float:
    d1 = (fn(x0 + h) - fn(x0 - h)) / (2 * h)
    d2 = (fn(x0 + h / 2) - fn(x0 - h / 2)) / h
    return (4 * d2 - d1) / 3


def fd_quantum_cost_gradient(sys: QuantumSystem, which: int = 0, step: float = 1e-4) -> GradientReport:
    """Brute-force ``d<C>/dtheta`` by re-diagonalising with each coupling shifted."""
    ref = eigensolve(sys, which).statevector
    n = sys.n_qubits
    grads = {"a": np.zeros((n, n)), "b": np.zeros((n, n))}
    for key, family in (("a", "xx"), ("b", "zz")):
        for i, j in sys.pairs():
            def c_of(v, i=i, j=j, family=family):
                s = sys.with_coupling(family, i, j, v)
                return cost_expectation(s, track_eigenstate(s, ref))
            grads[key][i, j] = grads[key][j, i] = _richardson(c_of, getattr(sys, family)[i, j], step)
    return GradientReport(grads=grads, method="finite-difference", meta={"step": step})


def _rel_err(a: float, b: float, floor: float) -> float:
    return abs(a - b) / max(abs(b), floor)


def perturbation_identity_check(
    sys: QuantumSystem, which: int = 0, step: float = 1e-3, floor: float = 1e-8
) -> dict:
    """Compare finite differences of the eigenvalue with first-order perturbation theory.

    Checks ``dE/dbeta = <C>`` and ``dE/da_ij = <X_i X_j>``, ``dE/db_ij = <Z_i Z_j>``.
    Errors are relative to the analytic value, floored at ``floor``.
    """
    sol = eigensolve(sys, which)
    ref = sol.statevector

    def energy_at(s):
        return track_eigenstate(s, ref).eigenvalue

    c = cost_expectation(sys, sol)
    fd_beta = _richardson(lambda b: energy_at(sys.with_beta(b)), sys.beta, step)
    xx, zz = pair_expectations(ref, sys.n_qubits)
    theta_errs = {}
    for key, family, exact in (("a", "xx", xx), ("b", "zz", zz)):
        for i, j in sys.pairs():
            fd = _richardson(
                lambda v: energy_at(sys.with_coupling(family, i, j, v)), getattr(sys, family)[i, j], step
            )
            theta_errs[f"{key}[{i},{j}]"] = _rel_err(fd, exact[i, j], floor)
    beta_err = _rel_err(fd_beta, c, floor)
    return {
        "index": which,
        "eigenvalue": sol.eigenvalue,
        "dE_dbeta_fd": fd_beta,
        "cost": c,
        "beta_rel_err": beta_err,
        "theta_rel_err": theta_errs,
        "max_rel_err": max([beta_err, *theta_errs.values()]),
        "residual": sol.residual,
        "norm": sol.norm,
    }


# ---------------------------------------------------------------------------
# measurement simulation and thermal free energy


def _hadamard_all(psi: np.ndarray, n: int) -> np.ndarray:
    had = np.array([[1.0, 1.0], [1.0, -1.0]]) / np.sqrt(2.0)
    t = psi.reshape((2,) * n)
    for q in range(n):
        t = np.moveaxis(np.tensordot(had, t, axes=(1, q)), 0, q)
    return t.reshape(-1)


def shot_estimate(sol: EigenSolution, basis: str, n_shots: int, seed: int = 0) -> dict:
    """Simulate projective measurement of every qubit in the X or Z basis.

    Returns per-pair means and standard errors of the products ``X_i X_j``
    (or ``Z_i Z_j``). The two families need separate preparations because
    the X and Z operators do not commute.
    """
    if basis not in ("X", "Z"):
        raise ValidationError("basis must be 'X' or 'Z'")
    if n_shots < 1:
        raise ValidationError("n_shots must be positive")
    psi = sol.statevector
    n = int(round(np.log2(psi.shape[0])))
    if 2**n != psi.shape[0]:
        raise DimensionError("statevector length is not a power of two")
    amp = _hadamard_all(psi, n) if basis == "X" else psi
    prob = np.abs(amp) ** 2
    prob = prob / prob.sum()
    rng = np.random.default_rng(seed)
    outcomes = rng.choice(prob.shape[0], size=n_shots, p=prob)
    signs = _z_signs(n)[outcomes]
    mean = (signs.T @ signs) / n_shots
    sq = mean  # products are +-1, so E[P^2] = 1
    var = np.clip(1.0 - sq**2, 0.0, None)
    se = np.sqrt(var / max(n_shots - 1, 1)) if n_shots > 1 else np.zeros_like(mean)
    np.fill_diagonal(mean, 0.0)
    np.fill_diagonal(se, 0.0)
    return {"basis": basis, "n_shots": n_shots, "mean": mean, "stderr": se}


def quantum_free_energy(sys: QuantumSystem, T: float) -> float:
    """``-T log Tr exp(-H/T)`` from the full spectrum."""
    if T <= 0:
        raise ValidationError("temperature must be positive")
    evals = np.linalg.eigvalsh(build_hamiltonian(sys))
    return float(-T * logsumexp(-evals / T))


# ---------------------------------------------------------------------------
# construction and serialization


def random_system(n_qubits: int, input_qubits, output_qubits, rng: np.random.Generator, scale: float = 1.0) -> QuantumSystem:
    def sym():
        m = np.triu(rng.uniform(-scale, scale, (n_qubits, n_qubits)), 1)
        return m + m.T

    return QuantumSystem(
        n_qubits, tuple(input_qubits), rng.uniform(-1, 1, len(input_qubits)),
        tuple(output_qubits), rng.uniform(-1, 1, len(output_qubits)), sym(), sym(),
    )


def _sparse(m: np.ndarray) -> list:
    n = m.shape[0]
    return [[i, j, float(m[i, j])] for i in range(n) for j in range(i + 1, n) if m[i, j] != 0.0]


def _dense(entries, n: int) -> np.ndarray:
    m = np.zeros((n, n))
    for i, j, v in entries:
        if i == j:
            raise ValidationError("couplings cannot be on the diagonal")
        m[i, j] = m[j, i] = v
    return m


def system_to_dict(sys: QuantumSystem) -> dict:
    return {
        "n_qubits": sys.n_qubits,
        "input_qubits": list(sys.input_qubits),
        "u": sys.u.tolist(),
        "output_qubits": list(sys.output_qubits),
        "d": sys.d.tolist(),
        "xx": _sparse(sys.xx),
        "zz": _sparse(sys.zz),
        "beta": sys.beta,
    }


def system_from_dict(d: dict) -> QuantumSystem:
    try:
        n = int(d["n_qubits"])
        return QuantumSystem(
            n, tuple(d["input_qubits"]), d.get("u", []), tuple(d["output_qubits"]), d.get("d", []),
            _dense(d.get("xx", []), n), _dense(d.get("zz", []), n), d.get("beta", 0.0),
        )
    except KeyError as exc:
        raise ValidationError(f"quantum system document missing field {exc}") from None


def dumps_system(sys: QuantumSystem) -> str:
    return json.dumps(system_to_dict(sys), indent=1) + "\n"


def loads_system(text: str) -> QuantumSystem:
    return system_from_dict(json.loads(text))
