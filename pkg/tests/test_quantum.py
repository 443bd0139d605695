import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqprop_lab.errors import DegenerateEigenstateError, EigenstateTrackingError, ValidationError
from eqprop_lab.quantum import (
    QuantumSystem,
    build_hamiltonian,
    cost_expectation,
    cost_operator,
    dumps_system,
    eigensolve,
    expectation,
    fd_quantum_cost_gradient,
    loads_system,
    pair_expectations,
    pauli_string,
    perturbation_identity_check,
    qep_gradient,
    quantum_free_energy,
    random_system,
    shot_estimate,
    system_to_dict,
    track_eigenstate,
)
from helpers import rel_err


def system(n, ins=(), u=(), outs=(), d=(), xx=None, zz=None, beta=0.0):
    xx = np.zeros((n, n)) if xx is None else xx
    zz = np.zeros((n, n)) if zz is None else zz
    return QuantumSystem(n, tuple(ins), np.array(u, float), tuple(outs), np.array(d, float), xx, zz, beta)


def sym(n, entries):
    m = np.zeros((n, n))
    for (i, j), v in entries.items():
        m[i, j] = m[j, i] = v
    return m


def kron_hamiltonian(s: QuantumSystem) -> np.ndarray:
    n = s.n_qubits
    h = np.zeros((2**n, 2**n), complex)
    for q, u in zip(s.input_qubits, s.u):
        h += u * pauli_string(n, {q: "Z"})
    for i, j in s.pairs():
        h += s.xx[i, j] * pauli_string(n, {i: "X", j: "X"}) + s.zz[i, j] * pauli_string(n, {i: "Z", j: "Z"})
    for q, d in zip(s.output_qubits, s.d):
        r = pauli_string(n, {q: "Z"}) - d * np.eye(2**n)
        h += 0.5 * s.beta * r @ r
    return h


# --- Hamiltonian -------------------------------------------------------------------


def test_single_field():
    np.testing.assert_array_equal(build_hamiltonian(system(1, (0,), (1.0,))), np.diag([1.0, -1.0]))


def test_output_clamp_square():
    np.testing.assert_allclose(build_hamiltonian(system(1, outs=(0,), d=(1.0,), beta=2.0)), np.diag([0.0, 4.0]))


def test_xx_coupling_spectrum():
    h = build_hamiltonian(system(2, xx=sym(2, {(0, 1): 1.0})))
    np.testing.assert_array_equal(h, np.kron(pauli_string(1, {0: "X"}), pauli_string(1, {0: "X"})))
    np.testing.assert_allclose(np.linalg.eigvalsh(h), [-1, -1, 1, 1])


@given(st.integers(0, 10_000), st.floats(-1, 1))
@settings(max_examples=25, deadline=None)
def test_hamiltonian_matches_kronecker_form(seed, beta):
    s = random_system(4, (0, 1), (3,), np.random.default_rng(seed)).with_beta(beta)
    h = build_hamiltonian(s)
    np.testing.assert_allclose(h, kron_hamiltonian(s).real, atol=1e-13)
    assert np.array_equal(h, h.conj().T)


def test_memory_budget_enforced():
    with pytest.raises(ValidationError):
        system(13)


@pytest.mark.parametrize(
    "kwargs",
    [dict(ins=(0,), u=(1.0,), outs=(0,), d=(1.0,)), dict(outs=(3,), d=(1.0,)), dict(outs=(0,), d=(1.5,))],
)
def test_system_invariants(kwargs):
    with pytest.raises(ValidationError):
        system(2, **kwargs)


def test_coupling_diagonal_rejected():
    m = np.eye(2)
    with pytest.raises(ValidationError):
        system(2, zz=m)


# --- eigenstates -------------------------------------------------------------------


def test_ground_state_of_z():
    sol = eigensolve(system(1, (0,), (1.0,)))
    assert sol.eigenvalue == pytest.approx(-1.0)
    assert abs(abs(sol.statevector[1]) - 1) < 1e-15
    assert expectation(sol, pauli_string(1, {0: "Z"})) == pytest.approx(-1.0)
    assert expectation(sol, np.eye(2)) == pytest.approx(1.0)


def test_degenerate_ground_state_raises():
    with pytest.raises(DegenerateEigenstateError) as info:
        eigensolve(system(2, zz=sym(2, {(0, 1): 0.7})))
    assert len(info.value.eigenvalues) == 2
    assert info.value.eigenvalues[0] == pytest.approx(info.value.eigenvalues[1])


@pytest.mark.parametrize("seed", range(5))
def test_residual_norm_and_gaps(seed):
    s = random_system(4, (0, 1), (3,), np.random.default_rng(seed))
    for k in (0, 1, 5):
        sol = eigensolve(s, k)
        assert sol.residual < 1e-10 * sol.norm
        assert abs(np.linalg.norm(sol.statevector) - 1) < 1e-12
        assert sol.gap_below >= 0 and sol.gap_above >= 0
        assert np.all(np.diff(sol.spectrum) >= 0)


def test_cost_operator_expectation():
    s = system(1, (0,), (1.0,), outs=(), d=())
    s1 = QuantumSystem(1, (), [], (0,), [1.0], np.zeros((1, 1)), np.zeros((1, 1)))
    # ground state of H = Z is |1>, whose output cost is (−1 − 1)^2 / 2
    sol = eigensolve(s)
    assert expectation(sol, cost_operator(s1)) == pytest.approx(2.0)
    assert cost_expectation(s1, sol) == pytest.approx(2.0)


def test_non_hermitian_observable_rejected():
    sol = eigensolve(random_system(2, (0,), (1,), np.random.default_rng(0)))
    with pytest.raises(ValidationError):
        expectation(sol, 1j * np.eye(4))


def test_pair_expectations_match_operators():
    s = random_system(3, (0,), (2,), np.random.default_rng(4))
    sol = eigensolve(s)
    xx, zz = pair_expectations(sol.statevector, 3)
    for i, j in s.pairs():
        assert xx[i, j] == pytest.approx(expectation(sol, pauli_string(3, {i: "X", j: "X"})), abs=1e-13)
        assert zz[i, j] == pytest.approx(expectation(sol, pauli_string(3, {i: "Z", j: "Z"})), abs=1e-13)


# --- gradients ------------------------------------------------------------------------


def test_zero_xx_couplings_give_zero_xx_gradient_between_non_outputs():
    # no XX couplings: H is diagonal, the eigenstate is a basis state and stays one under nudging
    s = system(4, (0,), (0.8,), (3,), (0.5,), zz=sym(4, {(0, 1): 0.3, (1, 2): -0.45, (2, 3): 0.6, (0, 2): 0.2}))
    g = qep_gradient(s, 1e-4)
    fd = fd_quantum_cost_gradient(s)
    for i, j in [(0, 1), (0, 2), (1, 2)]:
        assert abs(g["a"][i, j]) < 1e-10
        assert abs(fd["a"][i, j]) < 1e-10


def test_all_zero_couplings_are_degenerate():
    with pytest.raises(DegenerateEigenstateError):
        qep_gradient(system(3, (0,), (1.0,), (2,), (1.0,)), 1e-4)


@pytest.mark.parametrize("seed", range(3))
def test_qep_matches_finite_difference(seed):
    s = random_system(3, (0,), (2,), np.random.default_rng(100 + seed))
    g = qep_gradient(s, 1e-4)
    fd = fd_quantum_cost_gradient(s)
    assert np.max(rel_err(g.flat(), fd.flat())) < 1e-3


def test_qep_bias_scales_quadratically():
    s = random_system(3, (0,), (2,), np.random.default_rng(7))
    fd = fd_quantum_cost_gradient(s).flat()
    e = [np.max(np.abs(qep_gradient(s, db).flat() - fd)) for db in (1e-2, 1e-3)]
    assert 70 < e[0] / e[1] < 130


def test_qep_requires_free_system():
    s = random_system(3, (0,), (2,), np.random.default_rng(1))
    with pytest.raises(ValidationError):
        qep_gradient(s.with_beta(0.1), 1e-3)


def test_tracking_failure_raises():
    # the singlet ground state of XX + 0.3 ZZ is pushed towards |10> by a large nudge: overlap ~ 1/2
    s = system(2, outs=(1,), d=(1.0,), xx=sym(2, {(0, 1): 1.0}), zz=sym(2, {(0, 1): 0.3}))
    ref = eigensolve(s).statevector
    with pytest.raises(EigenstateTrackingError):
        track_eigenstate(s.with_beta(50.0), ref)
    with pytest.raises(EigenstateTrackingError):
        qep_gradient(s, 50.0)
    assert track_eigenstate(s.with_beta(1e-3), ref).index == 0


def test_perturbation_identities_one_qubit():
    s = QuantumSystem(2, (0,), [0.7], (1,), [-0.4], sym(2, {(0, 1): 0.3}), sym(2, {(0, 1): 0.1}))
    rep = perturbation_identity_check(s)
    assert rep["beta_rel_err"] < 1e-8


@pytest.mark.parametrize("which", [0, 1])
def test_perturbation_identities_random(which):
    s = random_system(3, (0,), (2,), np.random.default_rng(31))
    rep = perturbation_identity_check(s, which)
    assert rep["max_rel_err"] < 1e-8


def test_excited_state_two_qubits():
    s = random_system(2, (0,), (1,), np.random.default_rng(3))
    assert perturbation_identity_check(s, 1)["max_rel_err"] < 1e-8


def test_mixed_partials_commute():
    s = random_system(3, (0,), (2,), np.random.default_rng(8))
    h = 1e-3

    def E(a, b):
        return eigensolve(s.with_coupling("xx", 0, 1, a).with_beta(b)).eigenvalue

    a0 = s.xx[0, 1]
    d_theta_d_beta = ((E(a0 + h, h) - E(a0 + h, -h)) - (E(a0 - h, h) - E(a0 - h, -h))) / (4 * h * h)
    d_beta_d_theta = ((E(a0 + h, h) - E(a0 - h, h)) - (E(a0 + h, -h) - E(a0 - h, -h))) / (4 * h * h)
    assert abs(d_theta_d_beta - d_beta_d_theta) <= 1e-5 * abs(d_beta_d_theta)
    # both equal the beta-derivative of <X0 X1>
    s_p, s_m = s.with_beta(h), s.with_beta(-h)
    xp = pair_expectations(eigensolve(s_p).statevector, 3)[0][0, 1]
    xm = pair_expectations(eigensolve(s_m).statevector, 3)[0][0, 1]
    assert (xp - xm) / (2 * h) == pytest.approx(d_beta_d_theta, rel=1e-4)


# --- shots and free energy ------------------------------------------------------------------


def _state(vec):
    from eqprop_lab.quantum import EigenSolution

    v = np.asarray(vec, complex)
    return EigenSolution(0.0, v / np.linalg.norm(v), 0, np.inf, np.inf, 0.0, np.zeros(1), 1.0)


def test_shots_on_all_zero_state():
    v = np.zeros(8)
    v[0] = 1.0
    r = shot_estimate(_state(v), "Z", 1000, seed=0)
    iu = np.triu_indices(3, 1)
    np.testing.assert_array_equal(r["mean"][iu], 1.0)
    np.testing.assert_array_equal(r["stderr"][iu], 0.0)


def test_shots_on_uniform_superposition():
    r = shot_estimate(_state(np.ones(8)), "X", 1000, seed=0)
    np.testing.assert_allclose(r["mean"][np.triu_indices(3, 1)], 1.0, atol=1e-12)


def test_shots_within_four_se():
    s = random_system(3, (0,), (2,), np.random.default_rng(12))
    sol = eigensolve(s)
    xx, zz = pair_expectations(sol.statevector, 3)
    iu = np.triu_indices(3, 1)
    for basis, exact in (("X", xx), ("Z", zz)):
        r = shot_estimate(sol, basis, 100_000, seed=5)
        assert np.all(np.abs(r["mean"][iu] - exact[iu]) < 4 * r["stderr"][iu])


def test_shot_mean_unbiased_over_seeds():
    s = random_system(3, (0,), (2,), np.random.default_rng(13))
    sol = eigensolve(s)
    xx, _ = pair_expectations(sol.statevector, 3)
    iu = np.triu_indices(3, 1)
    runs = np.array([shot_estimate(sol, "X", 2000, seed=k)["mean"][iu] for k in range(50)])
    se = runs.std(axis=0, ddof=1) / np.sqrt(50)
    assert np.all(np.abs(runs.mean(axis=0) - xx[iu]) < 4 * se)


def test_shot_input_checks():
    sol = eigensolve(random_system(2, (0,), (1,), np.random.default_rng(0)))
    with pytest.raises(ValidationError):
        shot_estimate(sol, "Y", 10)
    with pytest.raises(ValidationError):
        shot_estimate(sol, "X", 0)


def test_free_energy_two_level():
    s = system(1, (0,), (1.0,))
    assert quantum_free_energy(s, 1.0) == pytest.approx(-np.log(np.e + np.exp(-1)), rel=1e-14)
    T = 1e4
    assert quantum_free_energy(s, T) == pytest.approx(-T * np.log(2), abs=1e-3)
    assert np.isfinite(quantum_free_energy(s, 1e-4))


def test_free_energy_low_t_beta_derivative_is_ground_cost():
    s = random_system(3, (0,), (2,), np.random.default_rng(40))
    h, T = 1e-4, 0.01
    fd = (quantum_free_energy(s.with_beta(h), T) - quantum_free_energy(s.with_beta(-h), T)) / (2 * h)
    rep = perturbation_identity_check(s)
    gap = eigensolve(s).gap_above
    assert gap / T > 20
    assert fd == pytest.approx(rep["cost"], rel=1e-6)


def test_serialization_round_trip():
    s = random_system(4, (0, 1), (3,), np.random.default_rng(2)).with_beta(0.25)
    text = dumps_system(s)
    again = loads_system(text)
    assert dumps_system(again) == text
    assert system_to_dict(again)["xx"][0][:2] == [0, 1]
