import json
from itertools import permutations

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqprop_lab.deterministic import relax
from eqprop_lab.errors import DimensionError, UnsupportedActivationError, ValidationError
from eqprop_lab.network import (
    ClampContext,
    Network,
    SymTensor3,
    SymTensor4,
    activation_derivs,
    cost,
    derivative_tensors,
    dumps_network,
    energy,
    fourth_derivative,
    grad_theta,
    grad_z,
    hessian,
    layered_mask,
    loads_network,
    network_to_dict,
    third_derivative,
)
from helpers import central_diff, fd_grad_energy, fd_hessian, small_net


def two_node(w12=0.0, activation="tanh"):
    w = np.array([[0.0, w12], [w12, 0.0]])
    return Network(2, (0,), (1,), w, np.ones(2), activation)


# --- energy / cost -----------------------------------------------------------


def test_energy_decoupled():
    ctx = ClampContext([0.0], [0.0], alpha=0.0, beta=0.0)
    assert energy(two_node(), [1.0, 2.0], ctx) == pytest.approx(2.5, abs=1e-15)


def test_energy_input_clamp_vanishes_at_target():
    ctx = ClampContext([1.0], [0.0], alpha=1.0)
    assert energy(two_node(), [1.0, 2.0], ctx) == pytest.approx(2.5, abs=1e-15)


def test_energy_coupled_matches_high_precision():
    mpmath.mp.dps = 40
    ctx = ClampContext([0.0], [0.0], alpha=0.0)
    ref = mpmath.mpf("2.5") - mpmath.mpf("0.5") * mpmath.tanh(1) * mpmath.tanh(2)
    np.testing.assert_allclose(energy(two_node(0.5), [1.0, 2.0], ctx), float(ref), rtol=1e-15)


def test_energy_batch_matches_loop():
    net, ctx = small_net(5, seed=3)
    zs = np.random.default_rng(0).normal(size=(7, 5))
    np.testing.assert_allclose(energy(net, zs, ctx), [energy(net, z, ctx) for z in zs], rtol=1e-14)


def test_energy_dimension_mismatch():
    with pytest.raises(DimensionError):
        energy(two_node(), [1.0, 2.0, 3.0], ClampContext([0.0], [0.0]))
    with pytest.raises(DimensionError):
        energy(two_node(), [1.0, 2.0], ClampContext([0.0, 1.0], [0.0]))


@pytest.mark.parametrize(
    "z, d, expected",
    [((1.0, -1.0), (1.0, -1.0), 0.0), ((0.0,), (1.0,), 0.5), ((0.3, -0.7), (1.0, -1.0), 0.29)],
)
def test_cost_examples(z, d, expected):
    assert cost(np.array(z), d, range(len(z))) == pytest.approx(expected, abs=1e-15)


def test_cost_dimension_mismatch():
    with pytest.raises(DimensionError):
        cost(np.zeros(3), [1.0, 0.0], [2])


# --- first derivatives ---------------------------------------------------------


def test_grad_z_decoupled():
    np.testing.assert_array_equal(grad_z(two_node(), [1.0, 2.0], ClampContext([0.0], [0.0], alpha=0.0)), [1.0, 2.0])


def test_grad_z_vanishes_at_fixed_point():
    net, ctx = small_net(5, seed=1)
    fp = relax(net, np.zeros(5), ctx)
    assert fp.converged
    assert np.max(np.abs(grad_z(net, fp.z_bar, ctx))) <= 1e-10


@pytest.mark.parametrize("seed", range(3))
def test_grad_z_matches_finite_difference(seed):
    net, ctx = small_net(3, seed=seed)
    ctx = ctx.with_beta(0.7)
    z = np.random.default_rng(seed).normal(size=3)
    np.testing.assert_allclose(grad_z(net, z, ctx), fd_grad_energy(net, z, ctx), rtol=1e-6, atol=1e-9)


def test_grad_theta_zero_state():
    net, ctx = small_net(4)
    rep = grad_theta(net, np.zeros(4), ctx)
    np.testing.assert_array_equal(rep["W"], 0.0)


def test_grad_theta_two_node():
    rep = grad_theta(two_node(0.3), [1.0, 2.0], ClampContext([0.0], [0.0]))
    assert rep["W"][0, 1] == pytest.approx(-np.tanh(1) * np.tanh(2), rel=1e-15)
    np.testing.assert_allclose(rep["lambda"], [0.5, 2.0])


@pytest.mark.parametrize("seed", range(3))
def test_grad_theta_matches_finite_difference(seed):
    net, ctx = small_net(4, seed=seed)
    z = np.random.default_rng(seed + 10).normal(size=4)
    rep = grad_theta(net, z, ctx)
    h = 1e-5
    for i, j in net.pairs():
        w0 = net.weights[i, j]
        fd = (energy(net.with_weight(i, j, w0 + h), z, ctx) - energy(net.with_weight(i, j, w0 - h), z, ctx)) / (2 * h)
        assert abs(fd - rep["W"][i, j]) <= 1e-6 * max(abs(fd), 1e-3)
    for k in range(4):
        def e_of(v, k=k):
            lam = net.lam.copy()
            lam[k] = v
            return energy(net.with_params(lam=lam), z, ctx)
        fd = (e_of(net.lam[k] + h) - e_of(net.lam[k] - h)) / (2 * h)
        assert abs(fd - rep["lambda"][k]) <= 1e-6 * max(abs(fd), 1e-3)


@given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(0.01, 1.0))
@settings(max_examples=40, deadline=None)
def test_energy_affine_in_each_parameter(seed, z_scale, h):
    net, ctx = small_net(4, seed=seed)
    z = z_scale * np.random.default_rng(seed).normal(size=4)
    w0 = net.weights[0, 1]
    second = (energy(net.with_weight(0, 1, w0 + h), z, ctx) + energy(net.with_weight(0, 1, w0 - h), z, ctx)
              - 2 * energy(net, z, ctx))
    assert abs(second) < 1e-12


@given(st.integers(0, 10_000), st.permutations(range(5)))
@settings(max_examples=40, deadline=None)
def test_energy_relabeling_invariance(seed, perm):
    net, ctx = small_net(5, seed=seed)
    perm = np.array(perm)
    inv = np.argsort(perm)  # new label of old node k is inv[k]
    w = net.weights[np.ix_(perm, perm)]
    relabeled = Network(5, tuple(int(inv[i]) for i in net.input_nodes), tuple(int(inv[i]) for i in net.output_nodes),
                        w, net.lam[perm])
    z = np.random.default_rng(seed).normal(size=5)
    assert energy(relabeled, z[perm], ctx) == pytest.approx(energy(net, z, ctx), rel=1e-12, abs=1e-12)


# --- higher derivatives ----------------------------------------------------------


def test_tanh_derivatives_match_finite_differences():
    z = np.linspace(-2, 2, 9)
    d = activation_derivs("tanh", z, 4)
    h = 1e-5
    for k in range(4):
        fd = (activation_derivs("tanh", z + h, 4)[k] - activation_derivs("tanh", z - h, 4)[k]) / (2 * h)
        np.testing.assert_allclose(d[k + 1], fd, atol=1e-8)


def test_hessian_decoupled_is_identity():
    ctx = ClampContext([0.0], [0.0], alpha=0.0, beta=0.0)
    np.testing.assert_array_equal(hessian(two_node(), [0.3, -1.2], ctx), np.eye(2))


@pytest.mark.parametrize("seed", range(4))
def test_hessian_matches_finite_difference(seed):
    net, ctx = small_net(4, seed=seed)
    ctx = ctx.with_beta(0.4)
    z = np.random.default_rng(seed).normal(size=4)
    h = hessian(net, z, ctx)
    assert np.array_equal(h, h.T)
    np.testing.assert_allclose(h, fd_hessian(net, z, ctx), atol=1e-5)


@pytest.mark.parametrize("seed", range(4))
def test_third_and_fourth_derivatives_match_finite_differences(seed):
    net, ctx = small_net(4, seed=seed)
    z = np.random.default_rng(seed).normal(size=4)
    v3 = third_derivative(net, z).dense()
    fd3 = central_diff(lambda x: hessian(net, x, ctx), z, 1e-5)
    np.testing.assert_allclose(v3, fd3, atol=1e-4)
    v4 = fourth_derivative(net, z).dense()
    fd4 = central_diff(lambda x: third_derivative(net, x).dense(), z, 1e-5)
    np.testing.assert_allclose(v4, fd4, atol=1e-4)


def test_finite_difference_error_scales_quadratically():
    net, ctx = small_net(4, seed=7)
    z = np.random.default_rng(7).normal(size=4)
    exact = hessian(net, z, ctx)
    e1 = np.max(np.abs(fd_hessian(net, z, ctx, 2e-2) - exact))
    e2 = np.max(np.abs(fd_hessian(net, z, ctx, 1e-2) - exact))
    assert 3.0 < e1 / e2 < 5.0
    for h in (1e-4, 1e-5):
        np.testing.assert_allclose(fd_hessian(net, z, ctx, h), exact, atol=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_tensors_permutation_symmetric(seed):
    net, ctx = small_net(4, seed=seed)
    z = np.random.default_rng(seed).normal(size=4)
    v3 = third_derivative(net, z).dense()
    v4 = fourth_derivative(net, z).dense()
    for p in permutations(range(3)):
        np.testing.assert_array_equal(v3, v3.transpose(p))
    for p in permutations(range(4)):
        np.testing.assert_array_equal(v4, v4.transpose(p))


def test_sparse_contractions_match_dense():
    rng = np.random.default_rng(2)
    n = 5
    v3 = SymTensor3(rng.normal(size=n), rng.normal(size=(n, n)))
    v4 = SymTensor4(rng.normal(size=n), rng.normal(size=(n, n)), (lambda a: a + a.T)(rng.normal(size=(n, n))))
    x = rng.normal(size=n)
    s = rng.normal(size=(n, n))
    s = s + s.T
    d3, d4 = v3.dense(), v4.dense()
    np.testing.assert_allclose(v3.contract_vec(x), np.einsum("abc,c->ab", d3, x), atol=1e-12)
    np.testing.assert_allclose(v3.contract_mat(s), np.einsum("abc,ab->c", d3, s), atol=1e-12)
    np.testing.assert_allclose(v4.contract_vec(x).dense(), np.einsum("abcd,d->abc", d4, x), atol=1e-12)


def test_hessian_positive_definite_at_relaxed_minimum():
    for seed in range(5):
        net, ctx = small_net(6, seed=seed)
        fp = relax(net, np.zeros(6), ctx)
        assert fp.converged
        assert np.linalg.eigvalsh(hessian(net, fp.z_bar, ctx))[0] > 0


def test_as_printed_variant_drops_lambda_on_clamped_nodes():
    net, ctx = small_net(5, seed=4)
    z = np.random.default_rng(4).normal(size=5)
    diff = hessian(net, z, ctx, "exact") - hessian(net, z, ctx, "as-printed")
    expected = np.zeros(5)
    clamped = list(net.input_nodes) + list(net.output_nodes)
    expected[clamped] = net.lam[clamped]
    np.testing.assert_array_equal(diff, np.diag(expected))


def test_hard_sigmoid_rejects_high_order():
    net = Network(2, (0,), (1,), np.zeros((2, 2)), np.ones(2), "hard-sigmoid")
    ctx = ClampContext([0.0], [0.0])
    derivative_tensors(net, [0.2, 0.5], ctx, order=2)
    with pytest.raises(UnsupportedActivationError):
        derivative_tensors(net, [0.2, 0.5], ctx, order=3)


# --- network invariants and serialization -----------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"weights": np.array([[0, 1.0], [0.5, 0]])},
        {"weights": np.array([[1.0, 0], [0, 0]])},
        {"lam": np.array([1.0, 0.0])},
        {"output_nodes": (0,)},
        {"input_nodes": ()},
        {"output_nodes": (2,)},
    ],
)
def test_network_invariants_rejected(kwargs):
    base = dict(n_nodes=2, input_nodes=(0,), output_nodes=(1,), weights=np.zeros((2, 2)), lam=np.ones(2))
    base.update(kwargs)
    with pytest.raises(ValidationError):
        Network(**base)


def test_targets_outside_unit_interval_rejected():
    with pytest.raises(ValidationError):
        ClampContext([0.0], [1.5])


def test_serialization_round_trip():
    net, _ = small_net(5, seed=9)
    text = dumps_network(net)
    again = loads_network(text)
    assert dumps_network(again) == text
    np.testing.assert_array_equal(again.weights, net.weights)
    assert set(json.loads(text)) == {"n_nodes", "input_nodes", "output_nodes", "weights", "lambda", "activation"}


def test_serialization_keeps_mask():
    mask = layered_mask([2, 2, 1])
    w = np.where(mask, 0.3, 0.0)
    net = Network(5, (0, 1), (4,), w, np.ones(5), mask=mask)
    again = loads_network(dumps_network(net))
    np.testing.assert_array_equal(again.mask, net.mask)
    assert again.pairs() == net.pairs()


def test_reader_validates_symmetry():
    d = network_to_dict(small_net(3)[0])
    d["weights"][0][1] += 0.1
    with pytest.raises(ValidationError):
        loads_network(json.dumps(d))
