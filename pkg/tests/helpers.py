"""Shared fixtures and independent numerical oracles for the test-suite."""
from __future__ import annotations

import numpy as np

from eqprop_lab.network import ClampContext, Network, energy, grad_z, random_network


def rel_err(est, oracle, floor: float = 1e-8) -> np.ndarray:
    est, oracle = np.asarray(est, float), np.asarray(oracle, float)
    return np.abs(est - oracle) / np.maximum(np.abs(oracle), floor)


def central_diff(fn, x, h: float) -> np.ndarray:
    """Central difference of ``fn`` (scalar or array valued) in every coordinate of ``x``."""
    x = np.asarray(x, float)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def protocol_net(i: int):
    """Random net ``i`` of the acceptance protocol: 4..8 nodes, inputs {0, 1}, last node output."""
    rng = np.random.default_rng(1000 + i)
    n = 4 + i % 5
    net = random_network(n, (0, 1), (n - 1,), rng, scale=0.5)
    ctx = ClampContext(rng.uniform(-1, 1, 2), [rng.choice([-1.0, 1.0])], alpha=1.0)
    return net, ctx


def small_net(n: int = 4, seed: int = 0, activation: str = "tanh", scale: float = 0.5):
    rng = np.random.default_rng(seed)
    net = random_network(n, (0,), (n - 1,), rng, scale=scale, activation=activation)
    ctx = ClampContext(rng.uniform(-1, 1, 1), [rng.uniform(-1, 1)], alpha=1.0)
    return net, ctx


def fd_hessian(net: Network, z, ctx, h: float = 1e-5) -> np.ndarray:
    return central_diff(lambda x: grad_z(net, x, ctx), z, h)


def fd_grad_energy(net: Network, z, ctx, h: float = 1e-5) -> np.ndarray:
    return central_diff(lambda x: energy(net, x, ctx), z, h)
