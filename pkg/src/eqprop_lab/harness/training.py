"""Training loop shared by the three regimes.

Metrics: record ``e`` describes the parameters after ``e`` epochs (record 0
is the initial model). Seeds for epoch ``e``, example ``k`` come from
``derive_seed(master, e, k)`` so an interrupted run resumes bit-for-bit.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import deterministic as det
from .. import quantum as qm
from .. import thermal as th
from ..errors import NumericalError, ValidationError
from ..network import ClampContext, Network, layered_mask, load_network, loads_network, dumps_network, network_from_dict, random_network
from ..report import GradientReport, mean_reports
from .config import RunConfig
from .datasets import Example, make_dataset, read_csv

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
STATE_FILE = "state.json"


@dataclass
class MetricsRecord:
    epoch: int
    mean_train_cost: float
    accuracy: float
    grad_norm: float
    wall_ms: int = 0
    estimator: dict = field(default_factory=dict)

    def to_json(self) -> str:
        # wall-clock time lives in a separate file so metrics stay reproducible
        d = {
            "epoch": self.epoch,
            "mean_train_cost": self.mean_train_cost,
            "accuracy": self.accuracy,
            "grad_norm": self.grad_norm,
            "estimator": self.estimator,
        }
        return json.dumps(d, sort_keys=True)


def predict(value: float) -> float:
    """Sign readout with ties going to +1."""
    return 1.0 if value >= 0 else -1.0


# ---------------------------------------------------------------------------
# regimes


class ClassicalRegime:
    def __init__(self, cfg: RunConfig, n_inputs: int):
        self.cfg = cfg
        self.bias = cfg.architecture.bias_input
        self.n_inputs = n_inputs

    def clamp(self, ex: Example) -> ClampContext:
        u = np.concatenate([ex.u, [1.0]]) if self.bias else ex.u
        return ClampContext(u, ex.d, alpha=self.cfg.hyper.alpha)

    def initial(self, n_outputs: int) -> Network:
        cfg = self.cfg
        if cfg.network is not None:
            return network_from_dict(cfg.network)
        if cfg.network_path is not None:
            return load_network(cfg.network_path)
        arch = cfg.architecture
        n_in = self.n_inputs + int(self.bias)
        n = n_in + arch.hidden + n_outputs
        mask = None
        if arch.topology == "layered":
            mask = layered_mask([n_in, arch.hidden, n_outputs] if arch.hidden else [n_in, n_outputs])
        rng = np.random.default_rng(th.derive_seed(cfg.hyper.seed, 2**32 - 1))
        return random_network(
            n, tuple(range(n_in)), tuple(range(n - n_outputs, n)), rng,
            scale=arch.init_scale, activation=arch.activation, lam=arch.lam, mask=mask,
        )

    def update(self, model: Network, grads: GradientReport, tau: float) -> Network:
        if not self.cfg.architecture.train_lambda:
            grads = GradientReport({"W": grads.grads["W"]}, grads.method)
        return det.update_params(model, grads, tau)

    def dumps(self, model: Network) -> str:
        return dumps_network(model)

    def loads(self, text: str) -> Network:
        return loads_network(text)

    def check_input_width(self, model: Network, examples: list[Example]) -> None:
        want = len(model.input_nodes) - int(self.bias)
        if any(ex.u.size != want for ex in examples):
            raise ValidationError(f"network expects {want} task inputs")
        if any(ex.d.size != len(model.output_nodes) for ex in examples):
            raise ValidationError("task output width does not match the network")


class DeterministicRegime(ClassicalRegime):
    name = "deterministic"

    def evaluate(self, model, ex, seed):
        fp = det.relax(model, np.zeros(model.n_nodes), self.clamp(ex), self.cfg.solver)
        if not fp.converged:
            log.warning("free phase did not converge (residual %.3g)", fp.residual)
        out = fp.z_bar[list(model.output_nodes)]
        return float(0.5 * np.sum((out - ex.d) ** 2)), out

    def gradient(self, model, ex, seed):
        return det.ep_gradient_symmetric(model, self.clamp(ex), self.cfg.hyper.delta_beta, self.cfg.solver)


class ThermalRegime(ClassicalRegime):
    name = "thermal"

    def __init__(self, cfg, n_inputs):
        super().__init__(cfg, n_inputs)
        self._cache: dict = {}

    def params(self, seed: int) -> th.SamplerParams:
        s = self.cfg.sampler
        return th.SamplerParams(
            dt=s.dt, temperature=self.cfg.hyper.temperature, burn_in=int(round(s.burn_in_time / s.dt)),
            n_samples=s.n_samples, thin=s.thin, seed=seed, n_chains=s.n_chains,
        )

    def free_samples(self, model, ex, seed) -> th.SampleSet:
        # evaluation and the unclamped estimators share one chain per (model, example, seed)
        key = (id(model), ex.u.tobytes(), ex.d.tobytes(), seed)
        if key not in self._cache:
            if len(self._cache) > 64:
                self._cache.clear()
            ctx = self.clamp(ex)
            start = th._free_start(model, ctx, None)
            self._cache[key] = (model, th.langevin_chain(model, ctx, self.params(seed), start))
        return self._cache[key][1]

    def evaluate(self, model, ex, seed):
        s = self.free_samples(model, ex, seed)
        outs = list(model.output_nodes)
        flat = s.flat
        cost = float(np.mean(0.5 * np.sum((flat[:, outs] - ex.d) ** 2, axis=1)))
        return cost, flat[:, outs].mean(axis=0)

    def gradient(self, model, ex, seed):
        s = self.cfg.sampler
        if s.estimator == "covariance":
            return th.covariance_from_samples(self.free_samples(model, ex, seed), model)
        if s.estimator == "reweighted":
            return th.reweighted_from_samples(self.free_samples(model, ex, seed), model, s.beta_probe)
        return th.grad_clamped_thermal(model, self.clamp(ex), self.cfg.hyper.delta_beta, self.params(seed))


class QuantumRegime:
    name = "quantum"

    def __init__(self, cfg: RunConfig, n_inputs: int):
        self.cfg = cfg
        self.bias = cfg.architecture.bias_input
        self.n_inputs = n_inputs

    def fields(self, ex: Example) -> np.ndarray:
        return np.concatenate([ex.u, [1.0]]) if self.bias else ex.u

    def system(self, model: qm.QuantumSystem, ex: Example) -> qm.QuantumSystem:
        from dataclasses import replace

        return replace(model, u=self.fields(ex), d=ex.d, beta=0.0)

    def initial(self, n_outputs: int) -> qm.QuantumSystem:
        cfg = self.cfg
        if cfg.quantum is not None:
            return qm.system_from_dict(cfg.quantum)
        if cfg.quantum_path is not None:
            return qm.loads_system(Path(cfg.quantum_path).read_text())
        arch = cfg.architecture
        n_in = self.n_inputs + int(self.bias)
        n = n_in + arch.hidden + n_outputs
        rng = np.random.default_rng(th.derive_seed(cfg.hyper.seed, 2**32 - 1))
        return qm.random_system(n, range(n_in), range(n - n_outputs, n), rng, scale=arch.init_scale)

    def evaluate(self, model, ex, seed):
        sys = self.system(model, ex)
        sol = qm.eigensolve(sys, self.cfg.which)
        return qm.cost_expectation(sys, sol), qm.output_magnetisation(sys, sol)

    def gradient(self, model, ex, seed):
        return qm.qep_gradient(self.system(model, ex), self.cfg.hyper.delta_beta, self.cfg.which)

    def update(self, model, grads: GradientReport, tau: float):
        from dataclasses import replace

        new = {}
        for key, family in (("a", "xx"), ("b", "zz")):
            step = tau * np.triu(grads.grads[key], 1)
            new[family] = getattr(model, family) - step - step.T
        return replace(model, **new)

    def dumps(self, model) -> str:
        return qm.dumps_system(model)

    def loads(self, text: str):
        return qm.loads_system(text)

    def check_input_width(self, model, examples) -> None:
        want = len(model.input_qubits) - int(self.bias)
        if any(ex.u.size != want for ex in examples):
            raise ValidationError(f"quantum system expects {want} task inputs")


def make_regime(cfg: RunConfig, n_inputs: int):
    return {"deterministic": DeterministicRegime, "thermal": ThermalRegime, "quantum": QuantumRegime}[cfg.regime](
        cfg, n_inputs
    )


def load_examples(cfg: RunConfig) -> list[Example]:
    if cfg.data_path is not None:
        with open(cfg.data_path, newline="") as fh:
            return read_csv(fh)
    return make_dataset(cfg.task, cfg.n_examples, cfg.hyper.seed)


def setup(cfg: RunConfig):
    examples = load_examples(cfg)
    if not examples:
        raise ValidationError("empty training set")
    regime = make_regime(cfg, examples[0].u.size)
    model = regime.initial(examples[0].d.size)
    regime.check_input_width(model, examples)
    return regime, model, examples


# ---------------------------------------------------------------------------
# loop


def evaluate_model(regime, model, examples, epoch: int, master: int):
    costs, correct = [], 0
    for k, ex in enumerate(examples):
        c, out = regime.evaluate(model, ex, th.derive_seed(master, epoch, k))
        costs.append(c)
        correct += int(all(predict(o) == t for o, t in zip(np.atleast_1d(out), ex.d)))
    return float(np.mean(costs)), correct / len(examples)


def _batches(n: int, batch_size: int, master: int, epoch: int) -> list[np.ndarray]:
    if batch_size == 0 or batch_size >= n:
        return [np.arange(n)]
    order = np.random.default_rng(th.derive_seed(master, epoch, 2**32)).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    model: object
    records: list[MetricsRecord]
    out_dir: Path | None


def train(cfg: RunConfig, out_dir=None, resume: bool = False, on_epoch=None, write: bool = True) -> TrainResult:
    """Run ``cfg.hyper.epochs`` epochs, writing metrics and checkpoints under ``out_dir``.

    ``on_epoch(epoch, model)`` is called after each epoch's update. On
    ``KeyboardInterrupt`` the last completed epoch is checkpointed before
    re-raising; ``resume=True`` picks up from that checkpoint.
    """
    regime, model, examples = setup(cfg)
    hyper = cfg.hyper
    master = hyper.seed
    out = Path(out_dir if out_dir is not None else cfg.out_dir) if write else None
    start = 0
    records: list[MetricsRecord] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        state_path = out / STATE_FILE
        if resume and state_path.exists():
            state = json.loads(state_path.read_text())
            if state.get("config") != cfg.to_dict():
                raise ValidationError("checkpoint was written by a different configuration")
            start = int(state["epoch"])
            model = regime.loads((out / CHECKPOINT_FILE).read_text())
            records = _read_metrics(out / METRICS_FILE, upto=start)
        _write_metrics(out, records)

    def checkpoint(epoch_done: int):
        if out is None:
            return
        (out / CHECKPOINT_FILE).write_text(regime.dumps(model))
        (out / STATE_FILE).write_text(json.dumps({"epoch": epoch_done, "config": cfg.to_dict()}, indent=1) + "\n")

    def emit(rec: MetricsRecord):
        records.append(rec)
        if out is not None:
            with open(out / METRICS_FILE, "a") as fh:
                fh.write(rec.to_json() + "\n")
            with open(out / TIMING_FILE, "a") as fh:
                fh.write(json.dumps({"epoch": rec.epoch, "wall_ms": rec.wall_ms}) + "\n")

    completed = start
    try:
        for epoch in range(start, hyper.epochs + 1):
            t0 = time.perf_counter()
            cost, acc = evaluate_model(regime, model, examples, epoch, master)
            batches = _batches(len(examples), hyper.batch_size, master, epoch)
            norms, new_model, method = [], model, None
            for idx in batches:
                try:
                    g = mean_reports(
                        [regime.gradient(new_model, examples[k], th.derive_seed(master, epoch, int(k))) for k in idx]
                    )
                except NumericalError as exc:
                    raise type(exc)(f"epoch {epoch}: {exc}") from exc
                norms.append(g.norm())
                method = g.method
                if epoch < hyper.epochs:
                    new_model = regime.update(new_model, g, hyper.tau)
            est = {"method": method, "n_batches": len(batches)}
            if cfg.regime == "thermal":
                est["n_samples"] = cfg.sampler.n_samples
                est["temperature"] = hyper.temperature
            else:
                est["delta_beta"] = hyper.delta_beta
            emit(MetricsRecord(epoch, cost, acc, float(np.mean(norms)),
                               int((time.perf_counter() - t0) * 1000), est))
            if epoch == hyper.epochs:
                break
            model, completed = new_model, epoch + 1
            if on_epoch is not None:
                on_epoch(completed, model)
    except KeyboardInterrupt:
        checkpoint(completed)
        raise
    checkpoint(hyper.epochs)
    return TrainResult(model, records, out)


def _write_metrics(out: Path, records: list[MetricsRecord]) -> None:
    with open(out / METRICS_FILE, "w") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    with open(out / TIMING_FILE, "w") as fh:
        for r in records:
            fh.write(json.dumps({"epoch": r.epoch, "wall_ms": r.wall_ms}) + "\n")


def _read_metrics(path: Path, upto: int) -> list[MetricsRecord]:
    recs = []
    if not path.exists():
        return recs
    for line in path.read_text().splitlines():
        d = json.loads(line)
        if d["epoch"] < upto:
            recs.append(MetricsRecord(d["epoch"], d["mean_train_cost"], d["accuracy"], d["grad_norm"], 0, d["estimator"]))
    return recs


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
