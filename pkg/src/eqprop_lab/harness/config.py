"""Run configuration, read from JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..deterministic import SolverParams
from ..errors import ValidationError
from .datasets import TASKS

REGIMES = ("deterministic", "thermal", "quantum")
THERMAL_ESTIMATORS = ("covariance", "clamped", "reweighted")


@dataclass(frozen=True)
class Hyper:
    tau: float = 0.05
    delta_beta: float = 1e-3
    temperature: float = 0.05
    epochs: int = 200
    batch_size: int = 0  # 0 means the whole training set
    seed: int = 0
    alpha: float = 1.0


@dataclass(frozen=True)
class Architecture:
    """Used when no explicit network / quantum system is supplied."""

    hidden: int = 4
    activation: str = "tanh"
    init_scale: float = 0.5
    lam: float = 1.0
    bias_input: bool = True  # extra input clamped at +1
    topology: str = "layered"  # or "full"
    train_lambda: bool = True


@dataclass(frozen=True)
class SamplerConfig:
    dt: float = 1e-2
    burn_in_time: float = 20.0
    n_samples: int = 100_000
    thin: int = 10
    n_chains: int = 100
    estimator: str = "covariance"
    beta_probe: float = 0.05


@dataclass(frozen=True)
class RunConfig:
    regime: str = "deterministic"
    task: str = "xor"
    n_examples: int = 0
    data_path: str | None = None
    network: dict | None = None
    network_path: str | None = None
    quantum: dict | None = None
    quantum_path: str | None = None
    architecture: Architecture = field(default_factory=Architecture)
    hyper: Hyper = field(default_factory=Hyper)
    solver: SolverParams = field(default_factory=SolverParams)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    which: int = 0
    gradcheck_tol: float = 1e-3
    gradcheck_example: int = 0
    temperatures: tuple = (0.1, 0.05, 0.025)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValidationError(f"regime must be one of {REGIMES}")
        if self.task not in TASKS:
            raise ValidationError(f"task must be one of {TASKS}")
        if self.sampler.estimator not in THERMAL_ESTIMATORS:
            raise ValidationError(f"thermal estimator must be one of {THERMAL_ESTIMATORS}")
        if self.architecture.topology not in ("layered", "full"):
            raise ValidationError("topology must be 'layered' or 'full'")
        h = self.hyper
        if h.epochs < 0 or h.batch_size < 0 or h.tau < 0 or h.delta_beta <= 0 or h.temperature <= 0:
            raise ValidationError("epochs, batch_size, tau must be >= 0; delta_beta, temperature > 0")
        for p in (self.data_path, self.network_path, self.quantum_path):
            if p is not None and not Path(p).is_file():
                raise ValidationError(f"referenced file {p} does not exist")

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        d = self.to_dict()
        if seed is not None:
            d["hyper"]["seed"] = int(seed)
        if out_dir is not None:
            d["out_dir"] = str(out_dir)
        return RunConfig.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["temperatures"] = list(self.temperatures)
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        d = dict(d)
        nested = {"architecture": Architecture, "hyper": Hyper, "solver": SolverParams, "sampler": SamplerConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d and not isinstance(d[key], typ):
                sub = d[key] or {}
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ValidationError(f"unknown keys in {key}: {sorted(bad)}")
                try:
                    d[key] = typ(**sub)
                except TypeError as exc:
                    raise ValidationError(f"bad {key} section: {exc}") from None
        if "temperatures" in d:
            d["temperatures"] = tuple(float(t) for t in d["temperatures"])
        if base_dir is not None:
            for key in ("data_path", "network_path", "quantum_path"):
                if d.get(key) is not None and not Path(d[key]).is_absolute():
                    d[key] = str(base_dir / d[key])
        return cls(**d)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    return RunConfig.from_dict(raw, base_dir=path.parent)
