from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradientReport:
    """Per-parameter gradient estimates.

    ``grads`` maps a parameter family name to an array: ``"W"`` and
    ``"lambda"`` for classical networks, ``"a"`` and ``"b"`` for qubit
    couplings. Pair families are stored as symmetric matrices with a zero
    diagonal; each unordered pair carries one gradient value.
    """

    grads: dict[str, np.ndarray]
    method: str
    stderr: dict[str, np.ndarray] | None = None
    delta_beta: float | None = None
    n_samples: int | None = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.grads[key]

    def flat(self) -> np.ndarray:
        """Concatenate all parameters (upper triangle for pair families)."""
        return np.concatenate([_flatten(k, v) for k, v in sorted(self.grads.items())])

    def flat_stderr(self) -> np.ndarray:
        if self.stderr is None:
            raise ValueError(f"{self.method} report carries no standard errors")
        return np.concatenate([_flatten(k, self.stderr[k]) for k in sorted(self.grads)])

    def labels(self) -> list[str]:
        out = []
        for k, v in sorted(self.grads.items()):
            if v.ndim == 2:
                iu = np.triu_indices(v.shape[0], 1)
                out += [f"{k}[{i},{j}]" for i, j in zip(*iu)]
            else:
                out += [f"{k}[{i}]" for i in range(v.shape[0])]
        return out

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "delta_beta": self.delta_beta,
            "n_samples": self.n_samples,
            "grads": {k: v.tolist() for k, v in self.grads.items()},
        }
        if self.stderr is not None:
            d["stderr"] = {k: v.tolist() for k, v in self.stderr.items()}
        if self.meta:
            d["meta"] = self.meta
        return d


def _flatten(key: str, arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        return arr[np.triu_indices(arr.shape[0], 1)]
    return arr.ravel()


def mean_reports(reports: list[GradientReport]) -> GradientReport:
    """Arithmetic mean over a batch, summed in list order."""
    if not reports:
        raise ValueError("empty batch")
    keys = reports[0].grads.keys()
    grads = {}
    for k in keys:
        acc = np.zeros_like(reports[0].grads[k])
        for r in reports:
            acc = acc + r.grads[k]
        grads[k] = acc / len(reports)
    first = reports[0]
    return GradientReport(
        grads=grads,
        method=first.method,
        delta_beta=first.delta_beta,
        n_samples=None if first.n_samples is None else sum(r.n_samples or 0 for r in reports),
        meta={"batch_size": len(reports)},
    )
