"""Toy classification tasks and their CSV format."""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

TASKS = ("xor", "blobs", "parity3")
BLOB_CENTERS = np.array([[-1.0, -1.0], [1.0, 1.0]])
BLOB_STD = 0.5


@dataclass(frozen=True)
class Example:
    u: np.ndarray
    d: np.ndarray


def make_dataset(task: str, n: int = 0, seed: int = 0) -> list[Example]:
    """``xor`` and ``parity3`` are fixed truth tables; ``blobs`` draws ``n`` points.

    Labels are in ``{-1, +1}``. For blobs the class is chosen uniformly and the
    point drawn from an isotropic Gaussian around that class's center.
    """
    if task == "xor":
        rows = [(u, 1.0 if u[0] != u[1] else -1.0) for u in itertools.product((-1.0, 1.0), repeat=2)]
    elif task == "parity3":
        rows = [(u, float(np.prod(u))) for u in itertools.product((-1.0, 1.0), repeat=3)]
    elif task == "blobs":
        if n <= 0:
            raise ValidationError("blobs needs n > 0")
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, n)
        pts = BLOB_CENTERS[labels] + BLOB_STD * rng.standard_normal((n, 2))
        rows = [(tuple(p), 2.0 * lab - 1.0) for p, lab in zip(pts, labels)]
    else:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    return [Example(np.array(u, float), np.array([d], float)) for u, d in rows]


def write_csv(examples: list[Example], fh) -> None:
    if not examples:
        raise ValidationError("nothing to write")
    k, m = examples[0].u.size, examples[0].d.size
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([f"u_{i + 1}" for i in range(k)] + [f"d_{i + 1}" for i in range(m)])
    for ex in examples:
        w.writerow([repr(float(x)) for x in ex.u] + [repr(float(x)) for x in ex.d])


def read_csv(fh) -> list[Example]:
    r = csv.reader(fh)
    try:
        header = next(r)
    except StopIteration:
        raise ValidationError("empty dataset file") from None
    ucols = [i for i, h in enumerate(header) if h.startswith("u_")]
    dcols = [i for i, h in enumerate(header) if h.startswith("d_")]
    if not ucols or not dcols or len(ucols) + len(dcols) != len(header):
        raise ValidationError("dataset header must be u_1..u_k, d_1..d_m")
    out = []
    for line_no, row in enumerate(r, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValidationError(f"line {line_no}: expected {len(header)} columns")
        vals = [float(x) for x in row]
        out.append(Example(np.array([vals[i] for i in ucols]), np.array([vals[i] for i in dcols])))
    return out
