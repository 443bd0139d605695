"""Command-line entry point: ``eqprop <subcommand> --config run.json``.

Exit codes: 0 success, 1 failed check, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .. import quantum as qm
from .. import thermal as th
from ..errors import NumericalError, ValidationError
from .config import RunConfig, load_config
from .expansion import expansion_report
from .gradcheck import gradcheck
from .training import CHECKPOINT_FILE, evaluate_model, setup, train

log = logging.getLogger("eqprop")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2, 3


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _emit(obj, out: Path | None, name: str) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n"
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
    sys.stdout.write(text)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def cmd_train(cfg: RunConfig, args) -> int:
    res = train(cfg, out_dir=cfg.out_dir, resume=args.resume)
    last = res.records[-1]
    _emit({"epoch": last.epoch, "mean_train_cost": last.mean_train_cost, "accuracy": last.accuracy,
           "out_dir": str(res.out_dir)}, None, "")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args) -> int:
    regime, model, examples = setup(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / CHECKPOINT_FILE
    if ckpt.exists():
        model = regime.loads(ckpt.read_text())
        regime.check_input_width(model, examples)
    elif args.checkpoint:
        raise ValidationError(f"checkpoint {ckpt} not found")
    cost, acc = evaluate_model(regime, model, examples, 0, cfg.hyper.seed)
    _emit({"checkpoint": str(ckpt) if ckpt.exists() else None, "mean_cost": cost, "accuracy": acc,
           "n_examples": len(examples)}, None, "")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    rep = gradcheck(cfg)
    _emit(rep, Path(cfg.out_dir) if args.out else None, "gradcheck.json")
    return EXIT_OK if rep["passed"] else EXIT_CHECK_FAILED


def _example_clamp(cfg: RunConfig):
    regime, model, examples = setup(cfg)
    k = cfg.gradcheck_example
    if not 0 <= k < len(examples):
        raise ValidationError(f"example index {k} out of range")
    return regime, model, examples[k]


def cmd_thermal_sample(cfg: RunConfig, args) -> int:
    if cfg.regime != "thermal":
        raise ValidationError("thermal-sample needs regime 'thermal'")
    regime, model, ex = _example_clamp(cfg)
    seed = th.derive_seed(cfg.hyper.seed, 0, cfg.gradcheck_example)
    ctx = regime.clamp(ex)
    samples = th.langevin_chain(model, ctx, regime.params(seed), th._free_start(model, ctx, None))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.jsonl", "w") as fh:
        th.dump_samples(samples, fh)
    mean, se = th.mc_expectation(samples, lambda z: th.cost(z, ctx.d, model.output_nodes))
    _emit({"samples": str(out / "samples.jsonl"), "n_samples": len(samples), "mean_cost": mean,
           "mean_cost_se": se}, None, "")
    return EXIT_OK


def cmd_quantum_solve(cfg: RunConfig, args) -> int:
    if cfg.regime != "quantum":
        raise ValidationError("quantum-solve needs regime 'quantum'")
    regime, model, ex = _example_clamp(cfg)
    sys_ = regime.system(model, ex)
    sol = qm.eigensolve(sys_, cfg.which)
    xx, zz = qm.pair_expectations(sol.statevector, sys_.n_qubits)
    rep = {
        "index": sol.index, "eigenvalue": sol.eigenvalue, "gap_below": sol.gap_below,
        "gap_above": sol.gap_above, "residual": sol.residual, "norm": sol.norm,
        "cost": qm.cost_expectation(sys_, sol), "output_z": qm.output_magnetisation(sys_, sol),
        "xx": xx, "zz": zz, "spectrum": sol.spectrum,
        "statevector": {"real": sol.statevector.real, "imag": sol.statevector.imag},
    }
    rep = {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in rep.items()}
    _emit(rep, Path(cfg.out_dir) if args.out else None, "eigensolution.json")
    return EXIT_OK


def cmd_expansion_check(cfg: RunConfig, args) -> int:
    if cfg.regime == "quantum":
        raise ValidationError("expansion-check applies to classical networks")
    regime, model, ex = _example_clamp(cfg)
    rep = expansion_report(model, regime.clamp(ex), cfg.temperatures)
    _emit(rep, Path(cfg.out_dir) if args.out else None, "expansion_check.json")
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train a model and write metrics and checkpoints"),
    "eval": (cmd_eval, "evaluate a checkpoint on the training set"),
    "gradcheck": (cmd_gradcheck, "compare the estimator with a finite-difference oracle"),
    "thermal-sample": (cmd_thermal_sample, "run a Langevin chain and export samples"),
    "quantum-solve": (cmd_quantum_solve, "diagonalise the qubit Hamiltonian for one example"),
    "expansion-check": (cmd_expansion_check, "check the low-temperature expansion against oracles"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eqprop", description="Equilibrium propagation laboratory.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="run configuration (JSON)")
        s.add_argument("--seed", type=_u64, default=None, help="override the master seed")
        s.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        if name == "train":
            s.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
        if name == "eval":
            s.add_argument("--checkpoint", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out_dir=args.out)
        return COMMANDS[args.command][0](cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except KeyboardInterrupt:
        print("interrupted; checkpoint written", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
