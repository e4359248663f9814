"""``gdu`` command line.

Exit codes: 0 success, 2 usage/configuration error, 3 numeric fault,
4 I/O or data-file error, 1 failed check (``grad-check``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .bptt import LOSSES, Batch, gradient_check, write_matrix_csv
from .cells import CellState, init_params, model_param_count
from .errors import ConfigurationError, GDUError, IngestionError, NumericFault
from .harness import (
    QUOTED_COUNTS, TASK_DIMS, ExperimentSpec, build_config, count_for, encode_sequence, format_k, gate_matrix,
    load_model, probe_norms, run_experiment,
)
from .numerics import Rng
from .optim import INIT_STREAM


def _ints(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_model_args(p, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--model", choices=("srn", "lstm", "gru", "ugrnn", "gdu"), default=argparse.SUPPRESS if suppress else "gdu")
    p.add_argument("--groups", default=d, help="group layout SIZExCOUNT[+SIZExCOUNT...][@delta], e.g. 2x35+10x3")
    p.add_argument("--delta", type=float, default=d, help="override delta for every group (default 1)")
    p.add_argument("--units", type=int, default=d, help="state size for non-GDU models")


def _add_task_args(p, suppress=False):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--task", choices=tuple(TASK_DIMS), default=argparse.SUPPRESS if suppress else "adding")
    p.add_argument("--len", dest="length", type=int, default=argparse.SUPPRESS if suppress else 200,
                   help="sequence length (adding, temporal_order)")
    p.add_argument("--m", dest="depth", type=int, default=argparse.SUPPRESS if suppress else 10,
                   help="embedding depth (merg)")
    p.add_argument("--data-seed", type=int, default=argparse.SUPPRESS if suppress else 0,
                   help="seed of the fixed test (and mERG training) set")
    p.add_argument("--train-size", type=int, default=d, help="mERG training strings / pMNIST training images")
    p.add_argument("--test-size", type=int, default=d)
    p.add_argument("--max-len", type=int, default=d, help="discard longer mERG strings")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gdu", description="Gated recurrent cells with a grouped distributor gate.")
    ap.add_argument("--version", action="version", version=f"gdu {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run seeded training trials",
                       description="Flags and --config may be combined; values in the config file win.")
    _add_task_args(p, suppress=True)
    _add_model_args(p, suppress=True)
    S = argparse.SUPPRESS
    p.add_argument("--trials", type=int, default=S)
    p.add_argument("--seed", type=int, default=S, help="trial i uses seed + i")
    p.add_argument("--max-steps", type=int, default=S)
    p.add_argument("--batch-size", type=int, default=S)
    p.add_argument("--eval-every", type=int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--stop-threshold", type=float, default=S, help="MSE threshold for the adding task")
    p.add_argument("--save-at", type=_ints, default=S, help="comma-separated steps to snapshot")
    p.add_argument("--out", dest="output_dir", default=S)
    p.add_argument("--config", help="JSON file with ExperimentSpec fields")

    p = sub.add_parser("param-count", help="print exact and rounded parameter counts")
    _add_task_args(p)
    _add_model_args(p)
    p.add_argument("--quoted", action="store_true", help="list every configuration quoted in the experiments")

    p = sub.add_parser("probe-norms", help="write ||dL/ds_t|| per step as CSV")
    _add_task_args(p)
    _add_model_args(p)
    p.add_argument("--checkpoint", nargs="+", default=[], help="one CSV per checkpoint (e.g. several stages)")
    p.add_argument("--untrained", action="store_true", help="probe freshly initialised parameters instead")
    p.add_argument("--seed", type=int, default=0, help="init seed for --untrained")
    p.add_argument("--batch", type=int, default=20, help="number of test sequences in the probe batch")
    p.add_argument("--out", default=".")

    p = sub.add_parser("dump-gates", help="write the K x T keep-gate matrix of one sequence as CSV")
    _add_task_args(p)
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--index", type=int, default=0, help="test-set sequence index")
    g.add_argument("--sequence", help="explicit symbol string (merg, temporal_order)")
    p.add_argument("--out", default="gates.csv")

    p = sub.add_parser("gen-data", help="write a generated dataset and its manifest")
    _add_task_args(p)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz path (manifest goes next to it as .json)")

    p = sub.add_parser("grad-check", help="compare BPTT gradients with central differences")
    _add_model_args(p)
    p.add_argument("--input-size", type=int, default=3)
    p.add_argument("--output-size", type=int, default=4)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--loss", choices=LOSSES, default="mse_final")
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return ap


def _spec_from_args(args) -> ExperimentSpec:
    values = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    if args.config:
        with open(args.config) as fh:
            try:
                from_file = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{args.config}: {exc}") from exc
        values.update(from_file)
    if values.get("model", "gdu") != "gdu" and "groups" not in values:
        values["groups"] = None
    return ExperimentSpec.from_dict(values)


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    summary = run_experiment(spec, config_file=args.config)
    sw = summary["stop_steps"]
    print(f"{summary['converged']}/{spec.trials} trials met the stop rule")
    if sw:
        print("stop step median {median:g}, quartiles {q1:g}..{q3:g}, range {min:g}..{max:g}".format(**sw))
    return 0


def _task_config(args):
    d_in, d_out = TASK_DIMS[args.task]
    return build_config(args.model, d_in, groups=args.groups, units=args.units, delta=args.delta), d_out


def cmd_param_count(args) -> int:
    if args.quoted:
        print(f"{'task':<15} {'model':<16} {'exact':>8} {'rounded':>9} {'quoted':>8}")
        for task, kind, size, quoted in QUOTED_COUNTS:
            n = count_for(task, kind, size)
            name = f"GDU({size})" if kind == "gdu" else f"{kind.upper()}({size})"
            print(f"{task:<15} {name:<16} {n:>8} {format_k(n):>9} {quoted:>8}")
        return 0
    config, d_out = _task_config(args)
    n = model_param_count(config, d_out)
    print(f"{config.describe()} on {args.task}: {n} parameters ({format_k(n)})")
    return 0


def _task_from_args(args):
    spec = ExperimentSpec(task=args.task, length=args.length, depth=args.depth, data_seed=args.data_seed,
                          train_size=args.train_size, test_size=args.test_size, max_len=args.max_len,
                          groups=None, model="srn")
    return spec.make_task()


def cmd_probe_norms(args) -> int:
    task = _task_from_args(args)
    os.makedirs(args.out, exist_ok=True)
    models = []
    if args.untrained:
        config, d_out = _task_config(args)
        models.append((f"untrained_seed{args.seed}", config,
                       init_params(config, Rng(args.seed).spawn(INIT_STREAM), d_out)))
    for path in args.checkpoint:
        config, params, _, _ = load_model(path)
        models.append((os.path.splitext(os.path.basename(path))[0], config, params))
    if not models:
        raise ConfigurationError("give --checkpoint PATH... or --untrained")
    for label, config, params in models:
        task.check_model(config, params["out.W"].shape[1])
        probe = probe_norms(config, params, task, args.batch)
        path = os.path.join(args.out, f"{label}_norms.csv")
        probe.to_csv(path)
        print(f"{label}: T={len(probe.norms)} ratio ||e_1||/||e_T|| = {probe.decay_ratio():.6g} -> {path}")
    return 0


def cmd_dump_gates(args) -> int:
    task = _task_from_args(args)
    config, params, out_size, _ = load_model(args.checkpoint)
    task.check_model(config, out_size)
    if args.sequence:
        inputs = encode_sequence(task, args.sequence)
    else:
        if not 0 <= args.index < task.test.size:
            raise ConfigurationError(f"--index must be in [0, {task.test.size})")
        batch = task.test.subset(np.array([args.index]))
        inputs = batch.inputs[:, 0]
    M = gate_matrix(config, params, inputs)
    write_matrix_csv(args.out, M, row_label="unit", col_prefix="t")
    print(f"wrote {M.shape[0]}x{M.shape[1]} keep-gate matrix to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    from .tasks import gen_adding, gen_merg, gen_temporal_order, save_dataset
    from .tasks.reber import INDEX

    rng = Rng(args.seed)
    if args.task == "adding":
        d = gen_adding(rng, args.length, args.n)
        arrays, params = {"values": d.values, "markers": d.markers, "targets": d.targets}, {"length": args.length}
    elif args.task == "temporal_order":
        d = gen_temporal_order(rng, args.length, args.n)
        arrays = {"symbols": d.symbols, "positions": d.positions, "labels": d.labels}
        params = {"length": args.length}
    elif args.task == "merg":
        strings = gen_merg(rng, args.depth, args.n, unique=True, max_len=args.max_len)
        T = max(map(len, strings))
        codes = np.full((len(strings), T), -1, dtype=np.int8)
        for i, s in enumerate(strings):
            codes[i, :len(s)] = [INDEX[c] for c in s]
        arrays = {"codes": codes, "lengths": np.array([len(s) for s in strings])}
        params = {"depth": args.depth, "alphabet": "BTPSXVE", "unique": True}
    else:
        raise ConfigurationError("pmnist is read from IDX files, not generated")
    save_dataset(args.out, args.task, params, args.seed, arrays)
    print(f"wrote {args.n} {args.task} instances to {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    config = build_config(args.model, args.input_size, groups=args.groups, units=args.units, delta=args.delta)
    rng = Rng(args.seed)
    worst_all = 0.0
    for i in range(args.instances):
        params = init_params(config, rng, args.output_size)
        for k in params:
            if k.endswith(".b"):
                params[k] = rng.normal(0.0, 0.5, size=params[k].shape)
        x = rng.normal(size=(args.steps, args.batch, args.input_size))
        if args.loss == "mse_final":
            batch = Batch(x, rng.normal(size=(args.batch, args.output_size)))
        elif args.loss == "softmax_ce_final":
            batch = Batch(x, rng.integers(0, args.output_size, size=args.batch))
        else:
            batch = Batch(x, rng.integers(0, args.output_size, size=(args.steps, args.batch)),
                          np.ones((args.steps, args.batch)))
        s0 = CellState.zeros(config, args.batch)
        s0.s = rng.normal(0.0, 0.5, size=s0.s.shape)
        errs = gradient_check(params, config, batch, args.loss, s0)
        worst = max(errs.values())
        worst_all = max(worst_all, worst)
        name = max(errs, key=errs.get)
        print(f"instance {i}: max relative error {worst:.3e} ({name})")
    ok = worst_all < args.tol
    print(f"{config.describe()}: worst {worst_all:.3e} {'<' if ok else '>='} {args.tol:g} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


COMMANDS = {
    "train": cmd_train,
    "param-count": cmd_param_count,
    "probe-norms": cmd_probe_norms,
    "dump-gates": cmd_dump_gates,
    "gen-data": cmd_gen_data,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericFault as exc:
        where = f"; last good parameters in {exc.checkpoint}" if getattr(exc, "checkpoint", None) else ""
        print(f"gdu: numeric fault: {exc}{where}", file=sys.stderr)
        return exc.exit_code
    except IngestionError as exc:
        print(f"gdu: data error: {exc}", file=sys.stderr)
        return exc.exit_code
    except GDUError as exc:
        print(f"gdu: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"gdu: {exc}", file=sys.stderr)
        return IngestionError.exit_code


if __name__ == "__main__":
    sys.exit(main())
