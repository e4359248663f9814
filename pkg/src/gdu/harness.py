"""Experiment orchestration behind the ``gdu`` command line.

An :class:`ExperimentSpec` fully determines a run. Trial ``i`` uses seed
``seed + i``, which drives both parameter initialisation (stream 0) and batch
sampling (stream 2). Test sets depend only on ``data_seed``, so every trial
is scored on the same data.

Output layout of ``train``::

    <out>/spec.json                  resolved spec (plus the config file copy, if any)
    <out>/summary.json               stop steps and box-whisker statistics
    <out>/trial_<i>/metrics.csv      one row per evaluation (MetricsRecord.FIELDS)
    <out>/trial_<i>/metrics.jsonl    the same rows as JSON lines
    <out>/trial_<i>/checkpoint.npz   final parameters
    <out>/trial_<i>/checkpoint_step<n>.npz   optional snapshots (--save-at)
    <out>/trial_<i>/fault.npz        last good parameters after a numeric fault

Empty CSV cells mean "not applicable" (e.g. ``sc``/``lc`` outside mERG).
"""

from __future__ import annotations

import csv
import json
import os
import shutil
from decimal import ROUND_HALF_UP, Decimal
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np

from .bptt import Batch, backward, forward, trace_sequence
from .cells import CellConfig, GroupSpec, init_params, load_checkpoint, model_param_count, save_checkpoint
from .errors import ConfigurationError, ValidationError
from .numerics import Rng
from .optim import INIT_STREAM, MetricsRecord, TrainConfig, train
from .tasks import make_task
from .tasks.base import Task

TASK_DIMS = {"adding": (2, 1), "temporal_order": (6, 8), "merg": (7, 7), "pmnist": (1, 10)}


@dataclass
class ExperimentSpec:
    task: str = "adding"
    length: int = 200
    depth: int = 10
    model: str = "gdu"
    groups: Optional[str] = "10x10"
    delta: Optional[float] = None
    units: Optional[int] = None
    trials: int = 1
    seed: int = 0
    data_seed: int = 0
    batch_size: Optional[int] = None
    max_steps: int = 10_000
    eval_every: Optional[int] = None
    lr: float = 1e-3
    stop_threshold: Optional[float] = None
    train_size: Optional[int] = None
    test_size: Optional[int] = None
    max_len: Optional[int] = None
    save_at: List[int] = field(default_factory=list)
    output_dir: str = "runs"

    def __post_init__(self):
        if self.task not in TASK_DIMS:
            raise ConfigurationError(f"unknown task {self.task!r}; choose from {', '.join(TASK_DIMS)}")
        if self.trials < 1:
            raise ConfigurationError("trial count must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown spec keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def cell_config(self) -> CellConfig:
        d_in, _ = TASK_DIMS[self.task]
        return build_config(self.model, d_in, groups=self.groups, units=self.units, delta=self.delta)

    @property
    def output_size(self) -> int:
        return TASK_DIMS[self.task][1]

    def make_task(self) -> Task:
        kw = {}
        if self.task in ("adding", "temporal_order") and self.test_size:
            kw["test_size"] = self.test_size
        if self.task == "merg":
            kw.update({k: v for k, v in (("train_size", self.train_size), ("test_size", self.test_size),
                                          ("max_len", self.max_len)) if v})
        if self.task == "pmnist":
            kw.update({k: v for k, v in (("train_size", self.train_size), ("test_size", self.test_size)) if v})
        return make_task(self.task, length=self.length, depth=self.depth, seed=self.data_seed, **kw)

    def train_config(self, task: Task, seed: int) -> TrainConfig:
        eval_every = self.eval_every
        if eval_every is None:
            # synthetic tasks: every 50 steps; pMNIST: once per epoch
            eval_every = 50
            if self.task == "pmnist":
                bs = self.batch_size or task.default_batch_size
                eval_every = max(1, len(task.train_data) // bs)
        return TrainConfig.for_task(task, batch_size=self.batch_size, max_steps=self.max_steps,
                                    eval_every=eval_every, seed=seed, lr=self.lr,
                                    stop_threshold=self.stop_threshold)


def build_config(kind: str, input_size: int, groups: Optional[str] = None, units: Optional[int] = None,
                 delta: Optional[float] = None) -> CellConfig:
    kind = kind.lower()
    if kind == "gdu":
        if not groups:
            raise ConfigurationError("a GDU model needs --groups, e.g. 10x10 or 2x35+10x3")
        spec = GroupSpec.parse(groups, delta=delta)
        if units is not None and units != spec.state_size:
            raise ConfigurationError(f"--units {units} disagrees with groups {groups} ({spec.state_size} units)")
        return CellConfig("gdu", input_size, spec.state_size, spec)
    if units is None:
        raise ConfigurationError(f"a {kind} model needs --units")
    return CellConfig(kind, input_size, units)


def format_k(n: int) -> str:
    """Thousands with one decimal, rounding halves up (67,850 -> 67.9K)."""
    k = (Decimal(int(n)) / 1000).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)
    return f"{k}K"


# Configurations whose sizes are quoted in the experiments, as
# (task, kind, groups-or-units, quoted count).
QUOTED_COUNTS = [
    ("adding", "lstm", 100, "41.3K"),
    ("adding", "gru", 100, "31.0K"),
    ("adding", "gdu", "10x10", "20.7K"),
    ("adding", "gdu", "10x1", "271"),
    ("temporal_order", "lstm", 100, "43.6K"),
    ("temporal_order", "gru", 100, "32.9K"),
    ("temporal_order", "gdu", "10x10", "22.2K"),
    ("merg", "lstm", 100, "43.9K"),
    ("merg", "gru", 100, "33.1K"),
    ("merg", "gdu", "2x35+10x3", "22.3K"),
    ("pmnist", "lstm", 128, "67.9K"),
    ("pmnist", "gru", 128, "51.2K"),
    ("pmnist", "gdu", "4x32", "34.6K"),
    ("pmnist", "gdu", "5x25", "33.0K"),
    ("pmnist", "lstm", 256, "266.8K"),
    ("pmnist", "gru", 256, "200.7K"),
    ("pmnist", "gdu", "4x62", "134.7K"),
    ("pmnist", "gdu", "5x51", "133.6K"),
]


def count_for(task: str, kind: str, size) -> int:
    d_in, d_out = TASK_DIMS[task]
    if kind == "gdu":
        cfg = build_config(kind, d_in, groups=str(size))
    else:
        cfg = build_config(kind, d_in, units=int(size))
    return model_param_count(cfg, d_out)


def box_whisker(values) -> Optional[dict]:
    """Median, quartiles and extremes (linear interpolation between order statistics)."""
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return None
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"n": int(v.size), "min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max())}


class MetricsWriter:
    """Appends MetricsRecords to a CSV and a JSONL file as they arrive."""

    def __init__(self, directory):
        self.csv_path = os.path.join(directory, "metrics.csv")
        self.jsonl_path = os.path.join(directory, "metrics.jsonl")
        with open(self.csv_path, "w", newline="") as fh:
            csv.writer(fh).writerow(MetricsRecord.FIELDS)
        open(self.jsonl_path, "w").close()

    def __call__(self, rec: MetricsRecord):
        row = ["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in rec.row()]
        with open(self.csv_path, "a", newline="") as fh:
            csv.writer(fh).writerow(row)
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_metrics_csv(path) -> List[MetricsRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            def num(k, cast=float):
                return None if row[k] == "" else cast(row[k])
            out.append(MetricsRecord(num("step", int), num("train_loss"), num("test_metric"), num("sc"),
                                     num("lc"), num("wall_ms"), num("seed", int)))
    return out


def run_experiment(spec: ExperimentSpec, log=print, config_file: Optional[str] = None) -> dict:
    """Run all trials; return the summary dict (also written to summary.json)."""
    task = spec.make_task()
    config = spec.cell_config()
    task.check_model(config, spec.output_size)
    out = spec.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "spec.json"), "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
    if config_file:
        shutil.copyfile(config_file, os.path.join(out, "config." + os.path.basename(config_file)))
    n_params = model_param_count(config, spec.output_size)
    log(f"{config.describe()} on {spec.task}: {n_params} parameters ({format_k(n_params)})")
    trials = []
    for i in range(spec.trials):
        seed = spec.seed + i
        tdir = os.path.join(out, f"trial_{i}")
        os.makedirs(tdir, exist_ok=True)
        params = init_params(config, Rng(seed).spawn(INIT_STREAM), spec.output_size)
        writer = MetricsWriter(tdir)
        cfg = spec.train_config(task, seed)
        save_at = set(spec.save_at)

        def snapshot(step, p, tdir=tdir):
            if step in save_at:
                save_checkpoint(os.path.join(tdir, f"checkpoint_step{step}.npz"), config, p, spec.output_size,
                                meta={"step": step, "seed": seed, "task": task.describe()})

        def report(rec, i=i):
            writer(rec)
            extra = "" if rec.sc is None else f" sc={rec.sc:.4f} lc={rec.lc:.4f}"
            log(f"trial {i} step {rec.step}: train_loss={rec.train_loss:.6g} test={rec.test_metric:.6g}{extra}")

        res = train(config, params, task, cfg, spec.output_size,
                    fault_checkpoint=os.path.join(tdir, "fault.npz"), on_eval=report, on_step=snapshot)
        final_step = res.metrics[-1].step if res.metrics else 0
        save_checkpoint(os.path.join(tdir, "checkpoint.npz"), config, res.params, spec.output_size,
                        meta={"step": final_step, "seed": seed, "task": task.describe(),
                              "train": cfg.to_dict()})
        trials.append({"trial": i, "seed": seed, "stopped_at": res.stopped_at, "final_step": final_step,
                       "final_metric": res.metrics[-1].test_metric if res.metrics else None})
        log(f"trial {i}: " + (f"stopped at step {res.stopped_at}" if res.stopped_at else
                              f"did not meet the stop rule in {final_step} steps"))
    summary = {
        "model": config.describe(),
        "params": n_params,
        "task": task.describe(),
        "lr": spec.lr,
        "trials": trials,
        "stop_steps": box_whisker(t["stopped_at"] for t in trials),
        "final_metric": box_whisker(t["final_metric"] for t in trials),
        "converged": sum(t["stopped_at"] is not None for t in trials),
    }
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def eval_batch(task: Task, n: int) -> Batch:
    """The first ``n`` test sequences, as a fixed probe batch."""
    n = min(n, task.test.size)
    return task.test.subset(np.arange(n))


def probe_norms(config: CellConfig, params: dict, task: Task, n: int = 20):
    """||dL/ds_t|| for t = 1..T on the first ``n`` test sequences."""
    batch = eval_batch(task, n)
    _, tape = forward(params, config, batch, task.loss_kind)
    _, probe = backward(tape, params, config)
    return probe


def gate_matrix(config: CellConfig, params: dict, inputs: np.ndarray) -> np.ndarray:
    """K x T matrix of keep-gate activations (1 - alpha for coupled cells, f for LSTM)."""
    if config.kind == "srn":
        raise ConfigurationError("an SRN has no gates to dump")
    traces = trace_sequence(params, config, inputs)
    return np.stack([tr.beta for tr in traces], axis=1)


def encode_sequence(task: Task, text: str) -> np.ndarray:
    """One-hot ``(T, D)`` inputs for a symbol string of the task's alphabet."""
    from .tasks import reber, temporal_order

    if task.name == "merg":
        if not reber.is_merg(text, task.depth):
            raise ValidationError(f"{text!r} is not a depth-{task.depth} mERG string")
        return np.eye(len(reber.SYMBOLS))[[reber.INDEX[c] for c in text[:-1]]]
    if task.name == "temporal_order":
        bad = [c for c in text if c not in temporal_order.SYMBOLS]
        if bad:
            raise ValidationError(f"symbols {bad!r} are not in {temporal_order.SYMBOLS!r}")
        return np.eye(len(temporal_order.SYMBOLS))[[temporal_order.SYMBOLS.index(c) for c in text]]
    raise ValidationError(f"task {task.name} has no symbol alphabet; use --index")


def load_model(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)
