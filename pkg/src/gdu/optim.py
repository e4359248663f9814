"""Adam and the training loop.

The loop is deterministic given ``(seed, config, task)``. Batches come from a
stream spawned off the trial seed, and evaluation reads the parameters without
writing them. Wall-clock time is recorded but is the only field that varies
between identical runs.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .bptt import backward, forward
from .cells import CellConfig, save_checkpoint
from .errors import ConfigurationError, NumericFault
from .numerics import Rng

STOP_RULES = ("mse_below", "test_accuracy_equals_1", "sc_and_lc_equal_1", "none")

# stream ids for Rng.spawn; kept here so the CLI and tests agree
INIT_STREAM = 0
BATCH_STREAM = 2


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0, lr, beta1, beta2, eps)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update. Returns ``(params', state')``; inputs are untouched."""
    if set(grads) != set(params):
        raise ConfigurationError(f"gradient keys {sorted(grads)} do not match parameters {sorted(params)}")
    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {k!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for {k!r} at optimizer step {t}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        q = p - upd
        if not np.all(np.isfinite(q)):
            raise NumericFault(f"non-finite parameter update for {k!r} at optimizer step {t}")
        new_p[k], new_m[k], new_v[k] = q, m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


@dataclass
class TrainConfig:
    batch_size: int = 20
    max_steps: int = 10_000
    eval_every: int = 50
    stop_rule: str = "none"
    stop_threshold: Optional[float] = None
    seed: int = 0
    lr: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0 or self.eval_every < 1:
            raise ConfigurationError("max_steps must be >= 0 and eval_every >= 1")
        if self.stop_rule not in STOP_RULES:
            raise ConfigurationError(f"unknown stop rule {self.stop_rule!r}; choose from {', '.join(STOP_RULES)}")
        if self.stop_rule == "mse_below" and not (self.stop_threshold and self.stop_threshold > 0):
            raise ConfigurationError("mse_below needs a positive stop_threshold")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")

    @classmethod
    def for_task(cls, task, **overrides) -> "TrainConfig":
        base = dict(batch_size=task.default_batch_size, stop_rule=task.stop_rule,
                    stop_threshold=task.stop_threshold)
        base.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    test_metric: float
    sc: Optional[float] = None
    lc: Optional[float] = None
    wall_ms: float = 0.0
    seed: int = 0

    FIELDS = ("step", "train_loss", "test_metric", "sc", "lc", "wall_ms", "seed")

    def row(self) -> list:
        return [getattr(self, f) for f in self.FIELDS]

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}


def should_stop(rule: str, metrics: dict, threshold: Optional[float] = None) -> bool:
    if rule == "mse_below":
        return metrics["test_metric"] < threshold
    if rule == "test_accuracy_equals_1":
        return metrics["test_metric"] == 1.0
    if rule == "sc_and_lc_equal_1":
        return metrics["sc"] == 1.0 and metrics["lc"] == 1.0
    return False


@dataclass
class TrainResult:
    params: dict
    metrics: List[MetricsRecord] = field(default_factory=list)
    stopped_at: Optional[int] = None
    adam: Optional[AdamState] = None


def train(config: CellConfig, params: dict, task, cfg: TrainConfig, output_size: Optional[int] = None,
          fault_checkpoint: Optional[str] = None, on_eval: Optional[Callable[[MetricsRecord], None]] = None,
          state: Optional[AdamState] = None,
          on_step: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Train until the stop rule fires or ``cfg.max_steps`` steps have run.

    The task is evaluated every ``cfg.eval_every`` steps and once more after the
    last step when that step is not a multiple of ``eval_every``. Each
    evaluation appends one :class:`MetricsRecord`. Its ``train_loss`` is the
    mean batch loss since the previous evaluation.

    On a :class:`NumericFault` the parameters from before the faulting step are
    written to ``fault_checkpoint`` (when given) and the fault is re-raised with
    ``checkpoint`` and ``step`` set on it.

    ``on_step(step, params)`` runs after every update (used to save
    checkpoints at chosen stages).
    """
    output_size = task.output_size if output_size is None else output_size
    task.check_model(config, output_size)
    rng = Rng(cfg.seed).spawn(BATCH_STREAM)
    adam = state or AdamState.zeros_like(params, lr=cfg.lr)
    result = TrainResult(params, adam=adam)
    losses: List[float] = []
    t0 = time.perf_counter()
    for step in range(1, cfg.max_steps + 1):
        try:
            batch = task.train_batch(rng, cfg.batch_size)
            loss, tape = forward(params, config, batch, task.loss_kind)
            grads, _ = backward(tape, params, config)
            params, adam = adam_step(params, grads.params, adam)
        except NumericFault as fault:
            fault.step = fault.step if fault.step is not None else step
            fault.train_step = step
            fault.checkpoint = None
            if fault_checkpoint:
                save_checkpoint(fault_checkpoint, config, result.params, output_size,
                                meta={"last_good_step": step - 1, "fault": str(fault)})
                fault.checkpoint = fault_checkpoint
            raise
        result.params, result.adam = params, adam
        losses.append(loss)
        if on_step:
            on_step(step, params)
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            scores = task.evaluate(params, config)
            rec = MetricsRecord(step, float(np.mean(losses)), scores["test_metric"], scores.get("sc"),
                                scores.get("lc"), (time.perf_counter() - t0) * 1000.0, cfg.seed)
            losses = []
            result.metrics.append(rec)
            if on_eval:
                on_eval(rec)
            if should_stop(cfg.stop_rule, scores, cfg.stop_threshold):
                result.stopped_at = step
                break
    return result
