"""The adding problem.

Each instance is two length-``L`` sequences: values drawn from U[0, 1] and an
indicator with exactly two ones, the first in ``[0, L//2)`` and the second in
``[L//2, L)``. The target is the sum of the two marked values. Models see
``(value, indicator)`` as a 2-dimensional input per step and regress the
target with a linear read-out at the last step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bptt import Batch
from ..errors import ConfigurationError
from ..numerics import Rng
from .base import Task, final_outputs

TEST_SIZE = 500
STOP_MSE = 0.002


@dataclass
class AddingSet:
    values: np.ndarray  # (n, L)
    markers: np.ndarray  # (n, 2) marked positions
    targets: np.ndarray  # (n,)

    def __len__(self):
        return len(self.targets)

    @property
    def indicators(self) -> np.ndarray:
        ind = np.zeros_like(self.values)
        rows = np.arange(len(self))[:, None]
        ind[rows, self.markers] = 1.0
        return ind

    def to_batch(self) -> Batch:
        x = np.stack([self.values, self.indicators], axis=-1)  # (n, L, 2)
        return Batch(np.ascontiguousarray(x.transpose(1, 0, 2)), self.targets[:, None])


def gen_adding(rng: Rng, L: int, n: int) -> AddingSet:
    if L < 2:
        raise ConfigurationError(f"adding problem needs L >= 2, got {L}")
    values = rng.uniform(0.0, 1.0, size=(n, L))
    half = L // 2
    first = rng.integers(0, half, size=n)
    second = rng.integers(half, L, size=n)
    markers = np.stack([first, second], axis=1)
    targets = values[np.arange(n), first] + values[np.arange(n), second]
    return AddingSet(values, markers, targets)


def mse(pred, targets) -> float:
    return float(np.mean((np.asarray(pred).reshape(-1) - np.asarray(targets).reshape(-1)) ** 2))


class AddingTask(Task):
    name = "adding"
    input_size = 2
    output_size = 1
    loss_kind = "mse_final"
    stop_rule = "mse_below"
    stop_threshold = STOP_MSE
    default_batch_size = 20
    metric_name = "test_mse"

    def __init__(self, length: int, seed: int = 0, test_size: int = TEST_SIZE):
        self.length = length
        self.seed = seed
        self.test_data = gen_adding(Rng(seed).spawn(1), length, test_size)
        self.test = self.test_data.to_batch()

    def train_batch(self, rng, batch_size):
        return gen_adding(rng, self.length, batch_size).to_batch()

    def evaluate(self, params, config):
        pred = final_outputs(params, config, self.test.inputs)
        return {"test_metric": mse(pred, self.test_data.targets)}

    def describe(self):
        return {"task": self.name, "length": self.length, "seed": self.seed, "test_size": len(self.test_data)}
