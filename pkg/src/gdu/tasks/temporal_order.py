"""The 3-bit temporal order problem.

Symbols are one-hot over 6 units in the order ``a b c d X Y``. Every position
holds a random distractor from ``a..d`` except three trigger positions
``t_1 < t_2 < t_3`` carrying ``X`` or ``Y``. Trigger ``k`` (k = 1, 2, 3) is drawn
uniformly from ``floor((k-1)L/3)`` to ``floor((k-1)L/3) + 10``, both ends
inclusive. The class is the X/Y pattern read as a 3-bit number with X = 0,
Y = 1, so XXX is class 0 and YYY class 7.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bptt import Batch
from ..errors import ConfigurationError
from ..numerics import Rng
from .base import Task, accuracy, final_outputs

SYMBOLS = "abcdXY"
CLASSES = ("XXX", "XXY", "XYX", "XYY", "YXX", "YXY", "YYX", "YYY")
WINDOW = 10
TEST_SIZE = 500


def class_index(pattern: str) -> int:
    return CLASSES.index(pattern)


def trigger_windows(L: int):
    """Inclusive ``(low, high)`` bounds for each of the three trigger positions."""
    return [((k * L) // 3, (k * L) // 3 + WINDOW) for k in range(3)]


@dataclass
class TemporalOrderSet:
    symbols: np.ndarray  # (n, L) indices into SYMBOLS
    positions: np.ndarray  # (n, 3)
    labels: np.ndarray  # (n,)

    def __len__(self):
        return len(self.labels)

    def to_batch(self) -> Batch:
        onehot = np.eye(len(SYMBOLS))[self.symbols.T]  # (L, n, 6)
        return Batch(onehot, self.labels)

    def strings(self):
        return ["".join(SYMBOLS[i] for i in row) for row in self.symbols]


def gen_temporal_order(rng: Rng, L: int, n: int) -> TemporalOrderSet:
    # the three windows must be disjoint and inside the sequence
    if L < 3 * (WINDOW + 1):
        raise ConfigurationError(f"temporal order needs L >= {3 * (WINDOW + 1)}, got {L}")
    symbols = rng.integers(0, 4, size=(n, L))
    positions = np.stack([rng.integers(lo, hi + 1, size=n) for lo, hi in trigger_windows(L)], axis=1)
    bits = rng.integers(0, 2, size=(n, 3))
    rows = np.arange(n)[:, None]
    symbols[rows, positions] = 4 + bits
    labels = bits[:, 0] * 4 + bits[:, 1] * 2 + bits[:, 2]
    return TemporalOrderSet(symbols, positions, labels)


class TemporalOrderTask(Task):
    name = "temporal_order"
    input_size = 6
    output_size = 8
    loss_kind = "softmax_ce_final"
    stop_rule = "test_accuracy_equals_1"
    default_batch_size = 20
    metric_name = "test_accuracy"

    def __init__(self, length: int, seed: int = 0, test_size: int = TEST_SIZE):
        self.length = length
        self.seed = seed
        self.test_data = gen_temporal_order(Rng(seed).spawn(1), length, test_size)
        self.test = self.test_data.to_batch()

    def train_batch(self, rng, batch_size):
        return gen_temporal_order(rng, self.length, batch_size).to_batch()

    def evaluate(self, params, config):
        logits = final_outputs(params, config, self.test.inputs)
        return {"test_metric": accuracy(logits, self.test_data.labels)}

    def describe(self):
        return {"task": self.name, "length": self.length, "seed": self.seed, "test_size": len(self.test_data)}
