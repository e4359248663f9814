"""Task protocol shared by the trainer and the CLI, plus the dataset cache."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from ..bptt import Batch, predict
from ..cells import CellConfig
from ..numerics import Rng


class Task:
    """A benchmark: how to draw training batches and how to score a model.

    Subclasses set ``name``, ``input_size``, ``output_size``, ``loss_kind``,
    ``stop_rule`` and ``default_batch_size``, and build ``self.test`` (a
    fixed :class:`~gdu.bptt.Batch`) in ``__init__``.
    """

    name = ""
    input_size = 0
    output_size = 0
    loss_kind = ""
    stop_rule = "none"
    stop_threshold = None
    default_batch_size = 20
    metric_name = "test_metric"

    def train_batch(self, rng: Rng, batch_size: int) -> Batch:
        raise NotImplementedError

    def evaluate(self, params: dict, config: CellConfig) -> dict:
        """Score on the fixed test set. Must not mutate ``params``."""
        raise NotImplementedError

    def describe(self) -> dict:
        return {"task": self.name}

    def check_model(self, config: CellConfig, output_size: int) -> None:
        from ..errors import ConfigurationError

        if config.input_size != self.input_size or output_size != self.output_size:
            raise ConfigurationError(
                f"task {self.name} needs {self.input_size} inputs and {self.output_size} outputs, "
                f"model has {config.input_size} and {output_size}"
            )


def final_outputs(params, config, inputs, chunk=1000):
    return predict(params, config, inputs, per_step=False, chunk=chunk)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


# ---------------------------------------------------------------------------
# Dataset cache
#
# ``<name>.npz`` holds the arrays of a generated dataset plus a ``__header__``
# member (uint8 UTF-8 JSON: task id, generator parameters, seed, array
# names). ``<name>.json`` next to it is the same header, pretty-printed, as a
# human-readable manifest. Both files are written to a temp name and renamed.
# ---------------------------------------------------------------------------


def _atomic_write(path, write):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(path, task_id: str, params: dict, seed: int, arrays: dict) -> dict:
    header = {"task": task_id, "params": params, "seed": int(seed), "arrays": sorted(arrays)}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    _atomic_write(path, lambda fh: np.savez(fh, __header__=blob, **arrays))
    manifest = os.path.splitext(str(path))[0] + ".json"
    _atomic_write(manifest, lambda fh: fh.write((json.dumps(header, indent=2, sort_keys=True) + "\n").encode()))
    return header


def load_dataset(path):
    """Return ``(header, arrays)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        arrays = {k: data[k].copy() for k in header["arrays"]}
    return header, arrays
