"""Benchmark tasks: data generators, encoders and evaluation."""

from .adding import AddingSet, AddingTask, gen_adding
from .base import Task, load_dataset, save_dataset
from .mnist import MnistSet, PMnistTask, load_mnist_idx, permute_pixels, random_permutation
from .reber import MergAutomaton, MergTask, encode_merg, gen_merg, is_merg, is_reber, legal_successors, sc_lc, shortest_merg, shortest_merg_string
from .temporal_order import TemporalOrderSet, TemporalOrderTask, class_index, gen_temporal_order

TASKS = ("adding", "temporal_order", "merg", "pmnist")


def make_task(name: str, length: int = 100, depth: int = 10, seed: int = 0, **kw) -> Task:
    from ..errors import ConfigurationError

    if name == "adding":
        return AddingTask(length, seed=seed, **kw)
    if name == "temporal_order":
        return TemporalOrderTask(length, seed=seed, **kw)
    if name == "merg":
        return MergTask(depth, seed=seed, **kw)
    if name == "pmnist":
        return PMnistTask.from_dir(perm_seed=seed, **kw)
    raise ConfigurationError(f"unknown task {name!r}; choose from {', '.join(TASKS)}")


__all__ = [
    "AddingSet", "AddingTask", "gen_adding", "Task", "load_dataset", "save_dataset", "MnistSet", "PMnistTask",
    "load_mnist_idx", "permute_pixels", "random_permutation", "MergAutomaton", "MergTask", "encode_merg",
    "gen_merg", "is_merg", "is_reber", "legal_successors", "sc_lc", "shortest_merg", "shortest_merg_string", "TemporalOrderSet",
    "TemporalOrderTask", "class_index", "gen_temporal_order", "TASKS", "make_task",
]
