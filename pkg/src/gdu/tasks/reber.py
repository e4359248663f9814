"""Reber grammar, its multi-embedded variant (mERG), and the next-symbol task.

The core automaton reads ``B``, then walks states 1..5 and finishes with
``E``::

    1: T -> 2, P -> 3        2: S -> 2, X -> 4        3: T -> 3, V -> 5
    4: X -> 3, S -> end      5: P -> 4, V -> end

An mERG string of depth ``m`` is ``B T' R_1 ... R_m T' E``. Here ``T'`` is
either T or P, the same symbol at both ends, and each ``R_i`` is a complete
Reber string. Every string of the language is generated by one product
automaton. Its state records the opening symbol, how many embedded strings
are finished, and the position inside the current embedded string.
:class:`MergAutomaton` implements it. Generation, validation and legal-successor
sets all derive from it, so they cannot disagree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..bptt import Batch, predict
from ..errors import ConfigurationError, ValidationError
from ..numerics import Rng
from .base import Task

SYMBOLS = "BTPSXVE"
INDEX = {c: i for i, c in enumerate(SYMBOLS)}

_END = "end"
REBER: Dict[object, Dict[str, object]] = {
    0: {"B": 1},
    1: {"T": 2, "P": 3},
    2: {"S": 2, "X": 4},
    3: {"T": 3, "V": 5},
    4: {"X": 3, "S": 6},
    5: {"P": 4, "V": 6},
    6: {"E": _END},
}

# shortest path through REBER: B T X S E / B P V V E
SHORTEST_REBER = 5

TRAIN_SIZE = 1000
TEST_SIZE = 256


def reber_successors(state) -> Dict[str, object]:
    return REBER.get(state, {})


def is_reber(string: str) -> bool:
    state = 0
    for c in string:
        nxt = reber_successors(state).get(c)
        if nxt is None:
            return False
        state = nxt
    return state == _END


class MergAutomaton:
    """Deterministic acceptor for depth-``m`` mERG strings.

    States are tuples:

    - ``("start",)``: expects ``B``
    - ``("open",)``: expects the opening ``T``/``P``
    - ``("inner", outer, k, r)``: inside embedded string ``k`` (0-based) at
      Reber state ``r``; ``r == 0`` means its ``B`` has not been read yet
    - ``("close", outer)``: all ``m`` embedded strings done, expects ``outer``
    - ``("final",)``: expects ``E``
    - ``("done",)``: accepting, no successors
    """

    def __init__(self, m: int):
        if m < 1:
            raise ConfigurationError(f"embedding depth must be >= 1, got {m}")
        self.m = m

    start = ("start",)

    def successors(self, state) -> Dict[str, tuple]:
        tag = state[0]
        if tag == "start":
            return {"B": ("open",)}
        if tag == "open":
            return {c: ("inner", c, 0, 0) for c in "TP"}
        if tag == "inner":
            _, outer, k, r = state
            out = {}
            for c, nxt in REBER[r].items():
                if nxt != _END:
                    out[c] = ("inner", outer, k, nxt)
                elif k + 1 < self.m:
                    out[c] = ("inner", outer, k + 1, 0)
                else:
                    out[c] = ("close", outer)
            return out
        if tag == "close":
            return {state[1]: ("final",)}
        if tag == "final":
            return {"E": ("done",)}
        return {}

    def run(self, string: str):
        """Yield the state after each prefix; raise ValidationError on a bad symbol."""
        state = self.start
        yield state
        for pos, c in enumerate(string):
            nxt = self.successors(state).get(c)
            if nxt is None:
                raise ValidationError(f"symbol {c!r} at position {pos} is not legal here (depth {self.m})")
            state = nxt
            yield state

    def accepts(self, string: str) -> bool:
        try:
            *_, last = self.run(string)
        except ValidationError:
            return False
        return last == ("done",)

    def legal_successors(self, prefix: str) -> frozenset:
        *_, state = self.run(prefix)
        return frozenset(self.successors(state))

    def sample(self, rng: Rng, max_len: Optional[int] = None) -> str:
        """Random walk choosing uniformly among the legal successors."""
        state, out = self.start, []
        while state != ("done",):
            options = sorted(self.successors(state))
            c = options[int(rng.integers(0, len(options)))] if len(options) > 1 else options[0]
            out.append(c)
            state = self.successors(state)[c]
            if max_len is not None and len(out) > max_len:
                return ""
        return "".join(out)


def shortest_merg(m: int) -> int:
    """Length of the shortest depth-``m`` string: B, T', m Reber strings, T', E."""
    return 4 + SHORTEST_REBER * m


def shortest_merg_string(m: int) -> str:
    """Lexicographically first shortest depth-``m`` string, by breadth-first search."""
    auto = MergAutomaton(m)
    frontier = [(auto.start, "")]
    seen = {auto.start}
    while frontier:
        nxt = []
        for state, prefix in frontier:
            for c, succ in sorted(auto.successors(state).items()):
                if succ == ("done",):
                    return prefix + c
                if succ not in seen:
                    seen.add(succ)
                    nxt.append((succ, prefix + c))
        frontier = nxt
    raise AssertionError("automaton has no accepting path")


def is_merg(string: str, m: int) -> bool:
    return MergAutomaton(m).accepts(string)


def legal_successors(prefix: str, m: int) -> frozenset:
    return MergAutomaton(m).legal_successors(prefix)


def gen_merg(rng: Rng, m: int, n: int, unique: bool = False, exclude: Iterable[str] = (),
             max_len: Optional[int] = None, max_tries: int = 1000) -> List[str]:
    """Draw ``n`` strings. ``unique`` forbids repeats; ``exclude`` is always avoided.

    ``max_len`` discards longer draws (the length distribution has a long
    geometric tail). ``max_tries`` bounds rejections per requested string.
    """
    auto = MergAutomaton(m)
    banned = set(exclude)
    out: List[str] = []
    misses = 0
    while len(out) < n:
        s = auto.sample(rng, max_len)
        if not s or s in banned:
            misses += 1
            if misses > max_tries * n:
                raise ConfigurationError(f"could not draw {n} distinct depth-{m} strings")
            continue
        out.append(s)
        if unique:
            banned.add(s)
    return out


@dataclass
class MergSet:
    """Encoded strings ready for next-symbol prediction.

    Step ``t`` reads symbol ``t`` and is trained to predict symbol ``t + 1``.
    ``legal[t, b]`` marks the symbols that may legally follow the prefix ending
    at step ``t``. ``lc_step[b]`` is the step whose target is the penultimate
    symbol, i.e. the closing ``T'`` that needs long-range memory.
    """

    strings: List[str]
    batch: Batch
    legal: np.ndarray  # (T, n, 7) bool
    lc_step: np.ndarray  # (n,)

    def __len__(self):
        return len(self.strings)


def encode_merg(strings: List[str], m: int) -> MergSet:
    if not strings:
        raise ConfigurationError("no strings to encode")
    auto = MergAutomaton(m)
    n = len(strings)
    T = max(len(s) for s in strings) - 1
    inputs = np.zeros((T, n, len(SYMBOLS)))
    targets = np.zeros((T, n), dtype=np.int64)
    mask = np.zeros((T, n))
    legal = np.zeros((T, n, len(SYMBOLS)), dtype=bool)
    lc_step = np.zeros(n, dtype=np.int64)
    for b, s in enumerate(strings):
        states = list(auto.run(s))
        if states[-1] != ("done",):
            raise ValidationError(f"string {b} is an incomplete depth-{m} string: {s!r}")
        for t in range(len(s) - 1):
            inputs[t, b, INDEX[s[t]]] = 1.0
            targets[t, b] = INDEX[s[t + 1]]
            mask[t, b] = 1.0
            for c in auto.successors(states[t + 1]):
                legal[t, b, INDEX[c]] = True
        lc_step[b] = len(s) - 3
    return MergSet(list(strings), Batch(inputs, targets, mask), legal, lc_step)


def step_correct(outputs: np.ndarray, legal: np.ndarray) -> np.ndarray:
    """Is the top-|S| output set exactly the legal set S?

    Equivalent to: every legal symbol scores strictly higher than every
    illegal one. Ties count as wrong.
    """
    lo = np.where(legal, outputs, np.inf).min(axis=-1)
    hi = np.where(legal, -np.inf, outputs).max(axis=-1)
    return lo > hi


def sc_lc(outputs: np.ndarray, data: MergSet) -> Tuple[float, float, float]:
    """Return ``(sc, lc, all)`` for per-step outputs ``(T, n, 7)``.

    ``sc`` is the fraction of strings whose every step other than the
    penultimate-symbol step is correct. ``lc`` is the fraction whose
    penultimate-symbol step is correct. ``all`` is the fraction with both.
    """
    ok = step_correct(outputs, data.legal)
    mask = data.batch.mask.astype(bool)
    cols = np.arange(len(data))
    lc_ok = ok[data.lc_step, cols]
    short = ok | ~mask
    short[data.lc_step, cols] = True
    sc_ok = short.all(axis=0)
    return float(sc_ok.mean()), float(lc_ok.mean()), float((sc_ok & lc_ok).mean())


class MergTask(Task):
    name = "merg"
    input_size = len(SYMBOLS)
    output_size = len(SYMBOLS)
    loss_kind = "softmax_ce_per_step"
    stop_rule = "sc_and_lc_equal_1"
    default_batch_size = 1
    metric_name = "test_all_correct"

    def __init__(self, depth: int, seed: int = 0, train_size: int = TRAIN_SIZE, test_size: int = TEST_SIZE,
                 max_len: Optional[int] = None):
        self.depth = depth
        self.seed = seed
        self.max_len = max_len
        rng = Rng(seed).spawn(1)
        self.train_strings = gen_merg(rng, depth, train_size, unique=True, max_len=max_len)
        self.test_strings = gen_merg(rng, depth, test_size, unique=True, exclude=self.train_strings,
                                     max_len=max_len)
        self.train_data = encode_merg(self.train_strings, depth)
        self.test_data = encode_merg(self.test_strings, depth)
        self.test = self.test_data.batch

    def train_batch(self, rng, batch_size):
        idx = rng.integers(0, len(self.train_data), size=batch_size)
        return self.train_data.batch.subset(idx)

    def evaluate(self, params, config):
        out = predict(params, config, self.test.inputs, per_step=True)
        sc, lc, both = sc_lc(out, self.test_data)
        return {"test_metric": both, "sc": sc, "lc": lc}

    def describe(self):
        return {"task": self.name, "depth": self.depth, "seed": self.seed,
                "train_size": len(self.train_strings), "test_size": len(self.test_strings)}
