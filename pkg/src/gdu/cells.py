"""Recurrent cells: SRN, LSTM, GRU, UGRNN and the Grouped Distributor Unit.

All gated kinds except LSTM are coupled additive transitions,

    s_t = beta_t * s_{t-1} + alpha_t * cand_t,    beta_t = 1 - alpha_t,

and differ only in how the update gate ``alpha`` is produced. GDU computes it
with a grouped softmax (the *distributor*) so that every group of ``M_i``
units overwrites exactly ``delta_i`` worth of state per step.

Conventions
-----------
* Row vectors: a pre-activation is ``x @ W + s @ U + b`` with ``W`` of shape
  ``(input_size, K)``, ``U`` of shape ``(K, K)`` and ``b`` of shape ``(K,)``.
  Every step function also accepts a leading batch axis.
* Parameters live in a flat ``dict`` keyed ``"<gate>.W"``, ``"<gate>.U"``,
  ``"<gate>.b"``; the optional linear read-out uses ``"out.W"``/``"out.b"``.
  Gate order per kind is fixed by :data:`GATES` and is the serialization
  order of checkpoints.
* Group slices of the GDU state are contiguous, in the order given.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, NumericFault
from .numerics import DTYPE, Rng, check_finite, sigmoid, xavier_uniform

KINDS = ("srn", "lstm", "gru", "ugrnn", "gdu")

# "cand" is the tanh candidate state; "a" the coupled update gate alpha.
GATES = {
    "srn": ("s",),
    "lstm": ("f", "i", "o", "cand"),
    "gru": ("r", "z", "cand"),
    "ugrnn": ("a", "cand"),
    "gdu": ("a", "cand"),
}


@dataclass(frozen=True)
class GroupSpec:
    """Partition of the GDU state into groups of ``sizes[i]`` units with budget ``deltas[i]``."""

    sizes: tuple
    deltas: tuple

    def __post_init__(self):
        sizes = tuple(int(m) for m in self.sizes)
        deltas = tuple(float(d) for d in self.deltas)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "deltas", deltas)
        if not sizes:
            raise ConfigurationError("a GroupSpec needs at least one group")
        if len(sizes) != len(deltas):
            raise ConfigurationError(f"{len(sizes)} group sizes but {len(deltas)} deltas")
        for m, d in zip(sizes, deltas):
            if m < 1:
                raise ConfigurationError(f"group size must be >= 1, got {m}")
            if not 0.0 < d < m:
                raise ConfigurationError(f"delta must lie in (0, M) = (0, {m}), got {d}")

    @classmethod
    def uniform(cls, size: int, count: int, delta: float = 1.0) -> "GroupSpec":
        return cls((size,) * count, (delta,) * count)

    @classmethod
    def parse(cls, text: str, delta=None) -> "GroupSpec":
        """Parse ``"2x35+10x3"``: 35 groups of size 2 plus 3 groups of size 10.

        A clause may carry its own budget, ``"4x32@0.5"``. Without one the
        clause uses ``delta`` (default 1, which requires size >= 2).
        """
        sizes, deltas = [], []
        for clause in text.replace(" ", "").split("+"):
            m = re.fullmatch(r"(\d+)x(\d+)(?:@([0-9.eE+-]+))?", clause)
            if not m:
                raise ConfigurationError(f"bad group clause {clause!r}; expected SIZExCOUNT[@DELTA]")
            size, count = int(m.group(1)), int(m.group(2))
            d = float(m.group(3)) if m.group(3) else (1.0 if delta is None else float(delta))
            if count < 1:
                raise ConfigurationError(f"group count must be >= 1 in {clause!r}")
            sizes += [size] * count
            deltas += [d] * count
        return cls(tuple(sizes), tuple(deltas))

    def notation(self) -> str:
        out = []
        i = 0
        while i < len(self.sizes):
            j = i
            while j < len(self.sizes) and (self.sizes[j], self.deltas[j]) == (self.sizes[i], self.deltas[i]):
                j += 1
            clause = f"{self.sizes[i]}x{j - i}"
            if self.deltas[i] != 1.0:
                clause += f"@{self.deltas[i]:g}"
            out.append(clause)
            i = j
        return "+".join(out)

    @property
    def n_groups(self) -> int:
        return len(self.sizes)

    @property
    def state_size(self) -> int:
        return sum(self.sizes)

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.intp)

    @property
    def group_index(self) -> np.ndarray:
        """Group id of every state unit."""
        return np.repeat(np.arange(self.n_groups), self.sizes)

    def unit_affine(self):
        """Per-unit (scale, offset) mapping softmax output d to alpha = scale * d + offset."""
        scale = np.empty(self.n_groups)
        offset = np.empty(self.n_groups)
        for i, (m, d) in enumerate(zip(self.sizes, self.deltas)):
            if d <= 1.0:
                scale[i], offset[i] = d, 0.0
            else:
                scale[i] = (m - d) / (m - 1)
                offset[i] = (d - 1) / (m - 1)
        gid = self.group_index
        return scale[gid], offset[gid]


@dataclass(frozen=True)
class CellConfig:
    kind: str
    input_size: int
    state_size: int
    groups: Optional[GroupSpec] = None

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ConfigurationError(f"unknown cell kind {self.kind!r}; choose from {KINDS}")
        if self.input_size < 1 or self.state_size < 1:
            raise ConfigurationError("input_size and state_size must be positive")
        if kind == "gdu":
            if self.groups is None:
                raise ConfigurationError("a GDU cell needs a GroupSpec")
            if self.groups.state_size != self.state_size:
                raise ConfigurationError(
                    f"groups cover {self.groups.state_size} units but state_size is {self.state_size}"
                )
        elif self.groups is not None:
            raise ConfigurationError(f"groups only apply to gdu cells, not {kind}")

    @property
    def gates(self) -> tuple:
        return GATES[self.kind]

    @classmethod
    def gdu(cls, input_size: int, groups) -> "CellConfig":
        if isinstance(groups, str):
            groups = GroupSpec.parse(groups)
        return cls("gdu", input_size, groups.state_size, groups)

    def describe(self) -> str:
        if self.kind == "gdu":
            return f"GDU({self.groups.notation()})"
        return f"{self.kind.upper()}({self.state_size})"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "input_size": self.input_size, "state_size": self.state_size}
        if self.groups is not None:
            d["groups"] = {"sizes": list(self.groups.sizes), "deltas": list(self.groups.deltas)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellConfig":
        groups = None
        if d.get("groups"):
            groups = GroupSpec(tuple(d["groups"]["sizes"]), tuple(d["groups"]["deltas"]))
        return cls(d["kind"], int(d["input_size"]), int(d["state_size"]), groups)


@dataclass
class CellState:
    s: np.ndarray
    h: Optional[np.ndarray] = None

    @classmethod
    def zeros(cls, config: CellConfig, batch=None) -> "CellState":
        shape = (config.state_size,) if batch is None else (batch, config.state_size)
        h = np.zeros(shape) if config.kind == "lstm" else None
        return cls(np.zeros(shape), h)

    @property
    def readout(self) -> np.ndarray:
        """The vector the output layer sees (h for LSTM, s otherwise)."""
        return self.h if self.h is not None else self.s


@dataclass
class StepTrace:
    """Everything one step computed, as needed by the backward pass.

    ``alpha``/``beta`` are the write and keep gate vectors (``i``/``f`` for
    LSTM, ``1-z``/``z`` for GRU, ``None`` for SRN). ``pre`` maps gate name to
    its pre-activation.
    """

    prev: CellState
    new: CellState
    cand: np.ndarray
    pre: dict
    alpha: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    gates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def distributor(logits, groups: GroupSpec) -> np.ndarray:
    """Grouped softmax gate: within group i the outputs sum to ``delta_i``."""
    logits = np.asarray(logits, dtype=DTYPE)
    if logits.shape[-1] != groups.state_size:
        raise ConfigurationError(
            f"distributor got {logits.shape[-1]} logits for groups covering {groups.state_size} units"
        )
    d = _group_softmax(logits, groups.starts, groups.group_index)
    scale, offset = groups.unit_affine()
    return scale * d + offset


def _group_softmax(logits, starts, gid):
    z = logits - np.maximum.reduceat(logits, starts, axis=-1)[..., gid]
    e = np.exp(z)
    return e / np.add.reduceat(e, starts, axis=-1)[..., gid]


def _group_softmax_backward(d, grad_d, starts, gid):
    dot = np.add.reduceat(d * grad_d, starts, axis=-1)[..., gid]
    return d * (grad_d - dot)


def overwrite_proportion(alpha) -> np.ndarray:
    """Mean of the alpha gate over state units: the share of state overwritten per step."""
    return np.asarray(alpha).mean(axis=-1)


# ---------------------------------------------------------------------------
# Cells. Each one fuses its per-gate parameters once per sequence (``fuse``),
# advances one step from a precomputed input projection (``advance``) and
# back-propagates one step (``backprop``). ``backprop`` returns the gradient
# w.r.t. every gate pre-activation, concatenated in gate order, plus the
# gradients w.r.t. the previous state.
# ---------------------------------------------------------------------------


class Cell:
    kind = ""

    def __init__(self, config: CellConfig):
        self.config = config
        self.gates = GATES[config.kind]
        self.K = config.state_size

    def fuse(self, params):
        W = np.concatenate([params[f"{g}.W"] for g in self.gates], axis=1)
        b = np.concatenate([params[f"{g}.b"] for g in self.gates])
        U = np.concatenate([params[f"{g}.U"] for g in self.gates], axis=1)
        return W, b, U

    def input_proj(self, fused, x):
        return x @ fused[0] + fused[1]

    def u_input(self, trace: StepTrace, gate: str):
        """Vector multiplied by ``<gate>.U`` in this step."""
        return trace.prev.readout


class SRNCell(Cell):
    kind = "srn"

    def advance(self, fused, xp, state):
        U = fused[2]
        pre = xp + state.s @ U
        s = np.tanh(pre)
        return CellState(s), StepTrace(state, CellState(s), s, {"s": pre})

    def backprop(self, fused, tr, ds, dh=None):
        dpre = ds * (1.0 - tr.new.s ** 2)
        return dpre, dpre @ fused[2].T, None


class _CoupledCell(Cell):
    """s' = (1 - a) * s + a * tanh(cand_pre), for cells whose only gate is ``a``."""

    def _gate(self, pre_a):
        """Return ``(alpha, extra gate vectors to keep in the trace)``."""
        raise NotImplementedError

    def _gate_backward(self, tr, dalpha):
        raise NotImplementedError

    def advance(self, fused, xp, state):
        K = self.K
        pre = xp + state.s @ fused[2]
        pre_a, pre_c = pre[..., :K], pre[..., K:]
        alpha, gates = self._gate(pre_a)
        beta = 1.0 - alpha
        cand = np.tanh(pre_c)
        s = beta * state.s + alpha * cand
        new = CellState(s)
        return new, StepTrace(state, new, cand, {"a": pre_a, "cand": pre_c}, alpha, beta, gates)

    def backprop(self, fused, tr, ds, dh=None):
        dalpha = ds * (tr.cand - tr.prev.s)
        dpre_c = ds * tr.alpha * (1.0 - tr.cand ** 2)
        dpre_a = self._gate_backward(tr, dalpha)
        dpre = np.concatenate([dpre_a, dpre_c], axis=-1)
        ds_prev = ds * tr.beta + dpre @ fused[2].T
        return dpre, ds_prev, None


class UGRNNCell(_CoupledCell):
    kind = "ugrnn"

    def _gate(self, pre_a):
        return sigmoid(pre_a), {}

    def _gate_backward(self, tr, dalpha):
        return dalpha * tr.alpha * tr.beta


class GDUCell(_CoupledCell):
    kind = "gdu"

    def __init__(self, config):
        super().__init__(config)
        g = config.groups
        self._starts = g.starts
        self._gid = g.group_index
        self._scale, self._offset = g.unit_affine()

    def _gate(self, pre_a):
        d = _group_softmax(pre_a, self._starts, self._gid)
        return self._scale * d + self._offset, {"d": d}

    def _gate_backward(self, tr, dalpha):
        return _group_softmax_backward(tr.gates["d"], dalpha * self._scale, self._starts, self._gid)


class GRUCell(Cell):
    kind = "gru"

    def fuse(self, params):
        W, b, _ = super().fuse(params)
        Urz = np.concatenate([params["r.U"], params["z.U"]], axis=1)
        return W, b, Urz, params["cand.U"]

    def u_input(self, tr, gate):
        return tr.extra["rs"] if gate == "cand" else tr.prev.s

    def advance(self, fused, xp, state):
        K = self.K
        _, _, Urz, Uc = fused
        s_prev = state.s
        rz = sigmoid(xp[..., : 2 * K] + s_prev @ Urz)
        r, z = rz[..., :K], rz[..., K:]
        rs = r * s_prev
        pre_c = xp[..., 2 * K:] + rs @ Uc
        cand = np.tanh(pre_c)
        s = z * s_prev + (1.0 - z) * cand
        new = CellState(s)
        tr = StepTrace(state, new, cand, {"cand": pre_c}, 1.0 - z, z, {"r": r, "z": z}, {"rs": rs})
        return new, tr

    def backprop(self, fused, tr, ds, dh=None):
        _, _, Urz, Uc = fused
        r, z = tr.gates["r"], tr.gates["z"]
        s_prev = tr.prev.s
        dz = ds * (s_prev - tr.cand)
        dpre_c = ds * (1.0 - z) * (1.0 - tr.cand ** 2)
        drs = dpre_c @ Uc.T
        dpre_r = drs * s_prev * r * (1.0 - r)
        dpre_z = dz * z * (1.0 - z)
        dpre_rz = np.concatenate([dpre_r, dpre_z], axis=-1)
        ds_prev = ds * z + drs * r + dpre_rz @ Urz.T
        return np.concatenate([dpre_rz, dpre_c], axis=-1), ds_prev, None


class LSTMCell(Cell):
    """Forget-gate LSTM without peepholes; gates read the previous output h."""

    kind = "lstm"

    def advance(self, fused, xp, state):
        K = self.K
        pre = xp + state.h @ fused[2]
        fio = sigmoid(pre[..., : 3 * K])
        f, i, o = fio[..., :K], fio[..., K: 2 * K], fio[..., 2 * K:]
        cand = np.tanh(pre[..., 3 * K:])
        s = f * state.s + i * cand
        tanh_s = np.tanh(s)
        h = o * tanh_s
        new = CellState(s, h)
        pres = {"f": pre[..., :K], "i": pre[..., K: 2 * K], "o": pre[..., 2 * K: 3 * K], "cand": pre[..., 3 * K:]}
        return new, StepTrace(state, new, cand, pres, i, f, {"f": f, "i": i, "o": o}, {"tanh_s": tanh_s})

    def backprop(self, fused, tr, ds, dh):
        f, i, o = tr.gates["f"], tr.gates["i"], tr.gates["o"]
        tanh_s = tr.extra["tanh_s"]
        ds_tot = ds + dh * o * (1.0 - tanh_s ** 2)
        dpre = np.concatenate(
            [
                ds_tot * tr.prev.s * f * (1.0 - f),
                ds_tot * tr.cand * i * (1.0 - i),
                dh * tanh_s * o * (1.0 - o),
                ds_tot * i * (1.0 - tr.cand ** 2),
            ],
            axis=-1,
        )
        return dpre, ds_tot * f, dpre @ fused[2].T


_CELLS = {c.kind: c for c in (SRNCell, LSTMCell, GRUCell, UGRNNCell, GDUCell)}


def make_cell(config: CellConfig) -> Cell:
    return _CELLS[config.kind](config)


def step(config: CellConfig, params: dict, x, state: CellState):
    """Advance one step from ``state`` on input ``x``. Returns ``(new_state, trace)``."""
    cell = make_cell(config)
    check_params(config, params)
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != config.input_size:
        raise ConfigurationError(f"input has {x.shape[-1]} features, cell expects {config.input_size}")
    fused = cell.fuse(params)
    new, trace = cell.advance(fused, cell.input_proj(fused, x), state)
    if not (np.all(np.isfinite(new.s)) and (new.h is None or np.all(np.isfinite(new.h)))):
        raise NumericFault(f"non-finite state in {config.kind} step")
    return new, trace


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def param_shapes(config: CellConfig, output_size: Optional[int] = None) -> dict:
    D, K = config.input_size, config.state_size
    shapes = {}
    for g in config.gates:
        shapes[f"{g}.W"] = (D, K)
        shapes[f"{g}.U"] = (K, K)
        shapes[f"{g}.b"] = (K,)
    if output_size is not None:
        shapes["out.W"] = (K, output_size)
        shapes["out.b"] = (output_size,)
    return shapes


def param_count(config: CellConfig) -> int:
    """Number of recurrent-cell parameters (no read-out layer)."""
    D, K = config.input_size, config.state_size
    return len(config.gates) * (D * K + K * K + K)


def model_param_count(config: CellConfig, output_size: int) -> int:
    """Cell parameters plus a linear read-out ``K -> output_size``."""
    return param_count(config) + config.state_size * output_size + output_size


def init_params(config: CellConfig, rng: Rng, output_size: Optional[int] = None) -> dict:
    """Xavier-uniform weights and zero biases, drawn in :func:`param_shapes` order."""
    params = {}
    for name, shape in param_shapes(config, output_size).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = xavier_uniform(rng, *shape)
    return params


def check_params(config: CellConfig, params: dict, output_size: Optional[int] = None) -> None:
    expected = param_shapes(config, output_size)
    for name, shape in expected.items():
        if name not in params:
            raise ConfigurationError(f"missing parameter {name!r} for {config.describe()}")
        if params[name].shape != shape:
            raise ConfigurationError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")


# ---------------------------------------------------------------------------
# Checkpoints
#
# A checkpoint is an uncompressed numpy ``.npz`` archive. Member
# ``__meta__`` is a uint8 array holding UTF-8 JSON with keys ``config``
# (CellConfig.to_dict()), ``output_size``, ``order`` (parameter names in
# serialization order) and any user metadata. Every other member is one
# float64 parameter array named as in the params dict. Arrays are stored
# verbatim, so a save/load round trip is bit-exact.
# ---------------------------------------------------------------------------


def save_checkpoint(path, config: CellConfig, params: dict, output_size=None, meta=None) -> None:
    order = list(param_shapes(config, output_size))
    header = {"config": config.to_dict(), "output_size": output_size, "order": order, "meta": meta or {}}
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    arrays = {name: np.ascontiguousarray(params[name], dtype=DTYPE) for name in order}
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    with os.fdopen(fd, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(config, params, output_size, meta)``."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__meta__"]).decode())
        params = {name: data[name].copy() for name in header["order"]}
    config = CellConfig.from_dict(header["config"])
    out = header["output_size"]
    check_params(config, params, out)
    return config, params, out, header["meta"]


def check_params_finite(params: dict) -> None:
    for name, p in params.items():
        check_finite(p, f"parameter {name}")
