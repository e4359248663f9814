"""Unrolling, exact backpropagation through time and gradient-flow diagnostics.

Sequences are batched time-major: inputs have shape ``(T, B, D)``. A single
sequence of shape ``(T, D)`` is treated as a batch of one.

Loss kinds
----------
``mse_final``
    Mean squared error of the linear read-out at the last step, averaged
    over batch and output units. Targets: ``(B, O)`` floats.
``softmax_ce_final``
    Softmax cross-entropy at the last step, averaged over the batch.
    Targets: ``(B,)`` class indices.
``softmax_ce_per_step``
    Softmax cross-entropy at every unmasked step, averaged over unmasked
    steps. Targets ``(T, B)`` class indices; ``mask`` ``(T, B)`` of 0/1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cells import CellConfig, CellState, StepTrace, check_params, make_cell
from .errors import ConfigurationError, NumericFault
from .numerics import DTYPE, Rng, log_softmax, softmax_stable

LOSSES = ("mse_final", "softmax_ce_final", "softmax_ce_per_step")


@dataclass
class Batch:
    """Time-major batch. ``mask`` is present exactly when targets are per step."""

    inputs: np.ndarray
    targets: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=DTYPE)
        if self.inputs.ndim != 3:
            raise ConfigurationError(f"inputs must be (T, B, D), got shape {self.inputs.shape}")

    @classmethod
    def single(cls, inputs, target, mask=None) -> "Batch":
        """Batch of one sequence ``(T, D)``."""
        inputs = np.asarray(inputs, dtype=DTYPE)[:, None, :]
        target = np.asarray(target)
        if mask is not None:
            return cls(inputs, target[:, None], np.asarray(mask, dtype=DTYPE)[:, None])
        return cls(inputs, target[None])

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def size(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        if self.mask is None:
            return Batch(self.inputs[:, idx], self.targets[idx])
        mask = self.mask[:, idx]
        used = np.flatnonzero(mask.any(axis=1))
        T = int(used[-1]) + 1 if used.size else 1
        return Batch(self.inputs[:T, idx], self.targets[:T, idx], mask[:T])


@dataclass
class UnrollTape:
    traces: list
    inputs: np.ndarray
    outputs: np.ndarray
    loss: float
    loss_kind: str
    initial: CellState
    batch: Batch = field(repr=False, default=None)

    def __len__(self):
        return len(self.traces)


@dataclass
class Gradients:
    params: dict
    initial_state: CellState


@dataclass
class NormProbe:
    """Norm of dL/ds_t for t = 1..T (LSTM: norm over the pair (s_t, h_t))."""

    norms: np.ndarray

    def normalized(self) -> np.ndarray:
        top = self.norms.max()
        return self.norms / top if top > 0 else self.norms.copy()

    def decay_ratio(self) -> float:
        """||dL/ds_1|| / ||dL/ds_T||."""
        return float(self.norms[0] / self.norms[-1]) if self.norms[-1] > 0 else float("nan")

    def to_csv(self, path) -> None:
        write_csv(
            path,
            ["t", "norm", "norm_normalized"],
            [(t + 1, n, m) for t, (n, m) in enumerate(zip(self.norms, self.normalized()))],
        )


def _check_loss(kind):
    if kind not in LOSSES:
        raise ConfigurationError(f"unknown loss {kind!r}; choose from {LOSSES}")


def _output_params(params):
    if "out.W" not in params:
        raise ConfigurationError("model has no read-out layer (out.W / out.b)")
    return params["out.W"], params["out.b"]


def _loss_and_grad(kind, y, batch: Batch):
    """Loss value and dL/dy for read-out ``y`` (``(B, O)`` or ``(T, B, O)``)."""
    if kind == "mse_final":
        target = np.asarray(batch.targets, dtype=DTYPE).reshape(y.shape)
        diff = y - target
        return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
    if kind == "softmax_ce_final":
        labels = np.asarray(batch.targets, dtype=np.intp).reshape(-1)
        logp = log_softmax(y)
        B = y.shape[0]
        loss = -float(logp[np.arange(B), labels].mean())
        dy = np.exp(logp)
        dy[np.arange(B), labels] -= 1.0
        return loss, dy / B
    labels = np.asarray(batch.targets, dtype=np.intp)
    mask = np.ones(labels.shape) if batch.mask is None else np.asarray(batch.mask, dtype=DTYPE)
    denom = mask.sum()
    if denom <= 0:
        raise ConfigurationError("per-step loss mask selects no steps")
    logp = log_softmax(y)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    loss = -float((picked * mask).sum() / denom)
    dy = np.exp(logp)
    np.put_along_axis(dy, labels[..., None], np.take_along_axis(dy, labels[..., None], axis=-1) - 1.0, axis=-1)
    return loss, dy * (mask / denom)[..., None]


def _initial(config, B, state0):
    if state0 is None:
        return CellState.zeros(config, B)
    s = np.broadcast_to(state0.s, (B, config.state_size)).astype(DTYPE)
    h = None if state0.h is None else np.broadcast_to(state0.h, (B, config.state_size)).astype(DTYPE)
    return CellState(s, h)


def _first_bad_step(traces):
    for t, tr in enumerate(traces):
        if not np.all(np.isfinite(tr.new.readout)) or not np.all(np.isfinite(tr.new.s)):
            return t
    return None


def forward(params: dict, config: CellConfig, batch: Batch, loss_kind: str, state0: Optional[CellState] = None):
    """Run the whole sequence, keeping every step's trace. Returns ``(loss, tape)``."""
    _check_loss(loss_kind)
    Wo, bo = _output_params(params)
    check_params(config, params, Wo.shape[1])
    if batch.inputs.shape[2] != config.input_size:
        raise ConfigurationError(f"inputs have {batch.inputs.shape[2]} features, cell expects {config.input_size}")
    cell = make_cell(config)
    fused = cell.fuse(params)
    xproj = cell.input_proj(fused, batch.inputs)
    state = _initial(config, batch.size, state0)
    initial = state
    traces = []
    for t in range(batch.T):
        state, tr = cell.advance(fused, xproj[t], state)
        traces.append(tr)
    if loss_kind == "softmax_ce_per_step":
        readouts = np.stack([tr.new.readout for tr in traces])
    else:
        readouts = state.readout
    y = readouts @ Wo + bo
    if not np.all(np.isfinite(y)):
        bad = _first_bad_step(traces)
        raise NumericFault("non-finite activations in forward pass", step=bad)
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported as a fault just below
        loss, _ = _loss_and_grad(loss_kind, y, batch)
    if not np.isfinite(loss):
        raise NumericFault("non-finite loss", step=batch.T - 1)
    return loss, UnrollTape(traces, batch.inputs, y, loss, loss_kind, initial, batch)


def backward(tape: UnrollTape, params: dict, config: CellConfig):
    """Exact gradients of ``tape.loss``. Returns ``(Gradients, NormProbe)``."""
    if len(tape) != tape.inputs.shape[0] or tape.inputs.shape[2] != config.input_size:
        raise ConfigurationError("tape does not match this configuration")
    Wo, _ = _output_params(params)
    check_params(config, params, Wo.shape[1])
    if tape.traces and tape.traces[0].new.s.shape[-1] != config.state_size:
        raise ConfigurationError("tape state size does not match configuration")
    cell = make_cell(config)
    fused = cell.fuse(params)
    T, B, D = tape.inputs.shape
    K = config.state_size
    lstm = config.kind == "lstm"
    _, dy = _loss_and_grad(tape.loss_kind, tape.outputs, tape.batch)

    grads = {}
    if tape.loss_kind == "softmax_ce_per_step":
        R = np.stack([tr.new.readout for tr in tape.traces])
        grads["out.W"] = R.reshape(T * B, K).T @ dy.reshape(T * B, -1)
        grads["out.b"] = dy.sum(axis=(0, 1))
        dread = dy @ Wo.T
    else:
        R = tape.traces[-1].new.readout
        grads["out.W"] = R.T @ dy
        grads["out.b"] = dy.sum(axis=0)
        dread = None
        dread_last = dy @ Wo.T

    G = len(cell.gates)
    dpre = np.empty((T, B, G * K))
    norms = np.empty(T)
    ds = np.zeros((B, K))
    dh = np.zeros((B, K)) if lstm else None
    for t in range(T - 1, -1, -1):
        inj = dread[t] if dread is not None else (dread_last if t == T - 1 else None)
        if lstm:
            if inj is not None:
                dh = dh + inj
            norms[t] = np.sqrt(np.sum(ds * ds) + np.sum(dh * dh))
        else:
            if inj is not None:
                ds = ds + inj
            norms[t] = np.sqrt(np.sum(ds * ds))
        dpre[t], ds, dh = cell.backprop(fused, tape.traces[t], ds, dh)

    X = tape.inputs.reshape(T * B, D)
    P = dpre.reshape(T * B, G * K)
    dW = X.T @ P
    db = P.sum(axis=0)
    prev_readout = np.stack([tr.prev.readout for tr in tape.traces]).reshape(T * B, K)
    for gi, g in enumerate(cell.gates):
        sl = slice(gi * K, (gi + 1) * K)
        grads[f"{g}.W"] = dW[:, sl]
        grads[f"{g}.b"] = db[sl]
        if config.kind == "gru" and g == "cand":
            u_in = np.stack([tr.extra["rs"] for tr in tape.traces]).reshape(T * B, K)
        else:
            u_in = prev_readout
        grads[f"{g}.U"] = u_in.T @ P[:, sl]
    return Gradients(grads, CellState(ds, dh)), NormProbe(norms)


def predict(params: dict, config: CellConfig, inputs: np.ndarray, per_step: bool = False, chunk: int = 1000):
    """Read-out without keeping a tape: ``(B, O)`` at the last step or ``(T, B, O)`` per step."""
    inputs = np.asarray(inputs, dtype=DTYPE)
    if inputs.ndim == 2:
        inputs = inputs[:, None, :]
    Wo, bo = _output_params(params)
    cell = make_cell(config)
    fused = cell.fuse(params)
    outs = []
    for start in range(0, inputs.shape[1], chunk):
        xs = inputs[:, start: start + chunk]
        xproj = cell.input_proj(fused, xs)
        state = CellState.zeros(config, xs.shape[1])
        steps = []
        for t in range(xs.shape[0]):
            state, _ = cell.advance(fused, xproj[t], state)
            if per_step:
                steps.append(state.readout)
        r = np.stack(steps) if per_step else state.readout
        outs.append(r @ Wo + bo)
    y = np.concatenate(outs, axis=-2)
    if not np.all(np.isfinite(y)):
        raise NumericFault("non-finite read-out in evaluation")
    return y


def trace_sequence(params: dict, config: CellConfig, inputs: np.ndarray) -> list:
    """Per-step traces for one sequence ``(T, D)`` (used for gate dumps)."""
    cell = make_cell(config)
    fused = cell.fuse(params)
    xproj = cell.input_proj(fused, np.asarray(inputs, dtype=DTYPE))
    state = CellState.zeros(config)
    traces = []
    for t in range(xproj.shape[0]):
        state, tr = cell.advance(fused, xproj[t], state)
        traces.append(tr)
    return traces


# ---------------------------------------------------------------------------
# One-step Jacobians
# ---------------------------------------------------------------------------


def _flat_state(config, state):
    return np.concatenate([state.s, state.h]) if config.kind == "lstm" else state.s.copy()


def _unflat_state(config, v):
    K = config.state_size
    return CellState(v[:K], v[K:]) if config.kind == "lstm" else CellState(v)


def _one_step(cell, fused, x, config, v):
    new, _ = cell.advance(fused, cell.input_proj(fused, x), _unflat_state(config, v))
    return _flat_state(config, new)


def transition_jacobian_fd(params, config: CellConfig, x, state: CellState, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian d(new state)/d(previous state).

    ``J[i, j] = d new_i / d prev_j``. For LSTM the state is the concatenation
    ``(s, h)`` so the matrix is ``2K x 2K``.
    """
    cell = make_cell(config)
    fused = cell.fuse(params)
    x = np.asarray(x, dtype=DTYPE)
    v0 = _flat_state(config, state)
    n = v0.size
    J = np.empty((n, n))
    for j in range(n):
        vp, vm = v0.copy(), v0.copy()
        vp[j] += eps
        vm[j] -= eps
        J[:, j] = (_one_step(cell, fused, x, config, vp) - _one_step(cell, fused, x, config, vm)) / (2 * eps)
    return J


def step_vjp(params, config: CellConfig, x, state: CellState, cotangent) -> np.ndarray:
    """``cotangent @ J`` for the one-step Jacobian, via the analytic backward step."""
    cell = make_cell(config)
    fused = cell.fuse(params)
    _, tr = cell.advance(fused, cell.input_proj(fused, np.asarray(x, dtype=DTYPE)), state)
    c = np.asarray(cotangent, dtype=DTYPE)
    K = config.state_size
    if config.kind == "lstm":
        _, ds, dh = cell.backprop(fused, tr, c[:K], c[K:])
        return np.concatenate([ds, dh])
    _, ds, _ = cell.backprop(fused, tr, c)
    return ds


def transition_jacobian(params, config: CellConfig, x, state: CellState) -> np.ndarray:
    """Analytic one-step Jacobian assembled row by row from :func:`step_vjp`."""
    n = _flat_state(config, state).size
    return np.stack([step_vjp(params, config, x, state, e) for e in np.eye(n)])


def spectral_norm(J, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest singular value of ``J`` by power iteration on ``J^T J``."""
    J = np.asarray(J, dtype=DTYPE)
    if J.size == 0:
        return 0.0
    A = J.T @ J
    v = Rng(0).normal(size=A.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = A @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        lam_new = float(v @ A @ v)
        if abs(lam_new - lam) <= tol * max(lam_new, 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numerical_gradients(params, config, batch, loss_kind, state0=None, eps: float = 1e-5):
    """Central differences of the loss w.r.t. every parameter and the initial state."""
    out = {}
    for name, p in params.items():
        g = np.empty_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            lp, _ = forward(params, config, batch, loss_kind, state0)
            flat[k] = orig - eps
            lm, _ = forward(params, config, batch, loss_kind, state0)
            flat[k] = orig
            gflat[k] = (lp - lm) / (2 * eps)
        out[name] = g
    s0 = _initial(config, batch.size, state0)
    for part in ("s", "h"):
        base = getattr(s0, part)
        if base is None:
            continue
        g = np.empty_like(base)
        for idx in np.ndindex(base.shape):
            vals = []
            for sign in (1, -1):
                pert = CellState(s0.s.copy(), None if s0.h is None else s0.h.copy())
                getattr(pert, part)[idx] += sign * eps
                vals.append(forward(params, config, batch, loss_kind, pert)[0])
            g[idx] = (vals[0] - vals[1]) / (2 * eps)
        out[f"state0.{part}"] = g
    return out


def gradient_check(params, config, batch, loss_kind, state0=None, eps: float = 1e-5) -> dict:
    """Max relative error between analytic and numerical gradients, per array."""
    s0 = _initial(config, batch.size, state0)
    _, tape = forward(params, config, batch, loss_kind, s0)
    grads, _ = backward(tape, params, config)
    analytic = dict(grads.params)
    analytic["state0.s"] = grads.initial_state.s
    if grads.initial_state.h is not None:
        analytic["state0.h"] = grads.initial_state.h
    numeric = numerical_gradients(params, config, batch, loss_kind, s0, eps)
    return {name: float(relative_error(analytic[name], numeric[name]).max()) for name in numeric}


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def write_matrix_csv(path, M, row_label="row", col_prefix="c") -> None:
    M = np.asarray(M)
    header = [row_label] + [f"{col_prefix}{j}" for j in range(M.shape[1])]
    write_csv(path, header, ([i] + list(M[i]) for i in range(M.shape[0])))
