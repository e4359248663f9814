import copy

import numpy as np
import pytest

from gdu.cells import CellConfig, init_params, load_checkpoint
from gdu.errors import ConfigurationError, NumericFault
from gdu.numerics import Rng
from gdu.optim import AdamState, MetricsRecord, TrainConfig, adam_step, should_stop, train
from gdu.tasks import AddingTask, TemporalOrderTask


def adam_scalar_oracle(params, grads, m, v, t, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Element-by-element transcription of the bias-corrected update."""
    t += 1
    out_p, out_m, out_v = {}, {}, {}
    for k in params:
        p = params[k].ravel().tolist()
        g = grads[k].ravel().tolist()
        mm = m[k].ravel().tolist()
        vv = v[k].ravel().tolist()
        for i in range(len(p)):
            mm[i] = b1 * mm[i] + (1 - b1) * g[i]
            vv[i] = b2 * vv[i] + (1 - b2) * g[i] * g[i]
            mhat = mm[i] / (1 - b1 ** t)
            vhat = vv[i] / (1 - b2 ** t)
            p[i] = p[i] - lr * mhat / (vhat ** 0.5 + eps)
        shape = params[k].shape
        out_p[k] = np.array(p).reshape(shape)
        out_m[k] = np.array(mm).reshape(shape)
        out_v[k] = np.array(vv).reshape(shape)
    return out_p, out_m, out_v, t


def test_adam_matches_scalar_oracle():
    rng = Rng(3)
    params = {"a": rng.normal(size=(4, 5)), "b": rng.normal(size=(3,))}
    state = AdamState.zeros_like(params, lr=0.01)
    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    ref, t = params, 0
    for _ in range(25):
        grads = {k: rng.normal(size=p.shape) * 3 for k, p in params.items()}
        params, state = adam_step(params, grads, state)
        ref, m, v, t = adam_scalar_oracle(ref, grads, m, v, t, lr=0.01)
        for k in params:
            np.testing.assert_allclose(params[k], ref[k], rtol=0, atol=1e-12)
            np.testing.assert_allclose(state.m[k], m[k], rtol=0, atol=1e-12)
            np.testing.assert_allclose(state.v[k], v[k], rtol=0, atol=1e-12)
    assert state.t == t == 25


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.arange(6.0).reshape(2, 3)}
    new, st = adam_step(params, {"w": np.zeros((2, 3))}, AdamState.zeros_like(params))
    np.testing.assert_array_equal(new["w"], params["w"])
    assert st.t == 1


def test_adam_first_step_is_lr_sign():
    params = {"w": np.zeros(5)}
    g = np.array([3.0, -0.5, 1e-3, -200.0, 7.0])
    new, _ = adam_step(params, {"w": g}, AdamState.zeros_like(params, lr=1e-3))
    np.testing.assert_allclose(new["w"], -1e-3 * np.sign(g), rtol=1e-4)


def test_adam_does_not_mutate_inputs():
    params = {"w": np.ones(3)}
    st = AdamState.zeros_like(params)
    before = copy.deepcopy((params, st))
    adam_step(params, {"w": np.ones(3)}, st)
    np.testing.assert_array_equal(params["w"], before[0]["w"])
    np.testing.assert_array_equal(st.m["w"], before[1].m["w"])
    assert st.t == 0


def test_adam_quadratic_from_five():
    params = {"x": np.array([5.0])}
    st = AdamState.zeros_like(params, lr=0.1)
    xs = []
    for _ in range(100):
        params, st = adam_step(params, {"x": params["x"].copy()}, st)
        xs.append(abs(params["x"][0]))
    # simple scalar reference: the same recurrence written out by hand
    x, m, v = 5.0, 0.0, 0.0
    for t in range(1, 101):
        m = 0.9 * m + 0.1 * x
        v = 0.999 * v + 0.001 * x * x
        x -= 0.1 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
    assert xs[-1] == pytest.approx(abs(x), abs=1e-12)
    assert xs[-1] < 1.0
    assert all(b < a for a, b in zip(xs[:40], xs[1:40]))


def test_adam_rejects_nonfinite_and_mismatch():
    params = {"w": np.zeros(2)}
    with pytest.raises(NumericFault):
        adam_step(params, {"w": np.array([np.nan, 0.0])}, AdamState.zeros_like(params))
    with pytest.raises(ConfigurationError):
        adam_step(params, {"w": np.zeros(3)}, AdamState.zeros_like(params))
    with pytest.raises(ConfigurationError):
        adam_step(params, {"v": np.zeros(2)}, AdamState.zeros_like(params))


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(stop_rule="mse_below")
    with pytest.raises(ConfigurationError):
        TrainConfig(stop_rule="bogus")
    with pytest.raises(ConfigurationError):
        TrainConfig(lr=0.0)


def test_stop_rules():
    assert should_stop("mse_below", {"test_metric": 0.0019}, 0.002)
    assert not should_stop("mse_below", {"test_metric": 0.002}, 0.002)
    assert should_stop("test_accuracy_equals_1", {"test_metric": 1.0})
    assert not should_stop("test_accuracy_equals_1", {"test_metric": 0.998})
    assert should_stop("sc_and_lc_equal_1", {"test_metric": 1.0, "sc": 1.0, "lc": 1.0})
    assert not should_stop("sc_and_lc_equal_1", {"test_metric": 0.0, "sc": 1.0, "lc": 0.99})
    assert not should_stop("none", {"test_metric": 0.0})


def _small_setup(seed=0):
    task = AddingTask(20, seed=0, test_size=50)
    cfg = CellConfig.gdu(2, "4x2")
    params = init_params(cfg, Rng(seed).spawn(0), 1)
    return task, cfg, params


def test_train_zero_steps_returns_initial():
    task, cfg, params = _small_setup()
    res = train(cfg, params, task, TrainConfig.for_task(task, max_steps=0))
    assert res.metrics == [] and res.stopped_at is None
    for k in params:
        np.testing.assert_array_equal(res.params[k], params[k])


def test_train_is_deterministic():
    task, cfg, params = _small_setup()
    tc = TrainConfig.for_task(task, max_steps=60, eval_every=20, seed=5)
    a = train(cfg, params, task, tc)
    b = train(cfg, params, task, tc)
    strip = lambda recs: [(r.step, r.train_loss, r.test_metric, r.seed) for r in recs]
    assert strip(a.metrics) == strip(b.metrics)
    assert [r.step for r in a.metrics] == [20, 40, 60]
    for k in params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_train_does_not_mutate_initial_params_and_eval_is_pure():
    task, cfg, params = _small_setup()
    before = {k: p.copy() for k, p in params.items()}
    res = train(cfg, params, task, TrainConfig.for_task(task, max_steps=10, eval_every=3))
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])
    snap = {k: p.copy() for k, p in res.params.items()}
    task.evaluate(res.params, cfg)
    for k in snap:
        np.testing.assert_array_equal(res.params[k], snap[k])
    assert [r.step for r in res.metrics] == [3, 6, 9, 10]


def test_train_reduces_loss_on_short_adding():
    task, cfg, params = _small_setup()
    res = train(cfg, params, task, TrainConfig.for_task(task, max_steps=300, eval_every=100, lr=1e-2))
    assert res.metrics[-1].test_metric < res.metrics[0].test_metric


def test_train_stops_on_rule():
    task = TemporalOrderTask(33, seed=0, test_size=20)
    cfg = CellConfig.gdu(6, "8x1")
    params = init_params(cfg, Rng(0).spawn(0), 8)

    class Always(TemporalOrderTask):
        def evaluate(self, params, config):
            return {"test_metric": 1.0}

    always = Always(33, seed=0, test_size=20)
    res = train(cfg, params, always, TrainConfig.for_task(always, max_steps=100, eval_every=7))
    assert res.stopped_at == 7 and len(res.metrics) == 1
    with pytest.raises(ConfigurationError):
        train(CellConfig.gdu(3, "8x1"), init_params(CellConfig.gdu(3, "8x1"), Rng(0), 8), task, TrainConfig())


def test_numeric_fault_persists_last_good(tmp_path):
    task, cfg, params = _small_setup()
    calls = {"n": 0}
    real = task.train_batch

    def poisoned(rng, bs):
        calls["n"] += 1
        b = real(rng, bs)
        if calls["n"] == 4:
            b.inputs[3, 0, 0] = np.nan
        return b

    task.train_batch = poisoned
    path = tmp_path / "fault.npz"
    with pytest.raises(NumericFault) as info:
        train(cfg, params, task, TrainConfig.for_task(task, max_steps=10), fault_checkpoint=str(path))
    assert info.value.train_step == 4
    assert info.value.checkpoint == str(path)
    _, saved, _, meta = load_checkpoint(path)
    assert meta["last_good_step"] == 3
    for k in saved:
        assert np.all(np.isfinite(saved[k]))


def test_metrics_record_row():
    r = MetricsRecord(10, 0.5, 0.25, None, None, 1.0, 7)
    assert r.row() == [10, 0.5, 0.25, None, None, 1.0, 7]
    assert list(r.to_dict()) == list(MetricsRecord.FIELDS)
