import numpy as np
import pytest

from mebqat.autodiff import Tensor
from mebqat.optim import Optimizer, Schedule, make_optimizer, rate_at


def _single(value):
    return {"w": Tensor(np.float32([value]), requires_grad=True)}


def test_sgd_step():
    params = _single(1.0)
    Optimizer("sgd", lr=0.1).apply(params, {"w": np.float32([2.0])})
    np.testing.assert_allclose(params["w"].data, [0.8], rtol=1e-7)


def test_sgd_zero_gradient_is_identity():
    params = _single(3.5)
    Optimizer("sgd", lr=0.5).apply(params, {"w": np.float32([0.0])})
    assert params["w"].data[0] == np.float32(3.5)


def test_adam_first_step_magnitude_is_lr():
    params = _single(0.0)
    opt = Optimizer("adam", lr=0.01)
    opt.apply(params, {"w": np.float32([1.0])})
    # bias-corrected m/sqrt(v) = 1 on the first step
    np.testing.assert_allclose(params["w"].data, [-0.01], rtol=1e-5)
    assert opt.step_count == 1


def test_adamw_decays_weights():
    params = _single(2.0)
    opt = Optimizer("adamw", lr=0.1, weight_decay=0.1)
    opt.apply(params, {"w": np.float32([0.0])})
    assert params["w"].data[0] < 2.0


def test_shape_mismatch_rejected():
    params = _single(1.0)
    with pytest.raises(ValueError, match="shape"):
        Optimizer("sgd", lr=0.1).apply(params, {"w": np.zeros((2, 2), dtype=np.float32)})
    with pytest.raises(KeyError):
        Optimizer("sgd", lr=0.1).apply(params, {"nope": np.float32([1.0])})


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", 0.1)


def test_deterministic_given_state_and_grads():
    grads = {"w": np.float32([0.3])}
    results = []
    for _ in range(2):
        params = _single(1.0)
        opt = Optimizer("adam", lr=0.05)
        for _ in range(5):
            opt.apply(params, grads)
        results.append(params["w"].data.copy())
    assert np.array_equal(results[0], results[1])


def test_sgd_descends_quadratic_monotonically():
    rng = np.random.default_rng(0)
    params = {"w": Tensor(rng.normal(size=8).astype(np.float32), requires_grad=True)}
    opt = Optimizer("sgd", lr=0.1)
    previous = float(np.square(params["w"].data).sum())
    for _ in range(100):
        opt.apply(params, {"w": 2.0 * params["w"].data})
        current = float(np.square(params["w"].data).sum())
        assert current <= previous
        previous = current


def test_step_decay_schedule():
    sched = Schedule("step", base=1e-3, milestones=(50, 75, 90), factor=0.1)
    assert rate_at(sched, 0) == pytest.approx(1e-3)
    assert rate_at(sched, 80) == pytest.approx(1e-5)
    assert rate_at(sched, 95) == pytest.approx(1e-6)


def test_cosine_schedule_endpoints():
    sched = Schedule("cosine", base=0.5, t_max=100)
    assert rate_at(sched, 0) == pytest.approx(0.5)
    assert rate_at(sched, 100) == pytest.approx(0.0, abs=1e-12)


def test_constant_schedule():
    assert rate_at(Schedule("constant", base=0.25), 999) == 0.25


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule("step", milestones=(10, 5), factor=0.1)
    with pytest.raises(ValueError):
        Schedule("step", milestones=(5, 10), factor=1.5)
    with pytest.raises(ValueError):
        Schedule("warmup")
    with pytest.raises(ValueError):
        rate_at(Schedule("constant"), -1)
