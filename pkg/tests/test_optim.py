import numpy as np
import pytest

from typolab.autodiff import Tensor, backward
from typolab import autodiff as ad
from typolab.errors import ContractViolation
from typolab.optim import AdamWState, adamw_step, linear_warmup_schedule, zero_grads


class TestSchedule:
    def test_peak_exactly_at_warmup(self):
        schedule = linear_warmup_schedule(3e-4, warmup_steps=100, total_steps=1000)
        assert schedule(100) == pytest.approx(3e-4)

    def test_linear_rampup(self):
        schedule = linear_warmup_schedule(1e-3, 10, 100)
        assert schedule(5) == pytest.approx(5e-4)

    def test_decays_to_zero_at_total(self):
        schedule = linear_warmup_schedule(1e-3, 10, 100)
        assert schedule(100) == 0.0
        assert schedule(55) == pytest.approx(1e-3 * 45 / 90)

    def test_invalid_schedule(self):
        with pytest.raises(ContractViolation):
            linear_warmup_schedule(1e-3, -1, 100)


class TestAdamW:
    def test_zero_grad_zero_decay_leaves_params(self):
        p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
        state = AdamWState(lr=0.1, weight_decay=0.0)
        before = p.data.copy()
        adamw_step({"p": p}, state)
        assert np.array_equal(p.data, before)

    def test_weight_decay_shrinks_without_gradient(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        state = AdamWState(lr=0.1, weight_decay=0.5)
        adamw_step({"p": p}, state)
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5)

    def test_first_step_magnitude_close_to_lr(self):
        # with bias correction the first Adam update is ~lr * sign(grad)
        p = Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
        p.grad = np.array([3.7], dtype=np.float32)
        adamw_step({"p": p}, AdamWState(lr=0.01, weight_decay=0.0))
        assert abs(p.data[0] + 0.01) < 1e-6

    def test_quadratic_descent_monotone_after_warmup(self):
        # minimize 0.5 * ||x - t||^2 over 200 steps
        rng = np.random.default_rng(0)
        target = Tensor(rng.normal(size=12).astype(np.float64))
        x = Tensor(np.zeros(12), requires_grad=True)
        state = AdamWState(lr=0.05, weight_decay=0.0)
        schedule = linear_warmup_schedule(0.05, 10, 200)
        losses = []
        for _ in range(200):
            zero_grads({"x": x})
            diff = ad.sub(x, target)
            loss = ad.sum_(ad.mul(diff, diff)) * 0.5
            losses.append(loss.item())
            backward(loss)
            adamw_step({"x": x}, state, schedule)
        after_warmup = losses[10:]
        assert all(b <= a + 1e-12 for a, b in zip(after_warmup, after_warmup[1:]))
        assert losses[-1] < 0.01 * losses[0]

    def test_shape_mismatch_rejected(self):
        p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        p.grad = np.zeros(4, dtype=np.float32)
        with pytest.raises(ContractViolation):
            adamw_step({"p": p}, AdamWState())

    def test_moment_buffers_match_param_shapes(self):
        p = Tensor(np.zeros((2, 3), dtype=np.float32), requires_grad=True)
        p.grad = np.ones((2, 3), dtype=np.float32)
        state = AdamWState(lr=0.01)
        adamw_step({"p": p}, state)
        assert state.m["p"].shape == (2, 3)
        assert state.v["p"].shape == (2, 3)
        assert state.step == 1
