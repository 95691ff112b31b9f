import numpy as np
import pytest

from hbflearn import autodiff as ad
from hbflearn.errors import DimensionError
from hbflearn.optim import Adam, RAdam, make_optimizer


def make_param(values):
    return ad.parameter(np.array(values, dtype=np.float64))


class TestAdam:
    def test_zero_grad_zero_decay_is_fixed_point(self):
        p = make_param([1.0, -2.0, 3.0])
        before = p.data.copy()
        opt = Adam([p], lr=0.1)
        for _ in range(5):
            p.grad = np.zeros(3)
            opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_magnitude_is_lr_times_sign(self):
        p = make_param([0.0, 0.0, 0.0])
        opt = Adam([p], lr=0.01, eps=1e-16)
        p.grad = np.array([3.0, -0.5, 1e-3])
        opt.step()
        assert np.allclose(p.data, [-0.01, 0.01, -0.01], atol=1e-8)

    def test_quadratic_bowl_convergence(self):
        p = make_param([1.0, 1.0])
        opt = Adam([p], lr=0.1)
        for _ in range(200):
            p.grad = 2.0 * p.data
            opt.step()
        assert np.linalg.norm(p.data) < 0.01

    def test_decoupled_weight_decay_shrinks_weights(self):
        p = make_param([1.0, -1.0])
        opt = Adam([p], lr=0.1, weight_decay=0.5)
        p.grad = np.zeros(2)
        opt.step()
        # pure decay: p <- p - lr*wd*p, no gradient contribution
        assert np.allclose(p.data, np.array([1.0, -1.0]) * (1 - 0.1 * 0.5))

    def test_none_grad_treated_as_zero(self):
        p = make_param([1.0])
        opt = Adam([p], lr=0.1)
        p.grad = None
        opt.step()
        assert np.array_equal(p.data, [1.0])

    def test_shape_mismatch_rejected(self):
        p = make_param([1.0, 2.0])
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(3)
        with pytest.raises(DimensionError):
            opt.step()

    def test_step_count_increments(self):
        p = make_param([1.0])
        opt = Adam([p])
        for k in range(1, 4):
            p.grad = np.ones(1)
            opt.step()
            assert opt.step_count == k


class TestRAdam:
    def test_early_steps_skip_adaptivity(self):
        # With beta2=0.999 the SMA length stays <= 4 for the first 4 steps,
        # so the update is plain lr * bias-corrected momentum.
        p = make_param([0.0])
        opt = RAdam([p], lr=0.01, beta1=0.9, beta2=0.999)
        p.grad = np.array([2.0])
        opt.step()
        assert np.allclose(p.data, [-0.01 * 2.0])

    def test_rectification_matches_reference_formula(self):
        lr, b1, b2 = 0.01, 0.9, 0.999
        p = make_param([0.5])
        opt = RAdam([p], lr=lr, beta1=b1, beta2=b2, eps=1e-8)
        grads = [1.0, -2.0, 0.5, 1.5, -1.0, 2.0, 0.3]

        # independent reference replay
        ref = 0.5
        m = v = 0.0
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            rho = rho_inf - 2 * t * b2 ** t / (1 - b2 ** t)
            if rho > 4:
                v_hat = v / (1 - b2 ** t)
                r = np.sqrt(((rho - 4) * (rho - 2) * rho_inf)
                            / ((rho_inf - 4) * (rho_inf - 2) * rho))
                ref -= lr * r * m_hat / (np.sqrt(v_hat) + 1e-8)
            else:
                ref -= lr * m_hat

        for g in grads:
            p.grad = np.array([g])
            opt.step()
        assert np.allclose(p.data, [ref], atol=1e-12)

    def test_bowl_convergence(self):
        p = make_param([1.0, -1.0])
        opt = RAdam([p], lr=0.1)
        for _ in range(300):
            p.grad = 2.0 * p.data
            opt.step()
        assert np.linalg.norm(p.data) < 0.02


def test_make_optimizer_dispatch():
    p = make_param([1.0])
    assert isinstance(make_optimizer("adam", [p]), Adam)
    assert isinstance(make_optimizer("radam", [p]), RAdam)
    with pytest.raises(ValueError):
        make_optimizer("sgd", [p])
