"""Adam optimizer: clipping arithmetic, update direction, convergence."""

import numpy as np
import pytest

from diffens.nn.optim import Adam
from diffens.nn.params import ParamStore
from diffens.seeding import rng_for


def store_of(values, dtype=np.float64):
    values = np.asarray(values, dtype=dtype)
    s = ParamStore(dtype)
    s.declare("w", values.shape, "zeros")
    s.build(rng_for(0))
    s.set_flat(values)
    return s


class TestClipping:
    def test_norm_twice_threshold_clips_to_threshold(self):
        s = store_of(np.zeros(4))
        s.grads[:] = 1.0  # ||g|| = 2
        applied = Adam(s, lr=1e-3).clip_and_step(max_norm=1.0)
        assert applied == pytest.approx(1.0, rel=1e-12)

    def test_norm_below_threshold_untouched(self):
        s = store_of(np.zeros(4))
        s.grads[:] = 0.25  # ||g|| = 0.5
        applied = Adam(s, lr=1e-3).clip_and_step(max_norm=1.0)
        assert applied == pytest.approx(0.5, rel=1e-12)

    def test_zero_gradient_noop_norm(self):
        s = store_of(np.array([1.0, 2.0]))
        applied = Adam(s, lr=1e-3).clip_and_step(max_norm=1.0)
        assert applied == 0.0
        np.testing.assert_array_equal(s.params, [1.0, 2.0])

    def test_nonfinite_gradient_raises_and_preserves_state(self):
        s = store_of(np.array([1.0, 2.0]))
        opt = Adam(s, lr=1e-3)
        s.grads[:] = [np.nan, 1.0]
        with pytest.raises(FloatingPointError, match="non-finite"):
            opt.clip_and_step(max_norm=1.0)
        np.testing.assert_array_equal(s.params, [1.0, 2.0])
        np.testing.assert_array_equal(opt.m, 0.0)
        assert opt.t == 0

    def test_infinite_threshold_is_plain_adam(self):
        a, b = store_of(np.zeros(3)), store_of(np.zeros(3))
        oa, ob = Adam(a, lr=1e-2), Adam(b, lr=1e-2)
        g = np.array([3.0, -4.0, 12.0])  # norm 13
        a.grads[:] = g
        b.grads[:] = g
        oa.clip_and_step(max_norm=np.inf)
        ob.clip_and_step(max_norm=1e18)
        np.testing.assert_array_equal(a.params, b.params)


class TestUpdates:
    def test_first_step_moves_by_lr_signwise(self):
        # with bias correction, the first Adam step is ~lr * sign(g)
        s = store_of(np.zeros(3))
        s.grads[:] = [5.0, -0.5, 2.0]
        Adam(s, lr=0.1).clip_and_step(max_norm=np.inf)
        np.testing.assert_allclose(s.params, [-0.1, 0.1, -0.1], rtol=1e-6)

    def test_lr_validation(self):
        with pytest.raises(ValueError, match="learning rate"):
            Adam(store_of(np.zeros(2)), lr=0.0)

    def test_converges_on_quadratic(self):
        # minimize ||w - target||^2 by feeding the analytic gradient
        target = np.array([1.0, -2.0, 0.5])
        s = store_of(np.zeros(3))
        opt = Adam(s, lr=0.05)
        for _ in range(500):
            s.grads[:] = 2.0 * (s.params - target)
            opt.clip_and_step(max_norm=10.0)
        np.testing.assert_allclose(s.params, target, atol=1e-3)

    def test_deterministic_sequence(self):
        def run():
            s = store_of(np.ones(4))
            opt = Adam(s, lr=0.01)
            rng = rng_for(5)
            for _ in range(20):
                s.grads[:] = rng.standard_normal(4)
                opt.clip_and_step(max_norm=1.0)
            return s.get_flat()

        np.testing.assert_array_equal(run(), run())

    def test_clipped_direction_matches_scaled_gradient(self):
        # one step with ||g|| = 2x threshold equals one step with g/2
        ga = np.array([0.6, 0.8]) * 2.0  # norm 2.0
        a, b = store_of(np.zeros(2)), store_of(np.zeros(2))
        a.grads[:] = ga
        b.grads[:] = ga / 2.0
        Adam(a, lr=0.01).clip_and_step(max_norm=1.0)
        Adam(b, lr=0.01).clip_and_step(max_norm=np.inf)
        np.testing.assert_allclose(a.params, b.params, rtol=1e-12)
