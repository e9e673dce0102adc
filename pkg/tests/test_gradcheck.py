"""Gradient oracle runs for every primitive op, plus kernel-backend parity."""

import numpy as np
import pytest

import funet.tensor as fn
from funet import kernels
from funet.gradcheck import grad_check, op_checks
from funet.tensor import Tape, Tensor

TOL = 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_all_ops_pass_gradient_oracle(seed):
    results = op_checks(seed)
    bad = {name: err for name, err in results.items() if err >= TOL}
    assert not bad, f"ops exceeding {TOL}: {bad}"


def test_sigmoid_sum_small_error(rng):
    x = Tensor(rng.normal(scale=0.5, size=(3, 4)), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: fn.sigmoid(t).sum(), [x])
    assert err < 1e-6


def test_linear_function_machine_precision(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: (t * 3.0).sum(), [x])
    assert err < 1e-9


def test_relu_away_from_kink(rng):
    data = rng.uniform(0.3, 1.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
    x = Tensor(data, requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: fn.relu(t).sum(), [x])
    assert err < 1e-6


class TestBackendParity:
    """numba and numpy kernel paths must agree elementwise."""

    @pytest.fixture(autouse=True)
    def _require_numba(self):
        if not kernels.HAS_NUMBA:
            pytest.skip("numba unavailable")

    @pytest.mark.parametrize(
        "shape,wshape,stride,padding,dilation",
        [
            ((2, 3, 8, 9), (4, 3, 3, 3), (1, 1), (1, 1), (1, 1)),
            ((1, 2, 10, 7), (3, 2, 2, 5), (2, 1), (0, 2), (1, 1)),
            ((2, 4, 9, 9), (2, 4, 3, 3), (1, 2), (2, 2), (2, 3)),
        ],
    )
    def test_conv_forward_backward_identical(self, rng, shape, wshape, stride, padding, dilation):
        x = rng.normal(size=shape)
        w = rng.normal(size=wshape)
        outs, grads = [], []
        for backend in ("numpy", "numba"):
            prev = kernels.set_backend(backend)
            try:
                xt = Tensor(x, requires_grad=True, dtype=np.float64)
                wt = Tensor(w, requires_grad=True, dtype=np.float64)
                with Tape() as tape:
                    out = fn.conv2d(xt, wt, stride=stride, padding=padding, dilation=dilation)
                    loss = (out * out).sum()
                tape.backward(loss)
                outs.append(out.data.copy())
                grads.append((xt.grad.copy(), wt.grad.copy()))
            finally:
                kernels.set_backend(prev)
        np.testing.assert_array_equal(outs[0], outs[1])
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])

    def test_backend_flag_roundtrip(self):
        prev = kernels.set_backend("numpy")
        assert kernels.backend_name() == "numpy"
        kernels.set_backend(prev)
        assert kernels.backend_name() == prev

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError):
            kernels.set_backend("gpu")
