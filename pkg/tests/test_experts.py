"""Expert block tests: identity compositions, receptive-field separation,
and full-parameter gradient checks."""

import numpy as np
import pytest

from uniroute import tensor as T
from uniroute.experts import GlobalContextExpert, LocalDetailExpert
from uniroute.tensor import ContractViolation, Tensor, grad_check


def _delta_identity_local(channels):
    e = LocalDetailExpert(channels, np.random.default_rng(0), activation=False)
    e.dw.data[:] = 0.0
    e.dw.data[:, 0, 1, 1] = 1.0
    e.pw.data[:] = np.eye(channels).reshape(channels, channels, 1, 1)
    e.bias.data[:] = 0.0
    return e


def _delta_identity_global(channels):
    e = GlobalContextExpert(channels, np.random.default_rng(0), activation=False)
    for w in (e.dw, e.dilated):
        w.data[:] = 0.0
        w.data[:, 0, 2, 2] = 1.0
    e.pw.data[:] = np.eye(channels).reshape(channels, channels, 1, 1)
    e.bias.data[:] = 0.0
    return e


class TestLocalExpert:
    def test_identity_composition(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        y = _delta_identity_local(3).forward(x)
        np.testing.assert_allclose(y.data, x.data, atol=0)

    def test_receptive_field_is_3x3(self):
        rng = np.random.default_rng(2)
        e = LocalDetailExpert(2, rng)
        x = rng.standard_normal((1, 2, 9, 9))
        base = e.forward(Tensor(x)).data
        x2 = x.copy()
        x2[0, :, 0, 0] += 5.0  # >= 2 pixels from the probed output
        pert = e.forward(Tensor(x2)).data
        assert base[0, :, 4, 4] == pytest.approx(pert[0, :, 4, 4], abs=0)
        # adjacent pixel does influence
        x3 = x.copy()
        x3[0, :, 4, 5] += 5.0
        pert3 = e.forward(Tensor(x3)).data
        assert np.abs(base[0, :, 4, 4] - pert3[0, :, 4, 4]).max() > 0

    def test_channel_mismatch(self):
        e = LocalDetailExpert(3, np.random.default_rng(0))
        with pytest.raises(ContractViolation):
            e.forward(Tensor(np.zeros((1, 2, 4, 4))))

    def test_all_parameter_grad_check(self):
        worst = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            e = LocalDetailExpert(3, rng)
            x = Tensor(rng.standard_normal((1, 3, 6, 6)))

            def f():
                y = e.forward(x)
                return T.tmean(T.mul(y, y))

            for _, p, _ in e.parameters():
                worst = max(worst, grad_check(f, p, step=1e-5))
        assert worst < 1e-4


class TestGlobalExpert:
    def test_identity_parameters_square_input(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((1, 3, 8, 8)))
        y = _delta_identity_global(3).forward(x)
        np.testing.assert_allclose(y.data, x.data * x.data, atol=0)

    def test_zero_input_annihilates(self):
        rng = np.random.default_rng(4)
        e = GlobalContextExpert(4, rng)
        y = e.forward(Tensor(np.zeros((1, 4, 8, 8))))
        np.testing.assert_array_equal(y.data, np.zeros_like(y.data))

    def test_receptive_field_reaches_8_pixels(self):
        rng = np.random.default_rng(5)
        e = GlobalContextExpert(1, rng)
        x = rng.standard_normal((1, 1, 20, 20)) + 1.0  # keep gate factor nonzero
        base = e.forward(Tensor(x)).data
        x2 = x.copy()
        x2[0, 0, 10, 2] += 5.0  # 8 columns away from probe at (10, 10)
        pert = e.forward(Tensor(x2)).data
        assert abs(base[0, 0, 10, 10] - pert[0, 0, 10, 10]) > 0

        # beyond the 17x17 support nothing changes
        x3 = x.copy()
        x3[0, 0, 10, 19] += 5.0  # 9 columns away
        pert3 = e.forward(Tensor(x3)).data
        assert base[0, 0, 10, 10] == pert3[0, 0, 10, 10]

    def test_all_parameter_grad_check(self):
        worst = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            e = GlobalContextExpert(2, rng)
            x = Tensor(rng.standard_normal((1, 2, 8, 8)))

            def f():
                y = e.forward(x)
                return T.tmean(T.mul(y, y))

            for _, p, _ in e.parameters():
                worst = max(worst, grad_check(f, p, step=1e-5))
        assert worst < 1e-4

    def test_shape_preserved(self):
        rng = np.random.default_rng(6)
        for cls in (LocalDetailExpert, GlobalContextExpert):
            e = cls(3, rng)
            x = Tensor(rng.standard_normal((2, 3, 12, 16)))
            assert e.forward(x).shape == x.shape
