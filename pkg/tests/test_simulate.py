import dataclasses

import numpy as np
import pytest

from fbsdekit import (
    euler_maruyama,
    exact_paths,
    fit_loglog_slope,
    lambda_root,
    make_example1,
    make_example3,
    make_grid,
    make_linear_abm,
    sample_brownian,
)
from fbsdekit.exceptions import SimulationFailure, UnsupportedOperationError
from fbsdekit.grids import BrownianBatch


def _zero_batch(grid, d, B):
    inc = np.zeros((grid.N, B, d))
    return BrownianBatch(grid=grid, d=d, B=B, increments=inc, seed=0)


def _batch_from(grid, inc):
    return BrownianBatch(grid=grid, d=inc.shape[2], B=inc.shape[1],
                         increments=inc, seed=0)


class TestEulerAbm:
    def test_matches_exact_up_to_association(self):
        m = make_linear_abm(2, a=[1.0, 2.0], sigma0=1.3, mu0=0.7)
        g = make_grid(m.T, 16)
        dW = sample_brownian(g, 2, 64, 5)
        approx = euler_maruyama(m, dW)
        exact = exact_paths(m, dW)
        assert np.allclose(approx.X, exact.X, rtol=1e-12, atol=1e-12)

    def test_dnx_constant_sigma(self):
        m = make_linear_abm(1, sigma0=2.5)
        g = make_grid(m.T, 8)
        paths = euler_maruyama(m, sample_brownian(g, 1, 10, 1))
        assert np.allclose(paths.DnX_next, 2.5)

    def test_initial_condition(self):
        m = make_example1(3)
        g = make_grid(m.T, 4)
        paths = euler_maruyama(m, sample_brownian(g, 3, 7, 2))
        assert np.all(paths.X[0] == m.x0)

    def test_dimension_mismatch(self):
        m = make_example1(2)
        g = make_grid(m.T, 4)
        with pytest.raises(ValueError):
            euler_maruyama(m, sample_brownian(g, 1, 3, 0))

    def test_nonfinite_guard(self):
        m = make_linear_abm(1)
        cubed = dataclasses.replace(m, mu=lambda t, x: x ** 3,
                                    x0=np.array([1e120]), is_abm=False)
        g = make_grid(0.5, 4)
        with np.errstate(over="ignore"), pytest.raises(SimulationFailure) as exc:
            euler_maruyama(cubed, sample_brownian(g, 1, 2, 0))
        assert exc.value.n >= 1


class TestExactPaths:
    def test_abm_shift(self):
        m = make_linear_abm(1, sigma0=1.0)
        g = make_grid(m.T, 5)
        inc = np.zeros((5, 1, 1))
        inc[0, 0, 0] = 0.3  # W = 0.3 from the first node onward
        paths = exact_paths(m, _batch_from(g, inc))
        assert np.allclose(paths.X[1:], m.x0 + 0.3)

    def test_lambda_identity_at_zero_noise(self):
        m = make_example3(1)
        g = make_grid(m.T, 6)
        paths = exact_paths(m, _zero_batch(g, 1, 3))
        assert np.allclose(paths.X, 1.0, atol=1e-9)

    def test_lambda_root_value(self):
        m = make_example3(1)
        g = make_grid(m.T, 2)
        inc = np.zeros((2, 1, 1))
        inc[0, 0, 0] = 0.5
        paths = exact_paths(m, _batch_from(g, inc))
        expected = lambda_root(1.0 + np.pi / 4 + 0.5)
        assert paths.X[1, 0, 0] == pytest.approx(expected, abs=1e-10)
        assert paths.X[2, 0, 0] == pytest.approx(expected, abs=1e-10)

    def test_exact_dnx_is_sigma_of_next_state(self):
        m = make_example3(1)
        g = make_grid(m.T, 4)
        dW = sample_brownian(g, 1, 8, 3)
        paths = exact_paths(m, dW)
        sig = (1.0 + paths.X[1:] ** 2) / (2.0 + paths.X[1:] ** 2)
        assert np.allclose(paths.DnX_next[:, :, 0, 0], sig[:, :, 0])

    def test_unsupported_model(self):
        m = dataclasses.replace(make_example1(1), is_abm=False)
        g = make_grid(m.T, 2)
        with pytest.raises(UnsupportedOperationError):
            exact_paths(m, _zero_batch(g, 1, 1))


class TestStrongConvergence:
    def test_example3_strong_order(self):
        m = make_example3(1)
        B = 2 ** 12
        Ns = [8, 32, 128]
        errs_x, errs_d = [], []
        for N in Ns:
            g = make_grid(m.T, N)
            dW = sample_brownian(g, 1, B, 11)
            approx = euler_maruyama(m, dW)
            exact = exact_paths(m, dW)
            errs_x.append(np.max(np.mean((approx.X - exact.X) ** 2, axis=(1, 2))))
            errs_d.append(np.max(np.mean(
                (approx.DnX_next - exact.DnX_next) ** 2, axis=(1, 2, 3))))
        assert -1.4 < fit_loglog_slope(Ns, errs_x) < -0.6
        assert -1.4 < fit_loglog_slope(Ns, errs_d) < -0.6

    def test_dnx_uses_time_n_information_only(self):
        # changing the increment at step n must not alter DnX before step n
        m = make_example3(1)
        g = make_grid(m.T, 6)
        inc = sample_brownian(g, 1, 4, 9).increments.copy()
        base = euler_maruyama(m, _batch_from(g, inc.copy()))
        inc2 = inc.copy()
        inc2[4] += 0.5
        pert = euler_maruyama(m, _batch_from(g, inc2))
        assert np.array_equal(base.DnX_next[:4], pert.DnX_next[:4])
        assert not np.array_equal(base.DnX_next[4], pert.DnX_next[4])
