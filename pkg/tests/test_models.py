import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbsdekit import (
    lambda_root,
    make_example1,
    make_example2,
    make_example3,
    make_linear_abm,
    reference_solution,
    solve_riccati,
)
from fbsdekit.exceptions import IntegrationFailure, UnsupportedOperationError
from helpers import central_diff, central_jac


# ---------------------------------------------------------------------------
# Riccati system
# ---------------------------------------------------------------------------

class TestRiccati:
    def test_scalar_closed_form_p(self):
        # dp/dt = 4 p^2 backward from p(T) = 1 gives p(t) = 1/(1 + 4(T - t))
        tab = solve_riccati(np.eye(1), np.zeros(1), 0.0, 0.5, steps=10_000)
        assert abs(tab.P[0, 0, 0] - 1.0 / 3.0) < 1e-8

    def test_scalar_closed_form_r(self):
        tab = solve_riccati(np.eye(1), np.zeros(1), 0.0, 0.5, steps=10_000)
        assert abs(tab.R[0] - 0.5 * np.log(3.0)) < 1e-8

    def test_fixed_point(self):
        tab = solve_riccati(np.zeros((1, 1)), np.zeros(1), 5.0, 0.5, steps=100)
        assert np.all(tab.P == 0.0)
        assert np.all(tab.Q == 0.0)
        assert np.all(tab.R == 5.0)

    def test_terminal_values_exact(self):
        A = np.array([[1.0, 0.2], [0.0, 0.5]])
        v = np.array([0.3, -1.0])
        tab = solve_riccati(A, v, 2.5, 0.4, steps=50)
        assert np.array_equal(tab.P[-1], A)
        assert np.array_equal(tab.Q[-1], v)
        assert tab.R[-1] == 2.5

    def test_fourth_order_convergence(self):
        errs = []
        steps_list = [10, 20, 40]
        for steps in steps_list:
            tab = solve_riccati(np.eye(1), np.zeros(1), 0.0, 0.5, steps=steps)
            errs.append(abs(tab.P[0, 0, 0] - 1.0 / 3.0))
        slope = np.polyfit(np.log(steps_list), np.log(errs), 1)[0]
        assert -4.5 < slope < -3.5

    def test_blowup_detection(self):
        # p(T) = -1 meets the singularity of p(t) = 1/(4(T-t) - 1) at T - 1/4
        with pytest.raises(IntegrationFailure) as exc:
            solve_riccati(-np.eye(1), np.zeros(1), 0.0, 0.5, steps=10_000)
        assert 0.0 <= exc.value.t <= 0.5

    def test_interpolation_linear(self):
        tab = solve_riccati(np.eye(1), np.zeros(1), 0.0, 0.5, steps=10)
        P0, _, _ = tab.interpolate(0.025)
        assert P0[0, 0] == pytest.approx(
            0.5 * (tab.P[0, 0, 0] + tab.P[1, 0, 0]), rel=1e-12
        )

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            solve_riccati(np.eye(2), np.zeros(3), 0.0, 1.0)
        with pytest.raises(ValueError):
            solve_riccati(np.eye(1), np.zeros(1), 0.0, 1.0, steps=0)


class TestLambdaRoot:
    def test_zero(self):
        assert lambda_root(0.0) == pytest.approx(0.0, abs=1e-12)

    def test_known_points(self):
        assert lambda_root(1.0 + np.pi / 4) == pytest.approx(1.0, abs=1e-10)
        assert lambda_root(2.0 + np.arctan(2.0)) == pytest.approx(2.0, abs=1e-10)

    @given(r=st.floats(min_value=-50.0, max_value=50.0))
    @settings(max_examples=100, deadline=None)
    def test_defining_equation(self, r):
        s = lambda_root(r, tol=1e-12)
        assert abs(s + np.arctan(s) - r) <= 1e-12

    def test_monotone(self):
        rs = np.linspace(-10.0, 10.0, 101)
        ss = lambda_root(rs)
        assert np.all(np.diff(ss) > 0)

    def test_vectorized_shape(self):
        r = np.ones((3, 4))
        assert lambda_root(r).shape == (3, 4)

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            lambda_root(1.0, tol=0.0)


# ---------------------------------------------------------------------------
# Benchmark models: pinned reference values
# ---------------------------------------------------------------------------

class TestExample1Values:
    def test_reference_at_origin_point(self):
        m = make_example1(1)
        y, z, gam = reference_solution(m, 0.0, np.array([1.0]))
        w = np.e
        # the value reference carries the terminal map's additive constant
        assert y == pytest.approx(0.6 + w / (1 + w), abs=1e-12)
        assert y == pytest.approx(1.331059, abs=1e-6)
        assert z[0] == pytest.approx(w / (1 + w) ** 2, abs=1e-12)
        assert z[0] == pytest.approx(0.196612, abs=1e-6)
        assert gam[0, 0] == pytest.approx(w * (1 - w) / (1 + w) ** 3, abs=1e-12)
        assert gam[0, 0] == pytest.approx(-0.090858, abs=1e-6)

    def test_terminal_matches_g(self):
        m = make_example1(1)
        x = np.array([[0.0]])
        w = np.exp(0.5)
        assert m.g(x)[0] == pytest.approx(0.6 + w / (1 + w), abs=1e-12)
        y, _, _ = reference_solution(m, m.T, np.array([0.0]))
        assert y == pytest.approx(m.g(x)[0], abs=1e-12)

    def test_rejects_zero_lambda(self):
        with pytest.raises(ValueError):
            make_example1(1, lam=0.0)


class TestExample2Values:
    def test_reference_at_origin(self):
        m = make_example2(1)
        y, z, _ = reference_solution(m, 0.0, np.array([1.0]))
        assert y == pytest.approx(1.0 / 3.0 + 0.5 * np.log(3.0), abs=1e-7)
        assert y == pytest.approx(0.882639, abs=1e-6)
        assert z[0] == pytest.approx(np.sqrt(2.0) * 2.0 / 3.0, abs=1e-7)
        assert z[0] == pytest.approx(0.942809, abs=1e-6)

    def test_terminal_triple(self):
        m = make_example2(1)
        y, z, gam = reference_solution(m, m.T, np.array([1.0]))
        assert y == pytest.approx(1.0, abs=1e-12)
        assert z[0] == pytest.approx(2.0 * np.sqrt(2.0), abs=1e-12)
        assert gam[0, 0] == pytest.approx(2.0 * np.sqrt(2.0), abs=1e-12)

    def test_terminal_gamma_state_independent(self):
        m = make_example2(1)
        x = np.array([[-3.0], [0.0], [7.0]])
        gam = m.grad_grad_g_sigma(x)
        assert np.allclose(gam, 2.0 * np.sqrt(2.0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            make_example2(2, A=np.eye(3))

    def test_driver_solves_pde(self):
        # reference plugged into dt y + Laplace y + f(., z) must vanish
        m = make_example2(1, riccati_steps=20_000)
        h = 1e-5
        for x in (0.3, 1.0, -0.7):
            t = 0.2
            y0, z0, _ = reference_solution(m, t, np.array([x]))
            yt = (reference_solution(m, t + h, np.array([x]))[0]
                  - reference_solution(m, t - h, np.array([x]))[0]) / (2 * h)
            yxx = (reference_solution(m, t, np.array([x + h]))[0]
                   - 2 * y0 + reference_solution(m, t, np.array([x - h]))[0]) / h ** 2
            fval = m.f(t, np.array([[x]]), np.array([y0]), z0[None, :])[0]
            assert abs(yt + yxx + fval) < 1e-4


class TestExample3Values:
    def test_reference_at_origin(self):
        m = make_example3(1)
        y, z, _ = reference_solution(m, 0.0, np.array([1.0]))
        assert y == pytest.approx(np.exp(-0.1), abs=1e-12)
        assert y == pytest.approx(0.904837, abs=1e-6)
        assert z[0] == pytest.approx(-(2.0 / 3.0) * (2 * np.exp(-0.1) / 10.0), abs=1e-12)
        assert z[0] == pytest.approx(-0.120645, abs=1e-6)

    def test_sigma_at_zero(self):
        m = make_example3(1)
        assert m.sigma(0.0, np.array([[0.0]]))[0, 0, 0] == pytest.approx(0.5)

    def test_gamma_is_z_gradient(self):
        m = make_example3(2)
        rng = np.random.default_rng(5)
        for _ in range(10):
            t = rng.uniform(0.0, m.T)
            x = rng.normal(1.0, 0.7, size=2)
            _, _, gam = reference_solution(m, t, x)
            jac = central_jac(lambda v: reference_solution(m, t, v)[1], x)
            assert np.allclose(gam, jac, rtol=1e-6, atol=1e-9)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            make_example3(1, lam=-1.0)
        with pytest.raises(ValueError):
            make_example3(1, tau=0.0)


class TestLinearAbm:
    def test_martingale_reference(self):
        m = make_linear_abm(2, a=[0.5, -1.0], sigma0=2.0)
        y, z, gam = reference_solution(m, 0.3, np.array([1.0, 2.0]))
        assert y == pytest.approx(0.5 - 2.0)
        assert np.allclose(z, [1.0, -2.0])
        assert np.all(gam == 0.0)

    def test_drifted_reference_terminal_consistency(self):
        m = make_linear_abm(1, a=0.7, mu0=0.4)
        yT, _, _ = reference_solution(m, m.T, np.array([2.0]))
        assert yT == pytest.approx(m.g(np.array([[2.0]]))[0], abs=1e-12)


# ---------------------------------------------------------------------------
# Shared model invariants
# ---------------------------------------------------------------------------

ALL_MODELS = [
    ("example1", lambda: make_example1(1)),
    ("example1_d3", lambda: make_example1(3, lam=0.8, gamma_bar=0.2)),
    ("example2", lambda: make_example2(1, riccati_steps=2000)),
    ("example2_d2", lambda: make_example2(2, riccati_steps=2000)),
    ("example3", lambda: make_example3(1)),
    ("example3_d2", lambda: make_example3(2)),
    ("linear_abm", lambda: make_linear_abm(2, a=[1.0, 0.3], sigma0=1.5, mu0=0.2)),
]


def _sample_points(model, n, rng):
    t = rng.uniform(0.0, model.T, size=n)
    x = rng.normal(1.0, 0.6, size=(n, model.d))
    y = rng.normal(0.5, 0.5, size=n)
    z = rng.normal(0.0, 0.5, size=(n, model.d))
    return t, x, y, z


@pytest.mark.parametrize("name,factory", ALL_MODELS)
class TestModelInvariants:
    def test_sigma_inverse(self, name, factory):
        m = factory()
        rng = np.random.default_rng(1)
        _, x, _, _ = _sample_points(m, 20, rng)
        S = m.sigma(0.1, x)
        Si = m.sigma_inv(0.1, x)
        eye = np.broadcast_to(np.eye(m.d), S.shape)
        assert np.max(np.abs(np.matmul(S, Si) - eye)) < 1e-12

    def test_driver_gradients_match_fd(self, name, factory):
        m = factory()
        rng = np.random.default_rng(2)
        ts, xs, ys, zs = _sample_points(m, 100, rng)
        for i in range(100):
            t, x, y, z = ts[i], xs[i], ys[i], zs[i]
            fx = m.grad_x_f(t, x[None], np.array([y]), z[None])[0]
            fy = m.grad_y_f(t, x[None], np.array([y]), z[None])[0]
            fz = m.grad_z_f(t, x[None], np.array([y]), z[None])[0]
            fd_x = central_diff(
                lambda v: m.f(t, v[None], np.array([y]), z[None])[0], x)
            fd_y = central_diff(
                lambda v: m.f(t, x[None], v, z[None])[0], np.array([y]))[0]
            fd_z = central_diff(
                lambda v: m.f(t, x[None], np.array([y]), v[None])[0], z)
            scale = max(1.0, np.max(np.abs(fd_x)), abs(fd_y), np.max(np.abs(fd_z)))
            assert np.max(np.abs(fx - fd_x)) < 1e-6 * scale
            assert abs(fy - fd_y) < 1e-6 * scale
            assert np.max(np.abs(fz - fd_z)) < 1e-6 * scale

    def test_terminal_gradients_match_fd(self, name, factory):
        m = factory()
        rng = np.random.default_rng(3)
        _, xs, _, _ = _sample_points(m, 30, rng)
        for x in xs:
            gs = m.grad_g_sigma(x[None])[0]
            fd_grad = central_diff(lambda v: m.g(v[None])[0], x)
            expected = fd_grad @ m.sigma(m.T, x[None])[0]
            assert np.allclose(gs, expected, rtol=1e-6, atol=1e-8)
            ggs = m.grad_grad_g_sigma(x[None])[0]
            fd_jac = central_jac(lambda v: m.grad_g_sigma(v[None])[0], x)
            assert np.allclose(ggs, fd_jac, rtol=1e-6, atol=1e-7)

    def test_forward_coefficient_gradients_match_fd(self, name, factory):
        m = factory()
        rng = np.random.default_rng(4)
        _, xs, _, _ = _sample_points(m, 20, rng)
        t = 0.2 * m.T
        for x in xs:
            gm = m.grad_x_mu(t, x[None])[0]
            fd = central_jac(lambda v: m.mu(t, v[None])[0], x)
            assert np.allclose(gm, fd, rtol=1e-6, atol=1e-8)
            gsig = m.grad_x_sigma(t, x[None])[0]
            fd_s = central_jac(lambda v: m.sigma(t, v[None])[0], x)
            assert np.allclose(gsig, fd_s, rtol=1e-6, atol=1e-8)

    def test_feynman_kac_consistency(self, name, factory):
        m = factory()
        if m.reference is None:
            pytest.skip("no reference")
        rng = np.random.default_rng(6)
        _, xs, _, _ = _sample_points(m, 25, rng)
        t = 0.3 * m.T
        for x in xs:
            _, z, _ = reference_solution(m, t, x)
            grad_y = central_diff(lambda v: reference_solution(m, t, v)[0], x)
            expected = grad_y @ m.sigma(t, x[None])[0]
            assert np.allclose(z, expected, rtol=1e-6, atol=1e-8)

    def test_reference_gamma_matches_fd(self, name, factory):
        m = factory()
        if m.reference is None:
            pytest.skip("no reference")
        rng = np.random.default_rng(7)
        _, xs, _, _ = _sample_points(m, 15, rng)
        t = 0.6 * m.T
        for x in xs:
            _, _, gam = reference_solution(m, t, x)
            fd = central_jac(lambda v: reference_solution(m, t, v)[1], x)
            assert np.allclose(gam, fd, rtol=1e-6, atol=1e-7)


class TestReferenceSolutionDispatch:
    def test_missing_reference(self):
        m = dataclasses.replace(make_linear_abm(1), reference=None)
        with pytest.raises(UnsupportedOperationError):
            reference_solution(m, 0.0, np.array([1.0]))

    def test_time_range_check(self):
        m = make_example1(1)
        with pytest.raises(ValueError):
            reference_solution(m, 1.0, np.array([1.0]))

    def test_batched_query(self):
        m = make_example1(1)
        y, z, gam = reference_solution(m, 0.1, np.ones((4, 1)))
        assert y.shape == (4,) and z.shape == (4, 1) and gam.shape == (4, 1, 1)
