import numpy as np
import pytest

from wass_splines.core import PhasePoint
from wass_splines.splines import (
    CubicPath,
    discrete_acceleration_cost,
    discrete_speed_cost,
    eval_path,
    extrapolation_cost,
    fit_cubic_interpolant,
    hermite_energy,
    scaled_segment_energy,
    spline_cost,
)

from oracles import (
    hermite_quadrature_energy,
    hermite_quadrature_energy_interval,
    qp_spline_energy,
)


class TestHermiteEnergy:
    def test_straight_line_is_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            d = rng.integers(1, 3)
            x = rng.normal(size=d)
            v = rng.normal(size=d)
            p = PhasePoint(x, v)
            q = PhasePoint(x + v, v)
            assert hermite_energy(p, q) == pytest.approx(0.0, abs=1e-12)

    def test_zero_velocities(self):
        p = PhasePoint((0.0, 0.0), (0.0, 0.0))
        q = PhasePoint((1.0, 2.0), (0.0, 0.0))
        assert hermite_energy(p, q) == pytest.approx(12.0 * 5.0)

    def test_unit_velocity_loop(self):
        # p(t) = t(1-t)^2 has integral of p''^2 equal to 4
        p = PhasePoint((0.0,), (1.0,))
        q = PhasePoint((0.0,), (0.0,))
        assert hermite_energy(p, q) == pytest.approx(4.0, abs=1e-12)
        assert hermite_quadrature_energy(0.0, 1.0, 0.0, 0.0) == pytest.approx(4.0)

    def test_against_quadrature(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            d = int(rng.integers(1, 3))
            x, v, y, w = (rng.normal(size=d) for _ in range(4))
            got = hermite_energy(PhasePoint(x, v), PhasePoint(y, w))
            want = hermite_quadrature_energy(x, v, y, w)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_nonnegative_and_zero_only_on_straight_lines(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pts = rng.normal(size=4) * 10
            p = PhasePoint(pts[:1], pts[1:2])
            q = PhasePoint(pts[2:3], pts[3:4])
            e = hermite_energy(p, q)
            assert e >= 0
            straight = abs(pts[2] - pts[0] - pts[1]) < 1e-12 and abs(pts[3] - pts[1]) < 1e-12
            if not straight:
                assert e > 1e-12

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            hermite_energy(PhasePoint((0.0,), (0.0,)), PhasePoint((0., 0.), (0., 0.)))


class TestScaledSegmentEnergy:
    def test_delta_one_matches_hermite(self):
        p = PhasePoint((0.3, -1.0), (0.5, 2.0))
        q = PhasePoint((1.0, 0.2), (-0.4, 0.1))
        assert scaled_segment_energy(p, q, 1.0) == pytest.approx(hermite_energy(p, q))

    def test_constant_speed_line_zero(self):
        for delta in (0.25, 1.0, 3.0):
            v = np.array([1.5, -0.5])
            p = PhasePoint((0.0, 0.0), v)
            q = PhasePoint(delta * v, v)
            assert scaled_segment_energy(p, q, delta) == pytest.approx(0.0, abs=1e-12)

    def test_against_interval_quadrature(self):
        # 1D (0, v=2) to (1, v=0) over delta=0.5 and random cases
        got = scaled_segment_energy(PhasePoint((0.,), (2.,)), PhasePoint((1.,), (0.,)), 0.5)
        want = hermite_quadrature_energy_interval(0.0, 2.0, 1.0, 0.0, 0.5)
        assert got == pytest.approx(want, abs=1e-9)
        rng = np.random.default_rng(9)
        for _ in range(50):
            d = int(rng.integers(1, 3))
            x, v, y, w = (rng.normal(size=d) for _ in range(4))
            delta = float(rng.uniform(0.1, 3.0))
            got = scaled_segment_energy(PhasePoint(x, v), PhasePoint(y, w), delta)
            want = hermite_quadrature_energy_interval(x, v, y, w, delta)
            assert got == pytest.approx(want, rel=1e-9, abs=1e-12)

    def test_bad_delta(self):
        p = PhasePoint((0.0,), (0.0,))
        with pytest.raises(ValueError):
            scaled_segment_energy(p, p, 0.0)


class TestFitCubicInterpolant:
    def test_collinear_is_straight(self):
        path = fit_cubic_interpolant([0.0, 1.0, 2.0, 3.0], [0.0, 1.0, 2.0, 3.0])
        assert path.energy() == pytest.approx(0.0, abs=1e-12)
        pos, vel = path.eval(1.7)
        assert pos[0] == pytest.approx(1.7)
        assert vel[0] == pytest.approx(1.0)

    def test_zigzag_energy_six(self):
        # closed form: x(t) = 3t/2 - t^3/2 on [0, 1], mirrored on [1, 2]
        path = fit_cubic_interpolant([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert path.energy() == pytest.approx(6.0, abs=1e-10)

    def test_two_knots_linear(self):
        path = fit_cubic_interpolant([0.0, 1.0], [0.0, 5.0])
        assert path.energy() == pytest.approx(0.0, abs=1e-12)
        pos, _ = path.eval(0.5)
        assert pos[0] == pytest.approx(2.5)

    def test_reproduces_knots(self):
        rng = np.random.default_rng(11)
        t = np.sort(rng.uniform(0, 5, size=6))
        t[0] = 0.0
        pts = rng.normal(size=(6, 2))
        path = fit_cubic_interpolant(t, pts)
        pos, _ = path.eval(t)
        assert np.max(np.abs(pos - pts)) < 1e-10

    def test_natural_boundary(self):
        rng = np.random.default_rng(12)
        t = np.array([0.0, 0.7, 1.3, 2.9])
        pts = rng.normal(size=(4, 1))
        path = fit_cubic_interpolant(t, pts)
        # second derivative 2*c2 must vanish at the first knot; at the last,
        # evaluate 2*c2 + 6*c3*dt on the final interval
        assert abs(path.coeffs[0, 2, 0]) < 1e-10
        dt = t[-1] - t[-2]
        assert abs(2 * path.coeffs[-1, 2, 0] + 6 * path.coeffs[-1, 3, 0] * dt) < 1e-10

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_cubic_interpolant([0.0, 0.0, 1.0], [0.0, 1.0, 2.0])
        with pytest.raises(ValueError):
            fit_cubic_interpolant([0.0], [1.0])


class TestSplineCost:
    def test_collinear_zero(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=2)
        b = rng.normal(size=2)
        t = np.array([0.0, 0.4, 1.1, 2.0])
        pts = a[None, :] + t[:, None] * b[None, :]
        assert spline_cost(t, pts) == pytest.approx(0.0, abs=1e-10)

    def test_zigzag_six_vs_qp_oracle(self):
        got = spline_cost([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert got == pytest.approx(6.0, abs=1e-9)
        oracle = qp_spline_energy([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        assert oracle == pytest.approx(6.0, abs=1e-4)

    def test_matches_interpolant_energy(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            d = int(rng.integers(1, 3))
            t = np.cumsum(rng.uniform(0.2, 1.5, size=n))
            pts = rng.normal(size=(n, d))
            a = spline_cost(t, pts)
            b = fit_cubic_interpolant(t, pts).energy()
            assert a == pytest.approx(b, rel=1e-8, abs=1e-10)

    def test_affine_invariance(self):
        rng = np.random.default_rng(8)
        t = np.array([0.0, 1.0, 2.5, 4.0])
        pts = rng.normal(size=(4, 2))
        a = rng.normal(size=2)
        b = rng.normal(size=2)
        shifted = pts + a[None, :] + t[:, None] * b[None, :]
        c0 = spline_cost(t, pts)
        c1 = spline_cost(t, shifted)
        assert c1 == pytest.approx(c0, rel=1e-10, abs=1e-12)

    def test_time_reversal(self):
        rng = np.random.default_rng(13)
        t = np.array([0.0, 1.0, 2.0, 3.0])
        pts = rng.normal(size=(4, 1))
        assert spline_cost(t, pts) == pytest.approx(spline_cost(t, pts[::-1]), rel=1e-10)


class TestEvalPath:
    def test_knot_reproduction(self):
        path = fit_cubic_interpolant([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        for t, x in [(0.0, 0.0), (1.0, 1.0), (2.0, 0.0)]:
            pos, _ = eval_path(path, t)
            assert pos[0] == pytest.approx(x, abs=1e-10)

    def test_midpoint_closed_form(self):
        path = fit_cubic_interpolant([0.0, 1.0, 2.0], [0.0, 1.0, 0.0])
        pos, _ = eval_path(path, 0.5)
        assert pos[0] == pytest.approx(0.6875, abs=1e-12)

    def test_extension_beyond_knots(self):
        # boundary cubic extended: straight path stays straight
        path = CubicPath([0.0, 1.0], [[0.0], [2.0]], [[2.0], [2.0]])
        pos, vel = path.eval(1.5)
        assert pos[0] == pytest.approx(3.0)
        assert vel[0] == pytest.approx(2.0)


class TestDiscreteCosts:
    def test_acceleration_values(self):
        assert discrete_acceleration_cost([0.0, 0.0, 1.0], 1.0) == pytest.approx(1.0)
        assert discrete_acceleration_cost([0.0, 1.0, 2.0, 3.0], 1.0) == pytest.approx(0.0)
        assert discrete_acceleration_cost([0.0, 1.0, 0.0], 0.5) == pytest.approx(32.0)

    def test_speed_values(self):
        assert discrete_speed_cost([0.0, 1.0], 1.0) == pytest.approx(1.0)
        assert discrete_speed_cost([2.0, 2.0, 2.0], 0.3) == pytest.approx(0.0)
        assert discrete_speed_cost([0.0, 1.0, 3.0], 0.5) == pytest.approx(10.0)

    def test_acceleration_affine_invariance(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(7, 2))
        a = rng.normal(size=2)
        b = rng.normal(size=2)
        ts = np.arange(7.0)[:, None]
        shifted = xs + a[None, :] + ts * b[None, :]
        assert discrete_acceleration_cost(shifted, 0.7) == pytest.approx(
            discrete_acceleration_cost(xs, 0.7), rel=1e-10
        )

    def test_errors(self):
        with pytest.raises(ValueError):
            discrete_acceleration_cost([0.0, 1.0], 1.0)
        with pytest.raises(ValueError):
            discrete_speed_cost([0.0], 1.0)

    def test_sampled_path_converges_to_spline_cost(self):
        # discrete acceleration cost of dense samples approaches the continuous
        # energy with observed order >= 1 on a dtau, dtau/2, dtau/4 ladder
        t = np.array([0.0, 1.0, 2.0, 3.0])
        pts = np.array([0.0, 1.0, -0.5, 0.25])
        path = fit_cubic_interpolant(t, pts)
        target = spline_cost(t, pts)
        errs = []
        for k in (40, 80, 160):
            dt = 3.0 / k
            samples = path.eval(np.linspace(0.0, 3.0, k + 1))[0]
            errs.append(abs(discrete_acceleration_cost(samples, dt) - target))
        order01 = np.log2(errs[0] / errs[1])
        order12 = np.log2(errs[1] / errs[2])
        assert order01 >= 1.0 and order12 >= 1.0


class TestExtrapolationCost:
    def test_values(self):
        assert extrapolation_cost(0.0, 1.0, 2.0, 1.0) == pytest.approx(1.0)
        assert extrapolation_cost(0.3, 0.3, 0.3, 2.5) == pytest.approx(0.0)
        assert extrapolation_cost(0.0, 1.0, 3.0, 2.0) == pytest.approx(0.75)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            extrapolation_cost(0.0, 1.0, 2.0, 0.0)
