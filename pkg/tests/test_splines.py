import numpy as np
import pytest
from scipy.integrate import simpson

from fibernf.splines import AxisSpline, axis_grid


def test_interpolates_samples():
    t = np.linspace(-0.1, 0.6, 40)
    s = AxisSpline(t, np.sin(3 * t))
    np.testing.assert_allclose(s(t), np.sin(3 * t), atol=1e-14)


def test_derivatives_of_smooth_function():
    t = np.linspace(-0.1, 0.6, 90)
    s = AxisSpline(t, np.exp(t))
    x = np.linspace(0, 0.5, 17)
    vals = s.derivatives(x, 3)
    for k in range(3):
        np.testing.assert_allclose(vals[k], np.exp(x), atol=10.0 ** (-10 + 2 * k))


def test_polynomial_reproduced_exactly():
    t = np.linspace(0, 1, 12)
    s = AxisSpline(t, t**5 - 2 * t**2)
    x = np.array([0.13, 0.77])
    np.testing.assert_allclose(s(x, 1), 5 * x**4 - 4 * x, atol=1e-11)
    np.testing.assert_allclose(s(x, 6), 0.0)


def test_matrix_valued_shape():
    t = np.linspace(0, 1, 10)
    vals = np.stack([np.eye(2) * (1 + ti) for ti in t])
    s = AxisSpline(t, vals)
    assert s(np.array([0.5])).shape == (1, 2, 2)
    np.testing.assert_allclose(s(np.array([0.5]), 1)[0], np.eye(2), atol=1e-12)


def test_antiderivative_vanishes_at_zero_and_matches_simpson():
    t, _ = axis_grid(0.5)
    s = AxisSpline(t, np.cos(t) + t**2)
    anti = s.antiderivative()
    assert anti(np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-15)
    mask = (t >= 0) & (t <= 0.5 + 1e-12)
    reference = simpson(np.cos(t[mask]) + t[mask] ** 2, x=t[mask])
    exact = np.sin(0.5) + 0.5**3 / 3
    assert anti(np.array([0.5]))[0] == pytest.approx(exact, abs=1e-13)
    assert abs(reference - exact) < 1e-10


def test_axis_grid_contains_check_points():
    t, idx = axis_grid(0.5, margin=0.1, points_per_unit=128, check_points=11)
    np.testing.assert_allclose(t[idx], np.linspace(0, 0.5, 11), atol=1e-15)
    assert t[0] <= -0.1 + 1e-12 and t[-1] >= 0.6 - 1e-12
    assert np.allclose(np.diff(t), t[1] - t[0])
    with pytest.raises(ValueError):
        axis_grid(-1.0)
