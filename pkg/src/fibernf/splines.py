"""Interpolating splines along the orbit axis.

All axis quantities (momentum components, shear vector, metric factors) are
sampled on a uniform time grid and interpolated by quintic splines.  The spline
is converted once to a power basis per interval so that value and derivatives
of every component come out of one vectorised Horner pass.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.interpolate import BSpline, make_interp_spline


class AxisSpline:
    """Vector- or matrix-valued piecewise polynomial of one variable.

    Parameters
    ----------
    t : array_like, shape (N,)
        Increasing sample abscissae.
    values : array_like, shape (N, ...)
        Samples; trailing dimensions are preserved in the output.
    k : int
        Polynomial degree of the interpolant.
    """

    def __init__(self, t, values, k=5):
        t = np.asarray(t, dtype=float)
        values = np.asarray(values, dtype=float)
        if values.shape[0] != t.shape[0]:
            raise ValueError("sample count mismatch")
        self.t = t
        self.values = values
        self.shape = values.shape[1:]
        flat = values.reshape(len(t), -1)
        self._bspline = make_interp_spline(t, flat, k=min(k, len(t) - 1))
        self._set_power_basis(self._bspline)

    @classmethod
    def _from_bspline(cls, t, bspline, shape):
        obj = cls.__new__(cls)
        obj.t = t
        obj.shape = shape
        obj._bspline = bspline
        obj.values = bspline(t).reshape((len(t),) + shape)
        obj._set_power_basis(bspline)
        return obj

    def _set_power_basis(self, bspline: BSpline):
        k = bspline.k
        left = self.t[:-1]
        coef = np.empty((len(left), k + 1, bspline.c.shape[1]))
        for j in range(k + 1):
            coef[:, j] = bspline(left, nu=j) / math.factorial(j)
        self._coef = coef
        self.degree = k
        # power-basis coefficients of each derivative: nu-th entry has k + 1 - nu terms
        self._dcoef = []
        for nu in range(k + 1):
            j = np.arange(k + 1 - nu)
            fac = np.array([math.factorial(i + nu) / math.factorial(i) for i in j])
            self._dcoef.append(np.ascontiguousarray(coef[:, nu:] * fac[None, :, None]))

    def antiderivative(self):
        """Spline of the antiderivative vanishing at t = 0."""
        anti = self._bspline.antiderivative()
        c0 = anti(0.0)
        shifted = BSpline(anti.t, anti.c - c0[None, :], anti.k, extrapolate=True)
        return AxisSpline._from_bspline(self.t, shifted, self.shape)

    def __call__(self, x, nu=0):
        return self.derivatives(x, nu)[nu]

    def derivatives(self, x, nmax=0):
        """List ``[f, f', ..., f^(nmax)]`` evaluated at ``x``.

        Outside the sample range the end polynomials are continued.
        """
        x = np.asarray(x, dtype=float)
        flat_x = x.reshape(-1)
        idx = np.clip(np.searchsorted(self.t, flat_x, side="right") - 1, 0, len(self.t) - 2)
        dx = (flat_x - self.t[idx])[:, None]
        k = self.degree
        out = []
        for nu in range(nmax + 1):
            if nu > k:
                acc = np.zeros((flat_x.size, self._coef.shape[2]))
            else:
                c = self._dcoef[nu][idx]
                acc = c[:, -1]
                for j in range(c.shape[1] - 2, -1, -1):
                    acc = acc * dx + c[:, j]
            out.append(acc.reshape(x.shape + self.shape))
        return out


def axis_grid(delta, margin=0.1, points_per_unit=128, check_points=11):
    """Uniform grid containing the ``check_points`` verification times as nodes.

    The spacing divides ``delta / (check_points - 1)`` so that both t = 0 and
    every verification time lie on the grid; the grid extends by at least
    ``margin`` beyond [0, delta] on each side.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    intervals = check_points - 1
    sub = max(1, math.ceil(points_per_unit * delta / intervals))
    h = delta / (intervals * sub)
    extra = math.ceil(margin / h - 1e-9)
    k = np.arange(-extra, intervals * sub + extra + 1)
    t = k * h
    check_idx = extra + sub * np.arange(check_points)
    return t, check_idx
