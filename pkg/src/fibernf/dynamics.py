"""Hamilton's equations, fixed-step RK4 orbits and flows of auxiliary fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import FlowBoxError, IntegrationError, check_finite
from .hamiltonian import ExpressionField, as_points

STEPS_PER_UNIT = 512


def hamiltonian_vector_field(H, x):
    """Return ``(qdot, pdot) = (dH/dp, -dH/dq)`` at one point or a batch."""
    X = as_points(x, H.width)
    g = check_finite(H.gradient(X), X, "Hamiltonian vector field")
    qdot, pdot = g[:, H.m:], -g[:, :H.m]
    if np.ndim(x) <= 1 or hasattr(x, "q"):
        return qdot[0], pdot[0]
    return qdot, pdot


def _field_fn(H):
    m = H.m

    def f(X):
        g = H.gradient(X)
        return np.concatenate([g[:, m:], -g[:, :m]], axis=1)

    return f


def rk4(f, X0, h, nsteps):
    """Classical RK4 for a batched autonomous field ``f: (n, w) -> (n, w)``.

    Returns ``traj, deriv`` with shape (nsteps + 1, n, w).
    """
    x = np.array(np.atleast_2d(X0), dtype=float)
    traj = np.empty((nsteps + 1,) + x.shape)
    deriv = np.empty_like(traj)
    traj[0] = x
    k1 = f(x)
    for s in range(nsteps):
        deriv[s] = k1
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        traj[s + 1] = x
        k1 = f(x)
    deriv[nsteps] = k1
    return traj, deriv


def hamilton_rk4(H, X0, h, nsteps):
    """RK4 trajectories of H; uses the compiled kernel for closed-form fields."""
    X0 = as_points(X0, H.width)
    if isinstance(H, ExpressionField):
        traj, deriv = kernels.rk4_hamilton(H.gradient_program, X0, h, nsteps)
    else:
        traj, deriv = rk4(_field_fn(H), X0, h, nsteps)
    check_finite(traj.reshape(-1, H.width), traj.reshape(-1, H.width), "orbit state")
    return traj, deriv


@dataclass(frozen=True)
class OrbitSegment:
    """Orbit samples on a uniform time grid with cubic-Hermite dense output.

    Attributes
    ----------
    t : ndarray, shape (N,)
    x : ndarray, shape (N, 2m)
        States ``(Q, P)`` at the nodes.
    xdot : ndarray, shape (N, 2m)
        Vector field at the nodes.
    energy : ndarray, shape (N,)
    """

    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    energy: np.ndarray

    @property
    def m(self):
        return self.x.shape[1] // 2

    @property
    def d(self):
        return self.m - 1

    @property
    def Q(self):
        return self.x[:, :self.m]

    @property
    def P(self):
        return self.x[:, self.m:]

    def energy_drift(self, ref=0):
        return float(np.max(np.abs(self.energy - self.energy[ref])))

    def dense(self, s):
        """Cubic-Hermite interpolation of the state at times ``s``."""
        s = np.asarray(s, dtype=float)
        flat = s.reshape(-1)
        i = np.clip(np.searchsorted(self.t, flat, side="right") - 1, 0, len(self.t) - 2)
        h = self.t[i + 1] - self.t[i]
        u = ((flat - self.t[i]) / h)[:, None]
        h = h[:, None]
        h00 = 2 * u**3 - 3 * u**2 + 1
        h10 = u**3 - 2 * u**2 + u
        h01 = -2 * u**3 + 3 * u**2
        h11 = u**3 - u**2
        out = (h00 * self.x[i] + h10 * h * self.xdot[i]
               + h01 * self.x[i + 1] + h11 * h * self.xdot[i + 1])
        return out.reshape(s.shape + (self.x.shape[1],))

    def dense_derivative(self, s):
        s = np.asarray(s, dtype=float).reshape(-1)
        i = np.clip(np.searchsorted(self.t, s, side="right") - 1, 0, len(self.t) - 2)
        h = (self.t[i + 1] - self.t[i])[:, None]
        u = ((s - self.t[i]) / h[:, 0])[:, None]
        d00 = (6 * u**2 - 6 * u) / h
        d10 = 3 * u**2 - 4 * u + 1
        d01 = (-6 * u**2 + 6 * u) / h
        d11 = 3 * u**2 - 2 * u
        return (d00 * self.x[i] + d10 * self.xdot[i]
                + d01 * self.x[i + 1] + d11 * self.xdot[i + 1])

    def midpoint_residual(self, H):
        """Max deviation of the dense-output velocity from Hamilton's equations."""
        mid = 0.5 * (self.t[1:] + self.t[:-1])
        xm = self.dense(mid)
        fm = _field_fn(H)(xm)
        return float(np.max(np.abs(self.dense_derivative(mid) - fm)))

    def csv_rows(self):
        for t, x, e in zip(self.t, self.x, self.energy):
            yield [float(t), *map(float, x), float(e)]

    def csv_header(self):
        m = self.m
        return ["t"] + [f"q{i}" for i in range(m)] + [f"p{i}" for i in range(m)] + ["energy"]


def _check_energy(energy, tol, what="orbit"):
    drift = float(np.max(np.abs(energy - energy[0])))
    if drift > 10 * tol:
        raise IntegrationError(
            f"{what}: energy drift {drift:.3g} exceeds 10x tolerance {tol:.3g}; increase steps"
        )
    return drift


def integrate_orbit(H, x0, T, steps, tol=1e-8):
    """Fixed-step RK4 orbit on [0, T] with ``steps`` steps.

    Raises IntegrationError when the energy drift exceeds ``10 * tol``.
    """
    if not T > 0:
        raise ValueError("integration time T must be positive")
    if steps < 16:
        raise ValueError("at least 16 steps are required")
    X0 = as_points(x0, H.width)
    traj, deriv = hamilton_rk4(H, X0, T / steps, steps)
    x = traj[:, 0]
    energy = H.value(x)
    _check_energy(energy, tol)
    return OrbitSegment(t=np.linspace(0.0, T, steps + 1), x=x, xdot=deriv[:, 0], energy=energy)


def integrate_on_grid(H, x0, t_grid, max_step=1.0 / STEPS_PER_UNIT, tol=1e-8):
    """Orbit through ``x0`` at time 0 sampled on a uniform grid containing 0.

    Integrates forward and backward from 0 with RK4 substeps no longer than
    ``max_step`` and keeps the grid nodes.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    i0 = int(np.argmin(np.abs(t_grid)))
    if abs(t_grid[i0]) > 1e-12:
        raise ValueError("time grid must contain t = 0")
    spacing = t_grid[1] - t_grid[0]
    sub = max(1, math.ceil(spacing / max_step - 1e-9))
    h = spacing / sub
    X0 = as_points(x0, H.width)
    n_fwd = len(t_grid) - 1 - i0
    n_bwd = i0
    parts_x, parts_d = [], []
    if n_bwd:
        tb, db = hamilton_rk4(H, X0, -h, n_bwd * sub)
        parts_x.append(tb[::sub][::-1][:-1, 0])
        parts_d.append(db[::sub][::-1][:-1, 0])
    tf, df = hamilton_rk4(H, X0, h, max(n_fwd, 0) * sub)
    parts_x.append(tf[::sub, 0])
    parts_d.append(df[::sub, 0])
    x = np.concatenate(parts_x)
    xdot = np.concatenate(parts_d)
    energy = H.value(x)
    _check_energy(energy, tol)
    return OrbitSegment(t=t_grid.copy(), x=x, xdot=xdot, energy=energy)


class FlowMap:
    """Time-t flow of a vector field on configuration space, by fixed-step RK4.

    The flow from ``x0`` over time ``t`` is computed as the solution at s = 1 of
    ``dx/ds = t V(x)`` so that every point, whatever its flow time, uses the
    same number of steps.  Derivatives with respect to the start point and to
    ``t`` come from the variational equations integrated with the same stages,
    so they are the exact derivatives of the discrete map.

    Parameters
    ----------
    V : callable
        Batched field ``(n, m) -> (n, m)``.
    DV : callable, optional
        Batched Jacobian ``(n, m) -> (n, m, m)``; finite differences otherwise.
    steps : int
        RK4 steps per flow evaluation.
    """

    def __init__(self, V, DV=None, steps=64, VDV=None):
        self.V = V
        self.DV = DV if DV is not None else self._fd_jacobian
        self.VDV = VDV if VDV is not None else (lambda X: (self.V(X), self.DV(X)))
        self.steps = int(steps)

    def _fd_jacobian(self, X):
        from . import fd

        return fd.jacobian(self.V, X, what="flow generator")

    def flow(self, X0, t):
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (X0.shape[0],))[:, None]
        h = 1.0 / self.steps

        def f(x):
            return t * self.V(x)

        x = X0.copy()
        for _ in range(self.steps):
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return check_finite(x, X0, "flow")

    def flow_with_jacobian(self, X0, t):
        """Endpoint, Jacobian in the start point (n, m, m) and derivative in t (n, m)."""
        X0 = np.atleast_2d(np.asarray(X0, dtype=float))
        n, m = X0.shape
        tt = np.broadcast_to(np.asarray(t, dtype=float), (n,))
        tc = tt[:, None]
        t3 = tt[:, None, None]
        h = 1.0 / self.steps

        def f(x, Y, z):
            v, A = self.VDV(x)
            return (tc * v, t3 * (A @ Y), v + tc * np.einsum("nij,nj->ni", A, z))

        x = X0.copy()
        Y = np.broadcast_to(np.eye(m), (n, m, m)).copy()
        z = np.zeros((n, m))
        for _ in range(self.steps):
            a1, b1, c1 = f(x, Y, z)
            a2, b2, c2 = f(x + 0.5 * h * a1, Y + 0.5 * h * b1, z + 0.5 * h * c1)
            a3, b3, c3 = f(x + 0.5 * h * a2, Y + 0.5 * h * b2, z + 0.5 * h * c2)
            a4, b4, c4 = f(x + h * a3, Y + h * b3, z + h * c3)
            x = x + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
            Y = Y + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
            z = z + (h / 6.0) * (c1 + 2 * c2 + 2 * c3 + c4)
        check_finite(x, X0, "flow")
        return x, Y, z


def reparametrized_flow(V, DV=None, margin=None, reference=None, steps=64, VDV=None):
    """Flow of ``V / V0``, whose first component is identically one.

    The guard requires ``V0 > margin`` at every evaluated point.  When
    ``margin`` is None it is set to ``0.1 * V0(reference)``.  ``VDV`` may
    supply the field and its Jacobian from one call.
    """
    if margin is None:
        if reference is None:
            raise ValueError("either margin or reference is required")
        ref = np.atleast_2d(np.asarray(reference, dtype=float))
        margin = 0.1 * float(V(ref)[0, 0])
    if not margin > 0:
        raise FlowBoxError("flow box not applicable here: generating field has V0 <= 0 at the reference")

    def guard(X, v0):
        bad = ~(v0 > margin)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise FlowBoxError(
                f"flow box not applicable here: V0 = {v0[i]:.3g} <= margin {margin:.3g} "
                f"at q = {np.array2string(X[i], precision=6)}"
            )

    def W(X):
        v = V(X)
        guard(X, v[:, 0])
        w = v / v[:, :1]
        w[:, 0] = 1.0
        return w

    def normalise(X, v, A):
        guard(X, v[:, 0])
        v0 = v[:, 0]
        w = v / v0[:, None]
        w[:, 0] = 1.0
        dw = A / v0[:, None, None] - v[:, :, None] * A[:, None, 0, :] / (v0**2)[:, None, None]
        dw[:, 0, :] = 0.0
        return w, dw

    if VDV is None and DV is not None:
        def VDV(X):
            return V(X), DV(X)

    WDW = None
    if VDV is not None:
        def WDW(X):
            return normalise(X, *VDV(X))

    fm = FlowMap(W, None if WDW is None else (lambda X: WDW(X)[1]), steps=steps, VDV=WDW)
    fm.margin = margin
    return fm


def flow_jacobian(F, start, t):
    """Jacobian of the time-t flow at ``start`` from the variational equation."""
    _, Y, _ = F.flow_with_jacobian(np.atleast_2d(start), t)
    return Y[0]
