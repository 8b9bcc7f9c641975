"""Normal form of a convex Hamiltonian along an orbit segment.

The pipeline moves the orbit segment to the axis ``t e0`` and then normalises
the second-order jet of the Hamiltonian along it:

1. ``straighten``: homogeneous map whose base sends ``t e0`` to the orbit;
2. ``kill_momentum``: vertical map removing the orbit momentum;
3. ``kill_p0pstar``: shear removing the mixed momentum block on the axis;
4. ``flow_box_straighten``: flow-box coordinates of ``dH/dp(q, 0)``, so the
   transverse velocity vanishes on a whole neighbourhood;
5. ``metric_path`` and ``normalize_metric``: a path ``M(t)`` with
   ``M M^T = A = d2H/dp*dp*`` on the axis and the associated homogeneous and
   vertical maps, which make the transverse momentum Hessian the identity.

The mixed derivative ``d2H/dq* dp0`` on the axis (the obstruction) is not
removed; its vanishing is invariant under the maps that preserve the other
conditions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fd
from .dynamics import OrbitSegment, hamilton_rk4, integrate_on_grid
from .errors import (
    CriticalPointError,
    FlowBoxError,
    NormalFormError,
    SPDError,
    ShrinkDelta,
)
from .hamiltonian import ExpressionField, HamiltonianField, as_points, require_convex
from .splines import AxisSpline, axis_grid
from .transforms import (
    AxisAffinePotential,
    AxisLinearBase,
    AxisQuadraticPotential,
    CompositeMap,
    ExprBase,
    ExprPotential,
    FlowBoxBase,
    FrameBase,
    HomogeneousMap,
    IdentityBase,
    ShearBase,
    VerticalMap,
    map_from_recipe,
    pullback,
)

STATE_TOL = 1e-8
SECOND_TOL = 1e-6
VANISH_TOL = 1e-6
EIG_FLOOR = 1e-10
COND_LIMIT = 100.0
AXIS_MARGIN = 0.1
TUBE_QSTAR = 0.25
FLOW_TOL = 1e-9
FLOW_FAIL = 1e-7
FLOW_MAX_STEPS = 256


# ---------------------------------------------------------------- reports

@dataclass
class ConditionRecord:
    name: str
    max_residual: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_residual < self.tolerance)

    def to_dict(self):
        return {"name": self.name, "max_residual": float(self.max_residual),
                "tolerance": float(self.tolerance), "pass": self.passed}


@dataclass
class NormalFormReport:
    """Residuals of the normal-form conditions over a time grid.

    ``obstruction_values[k]`` is ``d2H/dq* dp0`` at ``(grid[k] e0, 0)``.
    """

    conditions: list
    obstruction_values: np.ndarray
    f_drift: float
    w_drift: float
    delta_used: float
    grid: np.ndarray
    vanish_tol: float = VANISH_TOL

    @property
    def passed(self):
        return all(c.passed for c in self.conditions)

    @property
    def obstruction_vanishes(self):
        return bool(np.max(np.abs(self.obstruction_values)) < self.vanish_tol)

    def condition(self, name):
        """Record by full name or by its leading tag such as ``"(5)"``."""
        for c in self.conditions:
            if c.name == name or c.name.split(" ", 1)[0] == name:
                return c
        raise KeyError(name)

    def to_dict(self):
        return {
            "conditions": [c.to_dict() for c in self.conditions],
            "obstruction": {"values": np.asarray(self.obstruction_values).tolist(),
                            "vanishes": self.obstruction_vanishes},
            "expansion": {"f_drift": float(self.f_drift), "w_drift": float(self.w_drift)},
            "delta_used": float(self.delta_used),
            "grid": np.asarray(self.grid).tolist(),
        }


def _axis_points(t, m, p=None):
    X = np.zeros((len(t), 2 * m))
    X[:, 0] = t
    if p is not None:
        X[:, m:] = p
    return X


def evaluate_conditions(H, t, orbit_x, delta, P_eval=None, stencil=None,
                        tolerances=None, homogeneous=False, P_level=None):
    """Residuals of the normal-form conditions for orbit samples ``orbit_x`` at times ``t``.

    Second derivatives are evaluated by finite differences of ``H`` at
    ``(t e0, P_eval)``; ``P_eval`` defaults to the orbit momenta.  With
    ``homogeneous=True`` the momentum condition compares against the constant
    covector ``P_level`` and the full mixed block d2H/dq dp is checked.
    """
    stencil = stencil or H.stencil
    tol = {"state": STATE_TOL, "second": SECOND_TOL}
    tol.update(tolerances or {})
    m, d = H.m, H.d
    t = np.asarray(t, dtype=float)
    orbit_x = np.asarray(orbit_x, dtype=float)
    P = orbit_x[:, m:] if P_eval is None else np.broadcast_to(P_eval, (len(t), m))
    Xc = _axis_points(t, m, P)
    X0 = _axis_points(t, m)
    both = np.concatenate([Xc, X0], axis=0)
    Hs = fd.hessian(H.value, both, stencil, what=H._what())
    g = fd.partials(H.value, X0, [(0,), (m,)], stencil, what=H._what())
    n = len(t)
    Hc, H0 = Hs[:n], Hs[n:]
    Hpp = Hc[:, m:, m:]
    Hqp = Hc[:, :m, m:]

    q_err = orbit_x[:, :m].copy()
    q_err[:, 0] -= t
    conds = [ConditionRecord("(2) Q(t)=t e0", float(np.max(np.abs(q_err))), tol.get("(2)", tol["state"]))]
    if homogeneous:
        target = np.zeros(m) if P_level is None else np.asarray(P_level, dtype=float)
        conds.append(ConditionRecord("(9) P(t)=(P0,0)", float(np.max(np.abs(orbit_x[:, m:] - target))),
                                     tol.get("(9)", tol["state"])))
    else:
        conds.append(ConditionRecord("(3) P(t)=0", float(np.max(np.abs(orbit_x[:, m:]))),
                                     tol.get("(3)", tol["state"])))
    conds.append(ConditionRecord("(4) d2H/dp0dp*=0", float(np.max(np.abs(Hpp[:, 0, 1:]))),
                                 tol.get("(4)", tol["second"])))
    conds.append(ConditionRecord("(5) d2H/dqdp*=0", float(np.max(np.abs(Hqp[:, :, 1:]))),
                                 tol.get("(5)", tol["second"])))
    if homogeneous:
        conds.append(ConditionRecord("(10) d2H/dqdp=0", float(np.max(np.abs(Hqp))),
                                     tol.get("(10)", tol["second"])))
    else:
        conds.append(ConditionRecord("(6) d2H/dp*dp*=Id",
                                     float(np.max(np.abs(Hpp[:, 1:, 1:] - np.eye(d)))),
                                     tol.get("(6)", tol["second"])))
    obstruction = H0[:, 1:m, m]
    h00 = H.value(np.zeros((1, 2 * m)))[0]
    f_drift = float(np.max(np.abs(H.value(X0) - h00)))
    w_drift = float(np.max(np.abs(g[:, 1] - 1.0)))
    return NormalFormReport(conds, obstruction, f_drift, w_drift, float(delta), t)


def verification_steps(H, delta, grid=11):
    """RK4 steps for the verification orbit.

    On a normal form the vector field is constant along the axis, so RK4 is
    exact there up to rounding and one step per grid interval suffices for
    fields whose gradient needs finite differences of a flow-backed map;
    other fields use the default resolution.
    """
    if H.analytic_order >= 1:
        return max(16, int(np.ceil(512 * delta)))
    return grid - 1


def verify_conditions(H, delta, grid=11, stencil=None, tolerances=None, x0=None, steps=None,
                      homogeneous=False):
    """Integrate H from ``x0`` (default the origin) and report the conditions on [0, delta].

    Residuals use finite differences of the evaluator only, independently of
    how the field was constructed.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    m = H.m
    x0 = np.zeros(2 * m) if x0 is None else as_points(x0, H.width)[0]
    steps = steps or verification_steps(H, delta, grid)
    per = max(1, int(np.ceil(steps / (grid - 1))))
    total = per * (grid - 1)
    traj, _ = hamilton_rk4(H, x0[None, :], delta / total, total)
    xs = traj[::per, 0]
    t = np.linspace(0.0, delta, grid)
    P_level = x0[m:] if homogeneous else None
    return evaluate_conditions(H, t, xs, delta, stencil=stencil, tolerances=tolerances,
                               homogeneous=homogeneous, P_level=P_level)


def obstruction(H, t, stencil=None):
    """``d2H/dq* dp0`` at ``(t e0, 0)`` for each time; shape (len(t), d)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    m = H.m
    X0 = _axis_points(t, m)
    vals = fd.partials(H.value, X0, [(k, m) for k in range(1, m)], stencil or H.stencil, what=H._what())
    return vals


def vanishes(values, tol=VANISH_TOL):
    return bool(np.max(np.abs(values)) < tol)


# ---------------------------------------------------------------- Lyapunov

def _spd_eigh(A, floor=EIG_FLOOR):
    w, O = np.linalg.eigh(A)
    if np.any(w <= floor):
        raise SPDError(f"matrix is not positive definite (min eigenvalue {float(np.min(w)):.3g})")
    return w, O


def lyapunov_solve(A, dA, floor=EIG_FLOOR):
    """Symmetric solution B of ``B A + A B = dA`` for SPD ``A`` (batched over leading axes).

    Solved in the eigenbasis ``A = O D O^T``: ``X_ij = (O^T dA O)_ij / (D_i + D_j)``.
    """
    A = np.asarray(A, dtype=float)
    dA = np.asarray(dA, dtype=float)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    dA = 0.5 * (dA + np.swapaxes(dA, -1, -2))
    w, O = _spd_eigh(A, floor)
    Ot = np.swapaxes(O, -1, -2)
    X = Ot @ dA @ O / (w[..., :, None] + w[..., None, :])
    B = O @ X @ Ot
    return 0.5 * (B + np.swapaxes(B, -1, -2))


def spd_sqrt(A, floor=EIG_FLOOR):
    """Symmetric square root of an SPD matrix."""
    w, O = _spd_eigh(0.5 * (A + np.swapaxes(A, -1, -2)), floor)
    return (O * np.sqrt(w)[..., None, :]) @ np.swapaxes(O, -1, -2)


def _antisym(X):
    return 0.5 * (X - np.swapaxes(X, -1, -2))


def _sym(X):
    return 0.5 * (X + np.swapaxes(X, -1, -2))


@dataclass
class LyapunovPath:
    """Metric path along the axis.

    Attributes
    ----------
    t : node times
    A, dA : transverse momentum Hessian on the axis and its spline derivative
    lyapunov_B : symmetric solution of ``B A + A B = dA``
    M : solution of ``M' = B M`` with ``M(0) = A(0)^(1/2)``
    R : orthogonal gauge with ``R' = -antisym(M^-1 B M) R``, ``R(0) = I``
    Mhat : ``M R``; satisfies ``Mhat Mhat^T = A`` and has symmetric ``Mhat^-1 Mhat'``
    """

    t: np.ndarray
    A: np.ndarray
    dA: np.ndarray
    lyapunov_B: np.ndarray
    M: np.ndarray
    R: np.ndarray
    Mhat: np.ndarray

    def invariant_residuals(self):
        B, A = self.lyapunov_B, self.A
        i0 = int(np.argmin(np.abs(self.t)))
        return {
            "lyapunov": float(np.max(np.abs(B @ A + A @ B - self.dA))),
            "factor": float(np.max(np.abs(self.M @ np.swapaxes(self.M, 1, 2) - A))),
            "initial": float(np.max(np.abs(self.M[i0] - spd_sqrt(A[i0])))),
            "symmetry": float(np.max(np.abs(B - np.swapaxes(B, 1, 2)))),
        }


def metric_path(t, A, substeps=4):
    """Metric path for SPD samples ``A`` on the uniform grid ``t`` (must contain 0).

    ``A'`` and ``A`` between nodes come from a quintic spline of the samples;
    ``M`` and the gauge ``R`` are integrated with RK4 from t = 0 in both
    directions using ``substeps`` steps per grid interval.
    """
    t = np.asarray(t, dtype=float)
    A = _sym(np.asarray(A, dtype=float))
    _spd_eigh(A)
    spline = AxisSpline(t, A)
    dA = _sym(spline(t, 1))
    B_nodes = lyapunov_solve(A, dA)
    i0 = int(np.argmin(np.abs(t)))
    if abs(t[i0]) > 1e-12:
        raise ValueError("grid must contain t = 0")
    d = A.shape[1]
    h_grid = t[1] - t[0]

    def B_at(s):
        Ai, dAi = spline.derivatives(s, 1)
        return lyapunov_solve(_sym(Ai), _sym(dAi))

    def rhs(B, M, R):
        Minv_B_M = np.linalg.solve(M, B @ M)
        Om = _antisym(Minv_B_M)
        return B @ M, -Om @ R

    def march(direction):
        n_int = (len(t) - 1 - i0) if direction > 0 else i0
        h = direction * h_grid / substeps
        steps = n_int * substeps
        s0 = t[i0] + h * np.arange(steps)
        Bs = B_at(np.concatenate([s0, s0 + 0.5 * h, s0 + h]))
        B0, Bm, B1 = Bs[:steps], Bs[steps:2 * steps], Bs[2 * steps:]
        M = spd_sqrt(A[i0])
        R = np.eye(d)
        Ms, Rs = [M], [R]
        for k in range(steps):
            k1 = rhs(B0[k], M, R)
            k2 = rhs(Bm[k], M + 0.5 * h * k1[0], R + 0.5 * h * k1[1])
            k3 = rhs(Bm[k], M + 0.5 * h * k2[0], R + 0.5 * h * k2[1])
            k4 = rhs(B1[k], M + h * k3[0], R + h * k3[1])
            M = M + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
            R = R + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
            if (k + 1) % substeps == 0:
                Ms.append(M)
                Rs.append(R)
        return np.array(Ms), np.array(Rs)

    Mf, Rf = march(+1)
    Mb, Rb = march(-1)
    M = np.concatenate([Mb[::-1][:-1], Mf])
    R = np.concatenate([Rb[::-1][:-1], Rf])
    return LyapunovPath(t=t, A=A, dA=dA, lyapunov_B=B_nodes, M=M, R=R, Mhat=M @ R)


# ---------------------------------------------------------------- steps

@dataclass
class AxisSamples:
    """Orbit samples ``x`` (N, 2m) at node times ``t`` after some transformations."""

    t: np.ndarray
    x: np.ndarray

    @property
    def m(self):
        return self.x.shape[1] // 2


@dataclass
class StepResult:
    name: str
    H: HamiltonianField
    psi: object
    orbit: AxisSamples
    identity: bool
    info: dict = field(default_factory=dict)
    report: NormalFormReport | None = None


def _complement(v):
    """Orthonormal (m, d) basis completing ``v`` (Gram-Schmidt of e1..ed, then e0)."""
    m = v.size
    basis = [v / np.linalg.norm(v)]
    cols = []
    for k in list(range(1, m)) + [0]:
        e = np.zeros(m)
        e[k] = 1.0
        for b in basis:
            e = e - (b @ e) * b
        nrm = np.linalg.norm(e)
        if nrm > 1e-8:
            e = e / nrm
            basis.append(e)
            cols.append(e)
        if len(cols) == m - 1:
            break
    return np.array(cols).T


def straighten(H, orbit: OrbitSegment, delta, check=None):
    """Homogeneous map whose base sends ``t e0`` to the orbit point ``Q(t)``.

    The base map is ``Q(q0) + N q*`` with ``N`` an orthonormal complement of
    ``Q'(0)``.  Raises CriticalPointError when ``Q'(0) = 0`` and ShrinkDelta
    when ``[Q'(t) | N]`` has condition number above 100 on the grid.
    """
    m = orbit.m
    t = orbit.t
    i0 = int(np.argmin(np.abs(t)))
    v0 = orbit.xdot[i0, :m]
    if np.linalg.norm(v0) < 1e-12:
        raise CriticalPointError("critical orbit point: Q'(0) = 0, the orbit cannot be straightened")
    N = _complement(v0)
    Q = orbit.Q
    straight = np.max(np.abs(Q - _axis_points(t, m)[:, :m])) <= 1e-13
    if straight and np.allclose(N, np.eye(m)[:, 1:], rtol=0, atol=1e-15):
        psi = HomogeneousMap(IdentityBase(m), label="straighten")
        return StepResult("straighten", pullback(H, psi), psi, AxisSamples(t, orbit.x.copy()), True,
                          {"cond_max": 1.0})
    curve = AxisSpline(t, Q)
    vel = curve(t, 1)
    frames = np.concatenate([vel[:, :, None], np.broadcast_to(N, (len(t), m, m - 1))], axis=2)
    cond = np.linalg.cond(frames)
    cond_max = float(np.max(cond))
    if not cond_max <= COND_LIMIT:
        raise ShrinkDelta(f"straightening frame condition number {cond_max:.3g} exceeds {COND_LIMIT:g}")
    base = FrameBase(curve, N)
    psi = HomogeneousMap(base, label="straighten")
    new = psi.inverse(orbit.x)
    return StepResult("straighten", pullback(H, psi), psi, AxisSamples(t, new), False,
                      {"cond_max": cond_max})


def kill_momentum(H, orbit: AxisSamples):
    """Vertical map with ``u = v(q0) + P*(q0) . q*``, ``v' = P0``, ``v(0) = 0``."""
    m = orbit.m
    t = orbit.t
    P = orbit.x[:, m:]
    pot = AxisAffinePotential(AxisSpline(t, P[:, 0]), AxisSpline(t, P[:, 1:]))
    psi = VerticalMap(pot, label="kill_momentum")
    if pot.zero:
        return StepResult("kill_momentum", H, psi, orbit, True)
    return StepResult("kill_momentum", pullback(H, psi), psi, AxisSamples(t, psi.inverse(orbit.x)), False)


def axis_momentum_hessian(H, t, P_level=None):
    m = H.m
    X = _axis_points(t, m, P_level)
    Hpp = H.hess_pp(X)
    return _sym(Hpp)


def shear_map(l_samples, t, label):
    l_samples = np.asarray(l_samples, dtype=float)
    m = l_samples.shape[1] + 1
    if not np.any(l_samples):
        return HomogeneousMap(IdentityBase(m), label=label), True
    return HomogeneousMap(ShearBase(AxisSpline(t, l_samples)), label=label), False


def kill_p0pstar(H, orbit: AxisSamples):
    """Shear ``(q0 - l(q0) . q*, q*)`` with ``l = -A^-1 c`` on the axis.

    ``A = d2H/dp*dp*`` and ``c = d2H/dp0dp*`` at ``(t e0, 0)``.
    """
    t = orbit.t
    Hpp = axis_momentum_hessian(H, t)
    A, c = Hpp[:, 1:, 1:], Hpp[:, 0, 1:]
    _spd_eigh(A)
    l = -np.linalg.solve(A, c[:, :, None])[:, :, 0]
    psi, ident = shear_map(l, t, "kill_p0pstar")
    if ident:
        return StepResult("kill_p0pstar", H, psi, orbit, True, {"l_max": 0.0})
    return StepResult("kill_p0pstar", pullback(H, psi), psi, AxisSamples(t, psi.inverse(orbit.x)),
                      False, {"l_max": float(np.max(np.abs(l)))})


def tube_grid(d, delta, margin=AXIS_MARGIN, radius=TUBE_QSTAR, n0=9, nstar=5):
    """Deterministic grid of configuration points in the working tube."""
    axes = [np.linspace(-margin, delta + margin, n0)] + [np.linspace(-radius, radius, nstar)] * d
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.reshape(-1) for g in mesh], axis=1)


def flow_box_straighten(H, orbit: AxisSamples, P_level=None, delta=None, steps=16, tube=None,
                        max_steps=FLOW_MAX_STEPS, tol=FLOW_TOL):
    """Flow-box coordinates for ``V(q) = dH/dp(q, P_level)``.

    Afterwards ``dH/dp*(q, P_level) = 0`` on the whole tube.  The number of
    RK4 steps of the flow starts at ``steps`` and is doubled until the
    residual of that identity on the tube grid is below ``tol`` (at most
    ``max_steps``).  Raises FlowBoxError (a ShrinkDelta) when
    ``V0 <= 0.1 V0(0)`` somewhere on the tube or when the residual stays
    above ``FLOW_FAIL``.
    """
    m = H.m
    P_level = np.zeros(m) if P_level is None else np.asarray(P_level, dtype=float)
    if tube is None:
        t = orbit.t
        tube = tube_grid(H.d, float(t[-1] - AXIS_MARGIN) if delta is None else delta)
    X = np.concatenate([tube, np.broadcast_to(P_level, tube.shape)], axis=1)
    while True:
        base = FlowBoxBase(H, P_level, steps=steps, tube=tube)
        psi = HomogeneousMap(base, label="flow_box")
        if base.identity:
            return StepResult("flow_box", H, psi, orbit, True)
        H_new = pullback(H, psi)
        residual = float(np.max(np.abs(H_new.grad_p(X)[:, 1:])))
        if residual <= tol or steps >= max_steps:
            break
        steps *= 2
    if residual > FLOW_FAIL:
        raise FlowBoxError(f"flow box not accurate with {steps} steps (tube residual {residual:.3g}); shrink delta")
    return StepResult("flow_box", H_new, psi, AxisSamples(orbit.t, psi.inverse(orbit.x)), False,
                      {"steps": steps, "tube_residual": residual})


def normalize_metric(H, orbit: AxisSamples, path: LyapunovPath):
    """Homogeneous map ``(q0, Mhat(q0) q*)`` followed by the vertical map of
    ``u = q*^T S(q0) q* / 2`` with ``S = sym(Mhat^-1 Mhat')``.

    Returns two step results; the first one (homogeneous factor alone) shows
    the mixed block that the vertical factor then removes.
    """
    t = orbit.t
    d = path.A.shape[1]
    if np.allclose(path.Mhat, np.eye(d), rtol=0, atol=1e-15):
        ident_h = HomogeneousMap(IdentityBase(d + 1), label="metric")
        ident_v = VerticalMap(AxisQuadraticPotential(AxisSpline(t, np.zeros((len(t), d, d)))),
                              label="metric_vertical")
        return (StepResult("metric", H, ident_h, orbit, True),
                StepResult("metric_vertical", H, ident_v, orbit, True))
    Ms = AxisSpline(t, path.Mhat)
    dM = Ms(t, 1)
    S = _sym(np.linalg.solve(path.Mhat, dM))
    psi_h = HomogeneousMap(AxisLinearBase(Ms), label="metric")
    H1 = pullback(H, psi_h)
    o1 = AxisSamples(t, psi_h.inverse(orbit.x))
    psi_v = VerticalMap(AxisQuadraticPotential(AxisSpline(t, S)), label="metric_vertical")
    H2 = pullback(H1, psi_v)
    o2 = AxisSamples(t, psi_v.inverse(o1.x))
    return (StepResult("metric", H1, psi_h, o1, False, {"S_max": float(np.max(np.abs(S)))}),
            StepResult("metric_vertical", H2, psi_v, o2, False))


# ---------------------------------------------------------------- pipeline

@dataclass
class PipelineOptions:
    grid: int = 11
    margin: float = AXIS_MARGIN
    points_per_unit: int = 128
    flow_steps: int = 16
    max_shrink: int = 4
    tolerances: dict | None = None
    stencil: fd.Stencil | None = None
    step_reports: bool = True
    verify_steps: int | None = None


@dataclass
class PipelineResult:
    H: HamiltonianField
    H_final: HamiltonianField
    psi_total: CompositeMap
    report: NormalFormReport
    recipe: dict
    steps: list
    orbit: OrbitSegment
    path: LyapunovPath | None
    delta_used: float
    elapsed: float

    def __iter__(self):
        return iter((self.H_final, self.psi_total, self.report, self.recipe))


def raw_orbit(H, x0, delta, options):
    t, check_idx = axis_grid(delta, options.margin, options.points_per_unit, options.grid)
    return integrate_on_grid(H, x0, t), check_idx


def _step_report(step, check_idx, delta, options, **kw):
    o = step.orbit
    return evaluate_conditions(step.H, o.t[check_idx], o.x[check_idx], delta,
                               stencil=options.stencil, tolerances=options.tolerances, **kw)


def _convexity_tube(H, orbit, rng_seed=0, n=200):
    rng = np.random.default_rng(rng_seed)
    m = H.m
    k = rng.integers(0, len(orbit.t), size=n)
    q = orbit.Q[k] + np.concatenate(
        [np.zeros((n, 1)), rng.uniform(-TUBE_QSTAR, TUBE_QSTAR, size=(n, m - 1))], axis=1)
    p = rng.uniform(-1.0, 1.0, size=(n, m))
    return np.concatenate([q, p], axis=1)


def _run_once(H, x0, delta, options):
    orbit, check_idx = raw_orbit(H, x0, delta, options)
    require_convex(H, _convexity_tube(H, orbit))
    steps = []

    def record(step):
        if options.step_reports and not step.identity:
            step.report = _step_report(step, check_idx, delta, options)
        steps.append(step)
        return step

    s = record(straighten(H, orbit, delta))
    s = record(kill_momentum(s.H, s.orbit))
    s = record(kill_p0pstar(s.H, s.orbit))
    s = record(flow_box_straighten(s.H, s.orbit, None, delta, steps=options.flow_steps))
    Hpp = axis_momentum_hessian(s.H, s.orbit.t)
    path = metric_path(s.orbit.t, Hpp[:, 1:, 1:])
    s1, s2 = normalize_metric(s.H, s.orbit, path)
    record(s1)
    s = record(s2)
    return orbit, steps, path, check_idx


def normal_form_pipeline(H, x0, delta, options=None):
    """Run the full pipeline with the halving policy for delta.

    Returns a :class:`PipelineResult`; unpacking yields
    ``(H_final, psi_total, report, recipe)``.
    """
    options = options or PipelineOptions()
    if not delta > 0:
        raise ValueError("delta must be positive")
    x0 = as_points(x0, H.width)[0]
    start = time.perf_counter()
    d_try = float(delta)
    for attempt in range(options.max_shrink + 1):
        try:
            orbit, steps, path, check_idx = _run_once(H, x0, d_try, options)
            break
        except ShrinkDelta:
            if attempt == options.max_shrink:
                raise
            d_try *= 0.5
    factors = [s.psi for s in reversed(steps) if not s.identity]
    psi_total = CompositeMap(factors, m=H.m)
    H_final = pullback(H, psi_total)
    report = verify_conditions(H_final, d_try, options.grid, options.stencil, options.tolerances,
                               steps=options.verify_steps)
    recipe = make_recipe(H, x0, d_try, psi_total, options)
    return PipelineResult(H, H_final, psi_total, report, recipe, steps, orbit, path, d_try,
                          time.perf_counter() - start)


# ---------------------------------------------------------------- recipes

def field_recipe(H):
    if not isinstance(H, ExpressionField):
        raise NormalFormError("only closed-form Hamiltonians can be recorded in a recipe")
    return {"text": H.text, "d": H.d, "name": H.name}


def make_recipe(H, x0, delta, psi_total, options, homogeneous=None):
    doc = {
        "format": "fibernf-recipe/1",
        "hamiltonian": field_recipe(H),
        "start": np.asarray(x0).tolist(),
        "delta": float(delta),
        "grid": int(options.grid),
        "factors": [f.to_recipe() for f in psi_total.factors],
    }
    if homogeneous is not None:
        doc["homogeneous"] = homogeneous
    return doc


def field_from_recipe(doc):
    from .hamiltonian import parse_hamiltonian

    h = doc["hamiltonian"]
    return parse_hamiltonian(h["text"], int(h["d"]), name=h.get("name"))


def rebuild_from_recipe(doc):
    """Return ``(H, psi_total, H_final)`` reconstructed from a recipe document."""
    H = field_from_recipe(doc)
    psi = map_from_recipe({"kind": "composite", "factors": doc["factors"]}, root=H)
    return H, psi, pullback(H, psi)


def verify_recipe(doc, tolerances=None, stencil=None):
    H, psi, H_final = rebuild_from_recipe(doc)
    hom = doc.get("homogeneous")
    if hom is not None:
        x0 = np.zeros(2 * H.m)
        x0[H.m] = float(hom["P0"])
        return verify_conditions(H_final, float(doc["delta"]), int(doc["grid"]), stencil, tolerances,
                                 x0=x0, homogeneous=True)
    return verify_conditions(H_final, float(doc["delta"]), int(doc["grid"]), stencil, tolerances)


# ---------------------------------------------------------------- random admissible maps

def _fmt(c):
    return repr(float(c))


def random_admissible_map(seed, delta=0.5, kind="vertical-flat", d=1, scale=0.2):
    """Seeded random admissible map preserving conditions (2), P=0 and (4).

    ``vertical-flat``: ``u`` is a sum of small monomials, each with at least two
    transverse factors, so ``du`` and ``d2u/dq0 dq*`` vanish on the axis.
    ``homogeneous-blockdiag``: ``phi(q0, q*) = (q0, Z(q0) q* + quadratic(q*))``
    with ``Z(q0) = Z0 + q0 Z1`` close to the identity.
    """
    rng = np.random.default_rng(seed)
    qs = [f"q{i}" for i in range(1, d + 1)]
    if kind == "vertical-flat":
        terms = []
        for _ in range(3):
            k = int(rng.integers(2, 4))
            factors = [qs[int(rng.integers(0, d))] for _ in range(k)]
            a = int(rng.integers(0, 3))
            coef = rng.uniform(-scale, scale) * 1.5
            mono = "*".join(factors + (["q0"] * a))
            terms.append(f"{_fmt(coef)}*{mono}")
        return VerticalMap(ExprPotential(" + ".join(terms), d), label="random vertical-flat")
    if kind == "homogeneous-blockdiag":
        Z0 = np.eye(d) + rng.uniform(-scale, scale, size=(d, d))
        Z1 = rng.uniform(-scale, scale, size=(d, d))
        comps = ["q0"]
        for i in range(d):
            parts = []
            for j in range(d):
                parts.append(f"({_fmt(Z0[i, j])} + {_fmt(Z1[i, j])}*q0)*{qs[j]}")
            for j in range(d):
                for k in range(j, d):
                    parts.append(f"{_fmt(rng.uniform(-scale, scale) * 0.5)}*{qs[j]}*{qs[k]}")
            comps.append(" + ".join(parts))
        return HomogeneousMap(ExprBase(comps, d), label="random homogeneous-blockdiag")
    raise ValueError(f"unknown admissible map kind {kind!r}")
