"""Transition maps between the sections {q0 = 0} and {q0 = delta} of an energy level.

The linearised transition map ``L`` (the transfer matrix) acts on the
transverse coordinates ``(q*, p*)``.  Reparametrising the Hamiltonian as
``(H - H(0)) / w`` with ``w(q) = dH/dp0(q, 0)`` keeps the energy surface and
the trajectories, so the transfer matrices agree; the same argument turns a
potential perturbation of the reparametrised field into a ``w``-weighted
perturbation of the original one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fd
from .dynamics import hamilton_rk4
from .errors import TransferError, check_finite
from .hamiltonian import HamiltonianField, as_points
from .transforms import ExprPotential

W_MARGIN = 0.1
TRANSFER_STEP = 1e-4
EVENT_TOL = 1e-13
STEPS_PER_UNIT = 256


def _zero_momentum(Q):
    Q = np.atleast_2d(Q)
    return np.concatenate([Q, np.zeros_like(Q)], axis=1)


def _value_gradient_hessian_at(H, X):
    """Value, gradient and Hessian of H, using analytic derivatives where available."""
    h = H.value(X)
    if H.analytic_order >= 2 or type(H).gradient_and_hessian is not HamiltonianField.gradient_and_hessian:
        g, Hs = H.gradient_and_hessian(X)
    else:
        g, Hs = H.gradient(X), H.hessian(X)
    return h, g, Hs


class _DerivedField(HamiltonianField):
    """Field built from a base field and the weight ``w(q) = dH/dp0(q, 0)``."""

    def __init__(self, base, name=None):
        super().__init__(base.d, name=name, stencil=base.stencil)
        self.base = base
        self.analytic_order = 1 if base.analytic_order >= 2 else 0

    def weight(self, Q, with_gradient=False):
        """``w(q)`` and optionally its gradient with respect to (q, p)."""
        X0 = _zero_momentum(Q)
        m = self.m
        if not with_gradient:
            return self.base.grad_p(X0)[:, 0]
        _, g, Hs = _value_gradient_hessian_at(self.base, X0)
        dw = np.zeros((X0.shape[0], self.width))
        dw[:, :m] = Hs[:, m, :m]
        return g[:, m], dw


class ShiftedScaledField(_DerivedField):
    """``(H(q, p) - c) / w(q)`` with ``c = H(origin)`` and ``w = dH/dp0(q, 0)``.

    Raises TransferError where ``w`` falls below ``margin``.
    """

    kind = "shifted-scaled"

    def __init__(self, base, shift=None, margin=W_MARGIN, name=None):
        super().__init__(base, name=name or (f"{base.name}~" if base.name else None))
        self.shift = float(base.value(np.zeros((1, base.width)))[0]) if shift is None else float(shift)
        self.margin = margin

    def _w(self, X, with_gradient=False):
        out = self.weight(X[:, :self.m], with_gradient)
        w = out[0] if with_gradient else out
        if np.any(~(w > self.margin)):
            i = int(np.flatnonzero(~(w > self.margin))[0])
            raise TransferError(f"w = {w[i]:.3g} below margin {self.margin:g} at "
                                f"q = {np.array2string(X[i, :self.m], precision=6)}")
        return out

    def value(self, X):
        X = as_points(X, self.width)
        return check_finite((self.base.value(X) - self.shift) / self._w(X), X, self._what())

    def gradient(self, X):
        X = as_points(X, self.width)
        if self.analytic_order < 1:
            return super().gradient(X)
        w, dw = self._w(X, with_gradient=True)
        Ht = (self.base.value(X) - self.shift) / w
        g = self.base.gradient(X)
        return (g - Ht[:, None] * dw) / w[:, None]


class SumWithPotentialField(_DerivedField):
    """``H(q, p) + eps * g(q)``, or ``H + eps * w(q) g(q)`` with ``weighted=True``.

    ``w`` is the weight of ``weight_field`` (default ``H`` itself).
    """

    kind = "sum-with-potential"

    def __init__(self, base, potential, eps, weighted=False, weight_field=None, name=None):
        super().__init__(base, name=name)
        if not isinstance(potential, ExprPotential):
            potential = ExprPotential(potential, base.d)
        self.potential = potential
        self.eps = float(eps)
        self.weighted = weighted
        self.weight_field = weight_field if weight_field is not None else base
        self.analytic_order = 1 if (base.analytic_order >= 1 and
                                    (not weighted or self.weight_field.analytic_order >= 2)) else 0

    def weight(self, Q, with_gradient=False):
        X0 = _zero_momentum(Q)
        m = self.m
        if not with_gradient:
            return self.weight_field.grad_p(X0)[:, 0]
        _, g, Hs = _value_gradient_hessian_at(self.weight_field, X0)
        dw = np.zeros((X0.shape[0], self.width))
        dw[:, :m] = Hs[:, m, :m]
        return g[:, m], dw

    def value(self, X):
        X = as_points(X, self.width)
        u = self.potential.derivs(X[:, :self.m], 0)[0]
        if self.weighted:
            u = u * self.weight(X[:, :self.m])
        return check_finite(self.base.value(X) + self.eps * u, X, self._what())

    def gradient(self, X):
        X = as_points(X, self.width)
        if self.analytic_order < 1:
            return super().gradient(X)
        m = self.m
        u, du = self.potential.derivs(X[:, :m], 1)
        g = self.base.gradient(X).copy()
        if self.weighted:
            w, dw = self.weight(X[:, :m], with_gradient=True)
            g[:, :m] += self.eps * (w[:, None] * du + u[:, None] * dw[:, :m])
        else:
            g[:, :m] += self.eps * du
        return g


def maupertuis_normalize(H, margin=W_MARGIN):
    """The reparametrised field ``(H - H(origin)) / w``."""
    return ShiftedScaledField(H, margin=margin)


def maupertuis_diagnostics(Ht, t):
    """``max |Ht(t e0, 0)|`` and ``max |dHt/dp0(t e0, 0) - 1|`` over times ``t``."""
    t = np.asarray(t, dtype=float)
    X = np.zeros((len(t), Ht.width))
    X[:, 0] = t
    g = fd.partials(Ht.value, X, [(Ht.m,)], Ht.stencil, what=Ht._what())[:, 0]
    return float(np.max(np.abs(Ht.value(X)))), float(np.max(np.abs(g - 1.0)))


# ---------------------------------------------------------------- section maps

def complete_momentum(H, e, Y, guess=0.0, bracket=(-0.9, 0.9), tol=1e-14, maxiter=50):
    """Solve ``H(0, q*, p0, p*) = e`` for ``p0`` at each row ``Y = (q*, p*)``.

    Newton from ``guess``; rows that fail fall back to bisection on ``bracket``.
    Returns full phase points (n, 2m).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = Y.shape[0]
    d = Y.shape[1] // 2
    m = d + 1
    X = np.zeros((n, 2 * m))
    X[:, 1:m] = Y[:, :d]
    X[:, m + 1:] = Y[:, d:]
    X[:, m] = guess
    ok = np.zeros(n, dtype=bool)
    for _ in range(maxiter):
        r = H.value(X) - e
        dp0 = H.grad_p(X)[:, 0]
        ok = np.abs(r) <= tol * (1.0 + abs(e))
        if np.all(ok):
            break
        step = np.where(ok, 0.0, r / np.where(np.abs(dp0) > 1e-12, dp0, np.inf))
        X[:, m] -= step
        if not np.all(np.isfinite(X[:, m])) or np.any(np.abs(X[:, m]) > 1e3):
            break
    bad = ~ok | ~np.isfinite(X[:, m])
    if np.any(bad):
        X[bad] = _bisect_p0(H, e, X[bad], bracket, tol)
    return X


def _bisect_p0(H, e, X, bracket, tol):
    m = X.shape[1] // 2
    lo = X.copy()
    hi = X.copy()
    lo[:, m], hi[:, m] = bracket
    flo = H.value(lo) - e
    fhi = H.value(hi) - e
    if np.any(flo * fhi > 0):
        i = int(np.flatnonzero(flo * fhi > 0)[0])
        raise TransferError(
            f"cannot solve H = {e:.6g} for p0 at q* = {X[i, 1:m]}, p* = {X[i, m + 1:]}: "
            f"Newton failed and no sign change on [{bracket[0]}, {bracket[1]}]"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        fm = H.value(mid) - e
        left = np.sign(fm) == np.sign(flo)
        lo = np.where(left[:, None], mid, lo)
        flo = np.where(left, fm, flo)
        hi = np.where(left[:, None], hi, mid)
        if np.max(hi[:, m] - lo[:, m]) < 1e-15:
            break
    return 0.5 * (lo + hi)


def _rk4_rows(H, X, h):
    """One RK4 step with a per-row step length."""
    m = H.m

    def f(Z):
        g = H.gradient(Z)
        return np.concatenate([g[:, m:], -g[:, :m]], axis=1)

    hh = h[:, None]
    k1 = f(X)
    k2 = f(X + 0.5 * hh * k1)
    k3 = f(X + 0.5 * hh * k2)
    k4 = f(X + hh * k3)
    return X + (hh / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@dataclass
class SectionShot:
    """End states on ``{q0 = delta}`` with crossing times and energy drift."""

    x_end: np.ndarray
    t_end: np.ndarray
    energy_drift: float

    @property
    def transverse(self):
        m = self.x_end.shape[1] // 2
        return np.concatenate([self.x_end[:, 1:m], self.x_end[:, m + 1:]], axis=1)


def shoot_to_section(H, X0, delta, steps_per_unit=STEPS_PER_UNIT, t_max=None, qdot_margin=W_MARGIN):
    """Integrate from ``X0`` until ``q0 = delta``.

    Fixed RK4 steps of length ``1/steps_per_unit``; the last step is
    shortened so that it ends exactly on the section (Newton iteration on the
    step length, to ``|q0 - delta| < 1e-13``).  This keeps the section map a
    smooth function of the start, as finite differences require.
    """
    X0 = as_points(X0, H.width)
    n = X0.shape[0]
    m = H.m
    h = 1.0 / steps_per_unit
    t_max = t_max if t_max is not None else 20.0 * max(delta, 0.1) + 1.0
    chunk = max(8, int(np.ceil(delta / h)) + 2)
    x = X0.copy()
    before = np.full((n, X0.shape[1]), np.nan)
    k_cross = np.full(n, -1)
    t = 0
    e0 = H.value(X0)
    while np.any(k_cross < 0):
        if t * h > t_max:
            raise TransferError(f"no crossing of q0 = {delta:g} within time {t_max:g}")
        traj, _ = hamilton_rk4(H, x, h, chunk)
        crossed = traj[1:, :, 0] >= delta
        for i in np.flatnonzero(k_cross < 0):
            hit = np.flatnonzero(crossed[:, i])
            if hit.size:
                k_cross[i] = t + hit[0]
                before[i] = traj[hit[0], i]
        x = traj[-1]
        t += chunk
    # shortened last step, found by Newton on its length
    qdot = H.grad_p(before)[:, 0]
    if np.any(np.abs(qdot) < qdot_margin):
        raise TransferError("tangential crossing: |dq0/dt| below margin at the section")
    tau = np.clip((delta - before[:, 0]) / qdot, 0.0, 2.0 * h)
    for _ in range(30):
        y = _rk4_rows(H, before, tau)
        r = y[:, 0] - delta
        if np.max(np.abs(r)) < EVENT_TOL:
            break
        tau = tau - r / H.grad_p(y)[:, 0]
    else:
        raise TransferError("event location on the section did not converge")
    energy_drift = float(np.max(np.abs(H.value(y) - e0)))
    return SectionShot(y, k_cross * h + tau, energy_drift)


def section_map(H, e, start, delta, **kw):
    """Transverse coordinates ``(q*, p*)`` at ``q0 = delta`` for starts ``(q*, p*)`` at ``q0 = 0``.

    The start is completed to the energy level ``H = e`` by solving for ``p0``.
    """
    Y = np.atleast_2d(np.asarray(start, dtype=float))
    X0 = complete_momentum(H, e, Y)
    out = shoot_to_section(H, X0, delta, **kw).transverse
    return out[0] if np.ndim(start) == 1 else out


# ---------------------------------------------------------------- transfer matrices

def transverse_symplectic(d):
    return np.block([[np.zeros((d, d)), np.eye(d)], [-np.eye(d), np.zeros((d, d))]])


@dataclass
class TransferMatrix:
    """Linearised transition map on ``(q*, p*)`` with metadata."""

    L: np.ndarray
    e: float
    delta: float
    fd_step: float
    energy_drift: float = 0.0
    name: str | None = None

    @property
    def symplecticity(self):
        d = self.L.shape[0] // 2
        J = transverse_symplectic(d)
        return float(np.linalg.norm(self.L.T @ J @ self.L - J, 2))

    def to_dict(self):
        return {"L": self.L.tolist(), "symplecticity": self.symplecticity,
                "metadata": {"e": float(self.e), "delta": float(self.delta), "fd_step": float(self.fd_step)}}


def linearize_transfer(H, e, delta, fd_step=TRANSFER_STEP, levels=1, **kw):
    """Central finite-difference Jacobian of :func:`section_map` at the origin."""
    d = H.d
    drift = [0.0]

    def F(Y):
        X0 = complete_momentum(H, e, Y)
        shot = shoot_to_section(H, X0, delta, **kw)
        drift[0] = max(drift[0], shot.energy_drift)
        return shot.transverse

    stencil = fd.Stencil(h=fd_step, levels=levels)
    L = fd.jacobian(F, np.zeros((1, 2 * d)), stencil, what="section map")[0]
    return TransferMatrix(L, float(e), float(delta), float(fd_step), drift[0], H.name)


def origin_energy(H):
    return float(H.value(np.zeros((1, H.width)))[0])


@dataclass
class InvarianceCheck:
    difference: float
    L_H: TransferMatrix
    L_tilde: TransferMatrix
    surface_residual: float


def level_coincidence(H, Ht, e, n=32, seed=0, radius=0.05):
    """``max |Ht|`` at points of ``{H = e}`` near the section ``q0 = 0`` (should vanish)."""
    rng = np.random.default_rng(seed)
    Y = rng.uniform(-radius, radius, size=(n, 2 * H.d))
    X = complete_momentum(H, e, Y)
    X[:, 0] = rng.uniform(0.0, 0.1, size=n)
    X = complete_momentum_at(H, e, X)
    return float(np.max(np.abs(Ht.value(X))))


def complete_momentum_at(H, e, X, tol=1e-14, maxiter=50):
    """Newton in ``p0`` keeping the other coordinates of ``X`` (any q0)."""
    X = X.copy()
    m = H.m
    for _ in range(maxiter):
        r = H.value(X) - e
        if np.max(np.abs(r)) <= tol * (1.0 + abs(e)):
            break
        X[:, m] -= r / H.grad_p(X)[:, 0]
    return X


def reparam_invariance_check(H, delta, fd_step=TRANSFER_STEP, Ht=None):
    """``||L_H - L_Ht||`` with ``L_H`` on ``H = H(origin)`` and ``L_Ht`` on ``Ht = 0``."""
    Ht = Ht or maupertuis_normalize(H)
    e = origin_energy(H)
    L1 = linearize_transfer(H, e, delta, fd_step)
    L2 = linearize_transfer(Ht, 0.0, delta, fd_step)
    diff = float(np.linalg.norm(L1.L - L2.L, 2))
    return InvarianceCheck(diff, L1, L2, level_coincidence(H, Ht, e))


@dataclass
class ExperimentRow:
    eps: float
    identity_residual: float
    effect_size: float
    symplecticity_L1: float
    symplecticity_L2: float


@dataclass
class ExperimentResult:
    rows: list
    L_H: TransferMatrix
    matrices: list = field(default_factory=list)

    header = ("eps", "identity_residual", "effect_size", "symplecticity_L1", "symplecticity_L2")

    def slope_deviation(self):
        """Relative deviation of ``effect / eps`` from the least-squares slope through 0."""
        eps = np.array([r.eps for r in self.rows])
        eff = np.array([r.effect_size for r in self.rows])
        slope = float(eps @ eff / (eps @ eps))
        return float(np.max(np.abs(eff / eps - slope)) / abs(slope)), slope


def mane_perturbation_experiment(H, potential, eps_list, delta, fd_step=TRANSFER_STEP):
    """Compare ``L`` of ``H + eps w g`` (level ``H(origin)``) with ``L`` of ``Ht + eps g`` (level 0).

    Returns the identity residual, the effect size ``||L_{H + eps w g} - L_H||``
    and both symplecticity residuals for each ``eps``.
    """
    pot = potential if isinstance(potential, ExprPotential) else ExprPotential(potential, H.d)
    if any(v.startswith("p") for v in _variables(pot)):
        raise TransferError("the perturbation must depend on q only")
    Ht = maupertuis_normalize(H)
    e = origin_energy(H)
    L_H = linearize_transfer(H, e, delta, fd_step)
    rows, mats = [], []
    for eps in eps_list:
        H1 = SumWithPotentialField(H, pot, eps, weighted=True, name=f"{H.name}+eps*w*g")
        H2 = SumWithPotentialField(Ht, pot, eps, name=f"{H.name}~+eps*g")
        L1 = linearize_transfer(H1, e, delta, fd_step)
        L2 = linearize_transfer(H2, 0.0, delta, fd_step)
        rows.append(ExperimentRow(float(eps), float(np.linalg.norm(L1.L - L2.L, 2)),
                                  float(np.linalg.norm(L1.L - L_H.L, 2)), L1.symplecticity, L2.symplecticity))
        mats.append((L1, L2))
    return ExperimentResult(rows, L_H, mats)


def _variables(pot):
    from .expr import variables

    return variables(pot.node)
