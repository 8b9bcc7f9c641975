"""Fibered symplectic maps of T*R^(1+d): vertical, homogeneous and composite.

Conventions
-----------
Momenta are row vectors.  A fibered map sends ``(q, p)`` to
``(phi(q), alpha(q) + p G(q))`` with ``G = (D phi)^-1``; ``G[i, j]`` is the
derivative of the new ``p_j`` with respect to the old ``p_i``.

* vertical map ``(q, p) -> (q, p + grad u(q))``;
* homogeneous map ``(q, p) -> (phi(q), p (D phi(q))^-1)``;
* composite map: factors stored in application order (the first factor acts
  first on the input point).

A Hamiltonian pulled back by ``psi`` is ``H o psi``.  Its derivatives are
pushed through the maps as jets: every closed-form factor provides first and
second derivatives of its action on phase space, so gradients and Hessians of
pullbacks through closed-form factors are analytic.  Flow-backed factors only
provide their base Jacobian; the momentum gradient and Hessian remain analytic
(the fiber action is affine), full derivatives fall back to finite
differences.
"""

from __future__ import annotations

from functools import cached_property

import numpy as np

from . import expr, fd, kernels
from .dynamics import reparametrized_flow
from .errors import (
    FlowBoxError,
    NormalFormError,
    RecipeError,
    SingularJacobianError,
    check_finite,
)
from .hamiltonian import HamiltonianField, as_points
from .splines import AxisSpline

NEWTON_TOL = 1e-13


def symplectic_matrix(m):
    J = np.zeros((2 * m, 2 * m))
    J[:m, m:] = np.eye(m)
    J[m:, :m] = -np.eye(m)
    return J


def _unique_rows(Q):
    uq, inv = np.unique(Q, axis=0, return_inverse=True)
    return uq, inv.reshape(-1)


def _spline_recipe(s):
    return {"t": s.t.tolist(), "values": s.values.tolist()}


def _spline_from(doc):
    return AxisSpline(np.asarray(doc["t"]), np.asarray(doc["values"]))


# ---------------------------------------------------------------- base maps

class BaseMap:
    """Diffeomorphism of configuration space with derivatives.

    ``derivs(Q, order)`` returns ``[phi, D phi, D2 phi, D3 phi][:order + 1]``
    with ``D phi[n, a, b] = d phi_a / d q_b`` and so on.  ``max_order`` is the
    highest order available.
    """

    max_order = 3
    kind = "base"
    identity = False

    def __init__(self, m):
        self.m = m

    def forward(self, Q):
        return self.derivs(Q, 0)[0]

    def jacobian(self, Q):
        return self.derivs(Q, 1)[1]

    def derivs(self, Q, order):
        raise NotImplementedError

    def inverse(self, Y):
        return self._newton_inverse(Y, self._inverse_seed(Y))

    def _inverse_seed(self, Y):
        return np.array(Y, dtype=float)

    def _newton_inverse(self, Y, Q, maxiter=50):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        Q = np.array(Q, dtype=float)
        for _ in range(maxiter):
            phi, D = self.derivs(Q, 1)
            r = phi - Y
            if np.max(np.abs(r)) <= NEWTON_TOL * (1.0 + np.max(np.abs(Y))):
                return Q
            try:
                Q = Q - np.linalg.solve(D, r[..., None])[..., 0]
            except np.linalg.LinAlgError as exc:
                raise SingularJacobianError(f"singular base Jacobian in {self.kind} inverse") from exc
        phi = self.forward(Q)
        err = float(np.max(np.abs(phi - Y)))
        if err > 1e-10 * (1.0 + np.max(np.abs(Y))):
            raise NormalFormError(f"Newton inverse of {self.kind} map did not converge (residual {err:.3g})")
        return Q

    def to_recipe(self):
        raise NotImplementedError


class IdentityBase(BaseMap):
    kind = "identity"
    identity = True

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        out = [Q.copy()]
        if order >= 1:
            out.append(np.broadcast_to(np.eye(m), (n, m, m)).copy())
        if order >= 2:
            out.append(np.zeros((n, m, m, m)))
        if order >= 3:
            out.append(np.zeros((n, m, m, m, m)))
        return out

    def inverse(self, Y):
        return np.array(np.atleast_2d(Y), dtype=float)

    def to_recipe(self):
        return {"base": "identity", "m": self.m}


class LinearBase(BaseMap):
    """phi(q) = M q + b with constant invertible M."""

    kind = "linear"

    def __init__(self, M, b=None):
        M = np.asarray(M, dtype=float)
        super().__init__(M.shape[0])
        self.M = M
        self.b = np.zeros(self.m) if b is None else np.asarray(b, dtype=float)
        self.identity = bool(np.array_equal(M, np.eye(self.m)) and not np.any(self.b))

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        out = [Q @ self.M.T + self.b]
        if order >= 1:
            out.append(np.broadcast_to(self.M, (n, m, m)).copy())
        if order >= 2:
            out.append(np.zeros((n, m, m, m)))
        if order >= 3:
            out.append(np.zeros((n, m, m, m, m)))
        return out

    def inverse(self, Y):
        return np.linalg.solve(self.M, (np.atleast_2d(Y) - self.b).T).T

    def to_recipe(self):
        return {"base": "linear", "M": self.M.tolist(), "b": self.b.tolist()}


class ExprBase(BaseMap):
    """Base map given by one expression per output component in ``q0..qd``."""

    kind = "expression"

    def __init__(self, components, d):
        super().__init__(d + 1)
        self.d = d
        self.nodes = [expr.parse(c, d=d) if isinstance(c, str) else c for c in components]
        if len(self.nodes) != self.m:
            raise ValueError(f"expected {self.m} components, got {len(self.nodes)}")
        self._names = [f"q{i}" for i in range(self.m)]
        self._index = {n: i for i, n in enumerate(self._names)}
        self.identity = all(
            isinstance(n, expr.Var) and n.name == f"q{i}" for i, n in enumerate(self.nodes)
        )

    @cached_property
    def _programs(self):
        m, names = self.m, self._names
        levels = [list(self.nodes)]
        for _ in range(3):
            levels.append([expr.diff(node, v) for node in levels[-1] for v in names])
        return [expr.compile_many(lv, self._index) for lv in levels]

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        out = []
        for k in range(order + 1):
            vals = check_finite(kernels.evaluate(self._programs[k], Q), Q, "base map")
            out.append(vals.reshape((n,) + (m,) * (k + 1)))
        return out

    def to_recipe(self):
        return {"base": "expression", "d": self.d, "components": [expr.to_string(n) for n in self.nodes]}


class FrameBase(BaseMap):
    """Straightening frame phi(q) = Q(q0) + N q*.

    ``Q`` is a spline of the orbit positions, ``N`` a constant (m, d) matrix
    whose columns complete the initial velocity to a basis.  The base map
    sends the axis point t e0 to the orbit point Q(t).
    """

    kind = "frame"

    def __init__(self, curve: AxisSpline, N):
        self.curve = curve
        self.N = np.asarray(N, dtype=float)
        super().__init__(self.N.shape[0])

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        c = self.curve.derivatives(Q[:, 0], order)
        out = [c[0] + Q[:, 1:] @ self.N.T]
        if order >= 1:
            D = np.empty((n, m, m))
            D[:, :, 0] = c[1]
            D[:, :, 1:] = self.N
            out.append(D)
        if order >= 2:
            D2 = np.zeros((n, m, m, m))
            D2[:, :, 0, 0] = c[2]
            out.append(D2)
        if order >= 3:
            D3 = np.zeros((n, m, m, m, m))
            D3[:, :, 0, 0, 0] = c[3]
            out.append(D3)
        return out

    def _inverse_seed(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        nodes = self.curve.values
        k = np.argmin(((Y[:, None, :] - nodes[None, :, :]) ** 2).sum(-1), axis=1)
        t0 = self.curve.t[k]
        qs = (Y - nodes[k]) @ self.N
        return np.concatenate([t0[:, None], qs], axis=1)

    def to_recipe(self):
        return {"base": "frame", "curve": _spline_recipe(self.curve), "N": self.N.tolist()}


class ShearBase(BaseMap):
    """phi(q0, q*) = (q0 - l(q0) . q*, q*); the fiber action is p* -> p* + p0 l."""

    kind = "shear"

    def __init__(self, l: AxisSpline):
        self.l = l
        super().__init__(l.shape[0] + 1)

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        qs = Q[:, 1:]
        L = self.l.derivatives(Q[:, 0], order)
        phi = Q.copy()
        phi[:, 0] = Q[:, 0] - (L[0] * qs).sum(axis=1)
        out = [phi]
        if order >= 1:
            D = np.broadcast_to(np.eye(m), (n, m, m)).copy()
            D[:, 0, 0] = 1.0 - (L[1] * qs).sum(axis=1)
            D[:, 0, 1:] = -L[0]
            out.append(D)
        if order >= 2:
            D2 = np.zeros((n, m, m, m))
            D2[:, 0, 0, 0] = -(L[2] * qs).sum(axis=1)
            D2[:, 0, 0, 1:] = -L[1]
            D2[:, 0, 1:, 0] = -L[1]
            out.append(D2)
        if order >= 3:
            D3 = np.zeros((n, m, m, m, m))
            D3[:, 0, 0, 0, 0] = -(L[3] * qs).sum(axis=1)
            D3[:, 0, 0, 0, 1:] = -L[2]
            D3[:, 0, 0, 1:, 0] = -L[2]
            D3[:, 0, 1:, 0, 0] = -L[2]
            out.append(D3)
        return out

    def inverse(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        ys = Y[:, 1:]
        q0 = Y[:, 0].copy()
        for _ in range(50):
            L = self.l.derivatives(q0, 1)
            r = q0 - (L[0] * ys).sum(axis=1) - Y[:, 0]
            if np.max(np.abs(r)) <= NEWTON_TOL * (1.0 + np.max(np.abs(Y))):
                break
            q0 = q0 - r / (1.0 - (L[1] * ys).sum(axis=1))
        return np.concatenate([q0[:, None], ys], axis=1)

    def to_recipe(self):
        return {"base": "shear", "l": _spline_recipe(self.l)}


class AxisLinearBase(BaseMap):
    """phi(q0, q*) = (q0, M(q0) q*) with an invertible matrix path M."""

    kind = "axis-linear"

    def __init__(self, M: AxisSpline):
        self.M = M
        super().__init__(M.shape[0] + 1)

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        qs = Q[:, 1:]
        Ms = self.M.derivatives(Q[:, 0], order)
        Mq = [(Mk @ qs[:, :, None])[:, :, 0] for Mk in Ms]
        phi = np.empty_like(Q)
        phi[:, 0] = Q[:, 0]
        phi[:, 1:] = Mq[0]
        out = [phi]
        if order >= 1:
            D = np.zeros((n, m, m))
            D[:, 0, 0] = 1.0
            D[:, 1:, 0] = Mq[1]
            D[:, 1:, 1:] = Ms[0]
            out.append(D)
        if order >= 2:
            D2 = np.zeros((n, m, m, m))
            D2[:, 1:, 0, 0] = Mq[2]
            D2[:, 1:, 0, 1:] = Ms[1]
            D2[:, 1:, 1:, 0] = Ms[1]
            out.append(D2)
        if order >= 3:
            D3 = np.zeros((n, m, m, m, m))
            D3[:, 1:, 0, 0, 0] = Mq[3]
            D3[:, 1:, 0, 0, 1:] = Ms[2]
            D3[:, 1:, 0, 1:, 0] = Ms[2]
            D3[:, 1:, 1:, 0, 0] = Ms[2]
            out.append(D3)
        return out

    def inverse(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        M = self.M(Y[:, 0])
        qs = np.linalg.solve(M, Y[:, 1:, None])[..., 0]
        return np.concatenate([Y[:, :1], qs], axis=1)

    def to_recipe(self):
        return {"base": "axis-linear", "M": _spline_recipe(self.M)}


class FlowBoxBase(BaseMap):
    """Flow-box coordinates phi(q0, q*) = Phi^{q0}(0, q*) for W = V / V0.

    ``V(q) = dH/dp(q, P_level)`` for the generating Hamiltonian, which must
    have analytic gradient and Hessian.  The flow is computed with a fixed
    number of RK4 steps; the base Jacobian comes from the variational
    equations (exact derivative of the discrete map).  Second and higher
    derivatives are not provided.
    """

    kind = "flow-box"
    max_order = 1

    def __init__(self, H, P_level, steps=64, margin=None, tube=None):
        self.H = H
        self.P_level = np.asarray(P_level, dtype=float)
        super().__init__(H.m)
        self.steps = steps
        m = self.m
        if margin is None:
            v_ref = self._V(np.zeros((1, m)))
            margin = 0.1 * float(v_ref[0, 0])
        if not margin > 0:
            raise FlowBoxError("flow box not applicable here: V0 <= 0 on the axis")
        self.margin = margin
        self.flow_map = reparametrized_flow(self._V, margin=margin, steps=steps, VDV=self._VDV)
        self.identity = False
        if tube is not None:
            v = self._V(tube)
            if np.any(~(v[:, 0] > margin)):
                i = int(np.flatnonzero(~(v[:, 0] > margin))[0])
                raise FlowBoxError(
                    f"flow box not applicable here: V0 = {v[i, 0]:.3g} below margin {margin:.3g} "
                    f"at q = {np.array2string(tube[i], precision=6)}"
                )
            w_star = v[:, 1:] / v[:, :1]
            if np.max(np.abs(w_star)) < 1e-14:
                _, A = self._VDV(tube)
                if np.max(np.abs(A[:, 1:, :])) < 1e-13:
                    self.identity = True

    def _points(self, Q):
        P = np.broadcast_to(self.P_level, Q.shape)
        return np.concatenate([Q, P], axis=1)

    def _V(self, Q):
        return self.H.grad_p(self._points(np.atleast_2d(Q)))

    def _VDV(self, Q):
        m = self.m
        g, Hs = self.H.gradient_and_hessian(self._points(np.atleast_2d(Q)))
        return g[:, m:], Hs[:, m:, :m]

    def derivs(self, Q, order):
        if order > 1:
            raise NotImplementedError("flow-box base maps provide first derivatives only")
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if self.identity:
            return IdentityBase(self.m).derivs(Q, order)
        uq, inv = _unique_rows(Q)
        start = uq.copy()
        start[:, 0] = 0.0
        if order == 0:
            x = self.flow_map.flow(start, uq[:, 0])
            x[:, 0] = uq[:, 0]
            return [x[inv]]
        x, Y, z = self.flow_map.flow_with_jacobian(start, uq[:, 0])
        x[:, 0] = uq[:, 0]
        D = np.empty_like(Y)
        D[:, :, 0] = z
        D[:, :, 1:] = Y[:, :, 1:]
        D[:, 0, :] = 0.0
        D[:, 0, 0] = 1.0
        return [x[inv], D[inv]]

    def inverse(self, Y):
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if self.identity:
            return Y.copy()
        uq, inv = _unique_rows(Y)
        back = self.flow_map.flow(uq, -uq[:, 0])
        seed = back.copy()
        seed[:, 0] = uq[:, 0]
        return self._newton_inverse(uq, seed, maxiter=8)[inv]

    def to_recipe(self):
        return {"base": "flow-box", "P_level": self.P_level.tolist(), "steps": self.steps,
                "margin": self.margin}


# ---------------------------------------------------------------- potentials

class Potential:
    """Scalar function of q with ``derivs(Q, order) -> [u, grad, hess, third]``."""

    kind = "potential"
    zero = False

    def __init__(self, m):
        self.m = m

    def derivs(self, Q, order):
        raise NotImplementedError

    def to_recipe(self):
        raise NotImplementedError


class ExprPotential(Potential):
    kind = "expression"

    def __init__(self, node, d):
        super().__init__(d + 1)
        self.d = d
        self.node = expr.parse(node, d=d) if isinstance(node, str) else node
        bad = {v for v in expr.variables(self.node) if v.startswith("p")}
        if bad:
            raise ValueError(f"potential may depend on q only, found {sorted(bad)}")
        self.zero = isinstance(self.node, expr.Num) and self.node.value == 0.0

    @cached_property
    def _programs(self):
        names = [f"q{i}" for i in range(self.m)]
        index = {n: i for i, n in enumerate(names)}
        levels = [[self.node]]
        for _ in range(3):
            levels.append([expr.diff(node, v) for node in levels[-1] for v in names])
        return [expr.compile_many(lv, index) for lv in levels]

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        out = []
        for k in range(order + 1):
            vals = check_finite(kernels.evaluate(self._programs[k], Q), Q, "potential")
            out.append(vals.reshape((n,) + (m,) * k))
        return out

    def to_recipe(self):
        return {"potential": "expression", "d": self.d, "text": expr.to_string(self.node)}


class AxisAffinePotential(Potential):
    """u(q0, q*) = v(q0) + c(q0) . q*, with v the antiderivative of a spline."""

    kind = "axis-affine"

    def __init__(self, dv: AxisSpline, c: AxisSpline):
        self.dv = dv
        self.v = dv.antiderivative()
        self.c = c
        super().__init__(c.shape[0] + 1)
        self.zero = not (np.any(dv.values) or np.any(c.values))

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        qs = Q[:, 1:]
        V = self.v.derivatives(Q[:, 0], order)
        C = self.c.derivatives(Q[:, 0], order)
        cq = [(Ck * qs).sum(axis=1) for Ck in C]
        out = [V[0] + cq[0]]
        if order >= 1:
            g = np.empty((n, m))
            g[:, 0] = V[1] + cq[1]
            g[:, 1:] = C[0]
            out.append(g)
        if order >= 2:
            h = np.zeros((n, m, m))
            h[:, 0, 0] = V[2] + cq[2]
            h[:, 0, 1:] = C[1]
            h[:, 1:, 0] = C[1]
            out.append(h)
        if order >= 3:
            t = np.zeros((n, m, m, m))
            t[:, 0, 0, 0] = V[3] + cq[3]
            t[:, 0, 0, 1:] = C[2]
            t[:, 0, 1:, 0] = C[2]
            t[:, 1:, 0, 0] = C[2]
            out.append(t)
        return out

    def to_recipe(self):
        return {"potential": "axis-affine", "dv": _spline_recipe(self.dv), "c": _spline_recipe(self.c)}


class AxisQuadraticPotential(Potential):
    """u(q0, q*) = q*^T S(q0) q* / 2 with a symmetric matrix path S."""

    kind = "axis-quadratic"

    def __init__(self, S: AxisSpline):
        self.S = S
        super().__init__(S.shape[0] + 1)
        self.zero = not np.any(S.values)

    def derivs(self, Q, order):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        n, m = Q.shape
        qs = Q[:, 1:]
        Ss = self.S.derivatives(Q[:, 0], order)
        Sq = [(Sk @ qs[:, :, None])[:, :, 0] for Sk in Ss]
        qSq = [0.5 * (qs * v).sum(axis=1) for v in Sq]
        out = [qSq[0]]
        if order >= 1:
            g = np.empty((n, m))
            g[:, 0] = qSq[1]
            g[:, 1:] = Sq[0]
            out.append(g)
        if order >= 2:
            h = np.zeros((n, m, m))
            h[:, 0, 0] = qSq[2]
            h[:, 0, 1:] = Sq[1]
            h[:, 1:, 0] = Sq[1]
            h[:, 1:, 1:] = Ss[0]
            out.append(h)
        if order >= 3:
            t = np.zeros((n, m, m, m))
            t[:, 0, 0, 0] = qSq[3]
            t[:, 0, 0, 1:] = Sq[2]
            t[:, 0, 1:, 0] = Sq[2]
            t[:, 1:, 0, 0] = Sq[2]
            t[:, 0, 1:, 1:] = Ss[1]
            t[:, 1:, 0, 1:] = Ss[1]
            t[:, 1:, 1:, 0] = Ss[1]
            out.append(t)
        return out

    def to_recipe(self):
        return {"potential": "axis-quadratic", "S": _spline_recipe(self.S)}


# ---------------------------------------------------------------- fibered maps

class FiberedMap:
    """Fibered symplectic map of T*R^m.

    ``jet_order`` is the highest derivative order :meth:`jet` supports.
    """

    kind = "fibered"
    jet_order = 2
    label = None

    def __init__(self, m):
        self.m = m
        self.width = 2 * m

    @property
    def is_identity(self):
        return False

    @property
    def factors(self):
        return [self]

    def apply(self, X):
        raise NotImplementedError

    def inverse(self, X):
        raise NotImplementedError

    def fiber(self, X):
        """Image points and the momentum Jacobian ``G`` (n, m, m)."""
        raise NotImplementedError

    def jet(self, X, order):
        """Image, Jacobian (n, 2m, 2m) and second derivatives (n, 2m, 2m, 2m)."""
        raise NotImplementedError

    def base_forward(self, Q):
        X = np.concatenate([Q, np.zeros_like(Q)], axis=1)
        return self.apply(X)[:, :self.m]

    def to_recipe(self):
        raise NotImplementedError


class VerticalMap(FiberedMap):
    """(q, p) -> (q, p + grad u(q))."""

    kind = "vertical"

    def __init__(self, potential: Potential, label=None):
        super().__init__(potential.m)
        self.potential = potential
        self.label = label

    @property
    def is_identity(self):
        return self.potential.zero

    def apply(self, X):
        X = as_points(X, self.width)
        m = self.m
        g = self.potential.derivs(X[:, :m], 1)[1]
        Y = X.copy()
        Y[:, m:] += g
        return Y

    def inverse(self, X):
        X = as_points(X, self.width)
        m = self.m
        g = self.potential.derivs(X[:, :m], 1)[1]
        Y = X.copy()
        Y[:, m:] -= g
        return Y

    def fiber(self, X):
        Y = self.apply(X)
        n = Y.shape[0]
        return Y, np.broadcast_to(np.eye(self.m), (n, self.m, self.m)).copy()

    def jet(self, X, order):
        X = as_points(X, self.width)
        m, w = self.m, self.width
        n = X.shape[0]
        U = self.potential.derivs(X[:, :m], order + 1)
        Y = X.copy()
        Y[:, m:] += U[1]
        if order == 0:
            return Y, None, None
        J = np.broadcast_to(np.eye(w), (n, w, w)).copy()
        J[:, m:, :m] = U[2]
        if order == 1:
            return Y, J, None
        T = np.zeros((n, w, w, w))
        T[:, m:, :m, :m] = U[3]
        return Y, J, T

    def to_recipe(self):
        return {"kind": "vertical", "label": self.label, **self.potential.to_recipe()}


class HomogeneousMap(FiberedMap):
    """Cotangent lift (q, p) -> (phi(q), p (D phi(q))^-1) of a base map."""

    kind = "homogeneous"

    def __init__(self, base: BaseMap, label=None):
        super().__init__(base.m)
        self.base = base
        self.label = label
        self.jet_order = max(base.max_order - 1, 0)

    @property
    def is_identity(self):
        return self.base.identity

    def fiber(self, X):
        X = as_points(X, self.width)
        m = self.m
        phi, D = self.base.derivs(X[:, :m], 1)
        G = _inv(D, X)
        Y = np.empty_like(X)
        Y[:, :m] = phi
        Y[:, m:] = (X[:, m:][:, None, :] @ G)[:, 0]
        return Y, G

    def apply(self, X):
        return self.fiber(X)[0]

    def inverse(self, X):
        X = as_points(X, self.width)
        m = self.m
        q = self.base.inverse(X[:, :m])
        D = self.base.jacobian(q)
        Y = np.empty_like(X)
        Y[:, :m] = q
        Y[:, m:] = (X[:, m:][:, None, :] @ D)[:, 0]
        return Y

    def jet(self, X, order):
        if order > self.jet_order:
            raise NotImplementedError(f"{self.base.kind} lift supports jets up to order {self.jet_order}")
        X = as_points(X, self.width)
        m, w = self.m, self.width
        n = X.shape[0]
        p = X[:, m:]
        Ds = self.base.derivs(X[:, :m], order + 1)
        G = _inv(Ds[1], X)
        Y = np.empty_like(X)
        Y[:, :m] = Ds[0]
        Y[:, m:] = (p[:, None, :] @ G)[:, 0]
        if order == 0:
            return Y, None, None
        D2 = Ds[2]
        # D2[n, a, b, c] = d2 phi_a / dq_b dq_c; move c to the front for batched products
        D2c = np.moveaxis(D2, 3, 1)  # [n, c, a, b]
        Gb = G[:, None]
        dGc = -(Gb @ D2c @ Gb)  # [n, c, i, j]
        dG = np.moveaxis(dGc, 1, 3)  # [n, i, j, c]
        J = np.zeros((n, w, w))
        J[:, :m, :m] = Ds[1]
        J[:, m:, :m] = np.moveaxis((p[:, None, None, :] @ dGc)[:, :, 0, :], 1, 2)
        J[:, m:, m:] = np.swapaxes(G, 1, 2)
        if order == 1:
            return Y, J, None
        D3 = Ds[3]
        # [n, c, e, a, b] layouts
        D3ce = np.moveaxis(D3, (3, 4), (1, 2))
        d2Gce = -(dGc[:, None] @ D2c[:, :, None] @ G[:, None, None]
                  + G[:, None, None] @ D3ce @ G[:, None, None]
                  + G[:, None, None] @ D2c[:, :, None] @ dGc[:, None])
        T = np.zeros((n, w, w, w))
        T[:, :m, :m, :m] = D2
        pd2 = (p[:, None, None, None, :] @ d2Gce)[:, :, :, 0, :]  # [n, c, e, j]
        T[:, m:, :m, :m] = np.moveaxis(pd2, 3, 1)
        mixed = np.transpose(dG, (0, 2, 3, 1))  # [n, j, c, i]
        T[:, m:, :m, m:] = mixed
        T[:, m:, m:, :m] = np.swapaxes(mixed, 2, 3)
        return Y, J, T

    def to_recipe(self):
        return {"kind": "homogeneous", "label": self.label, **self.base.to_recipe()}


def _inv(D, X):
    try:
        return np.linalg.inv(D)
    except np.linalg.LinAlgError as exc:
        det = np.linalg.det(D)
        i = int(np.argmin(np.abs(det)))
        raise SingularJacobianError(
            f"singular base Jacobian at q = {np.array2string(X[i, :D.shape[1]], precision=6)}"
        ) from exc


class CompositeMap(FiberedMap):
    """Composition of fibered maps; ``factors`` are in application order."""

    kind = "composite"

    def __init__(self, factors, m=None, label=None):
        flat = []
        for f in factors:
            flat.extend(f.factors)
        if m is None:
            if not flat:
                raise ValueError("empty composite needs an explicit dimension")
            m = flat[0].m
        super().__init__(m)
        if any(f.m != m for f in flat):
            raise ValueError("factor dimensions differ")
        self._factors = tuple(flat)
        self.label = label
        self.jet_order = min((f.jet_order for f in flat), default=2)

    @property
    def factors(self):
        return list(self._factors)

    @property
    def is_identity(self):
        return all(f.is_identity for f in self._factors)

    def apply(self, X):
        Y = as_points(X, self.width).copy()
        for f in self._factors:
            Y = f.apply(Y)
        return Y

    def inverse(self, X):
        Y = as_points(X, self.width).copy()
        for f in reversed(self._factors):
            Y = f.inverse(Y)
        return Y

    def fiber(self, X):
        Y = as_points(X, self.width).copy()
        n = Y.shape[0]
        G = np.broadcast_to(np.eye(self.m), (n, self.m, self.m)).copy()
        for f in self._factors:
            Y, Gf = f.fiber(Y)
            G = G @ Gf
        return Y, G

    def jet(self, X, order):
        Y = as_points(X, self.width).copy()
        n, w = Y.shape
        J = np.broadcast_to(np.eye(w), (n, w, w)).copy() if order >= 1 else None
        T = np.zeros((n, w, w, w)) if order >= 2 else None
        for f in self._factors:
            Y2, Jf, Tf = f.jet(Y, order)
            if order >= 2:
                JfT = (Jf @ T.reshape(n, w, w * w)).reshape(n, w, w, w)
                Jb = J[:, None]
                T = JfT + np.swapaxes(Jb, 2, 3) @ Tf @ Jb
            if order >= 1:
                J = Jf @ J
            Y = Y2
        return Y, J, T

    def to_recipe(self):
        return {"kind": "composite", "factors": [f.to_recipe() for f in self._factors]}


def identity_map(m):
    return CompositeMap([], m=m)


def vertical_map(u, d=None, label=None):
    """Vertical map of a potential (a Potential or an expression in q)."""
    if not isinstance(u, Potential):
        if d is None:
            raise ValueError("d is required for expression potentials")
        u = ExprPotential(u, d)
    return VerticalMap(u, label=label)


def homogeneous_map(phi, d=None, label=None):
    """Cotangent lift of a base map (a BaseMap or a list of component expressions)."""
    if not isinstance(phi, BaseMap):
        if d is None:
            raise ValueError("d is required for expression base maps")
        phi = ExprBase(phi, d)
    return HomogeneousMap(phi, label=label)


def compose(*maps):
    """Composite applying ``maps[0]`` first."""
    return CompositeMap(maps)


def apply(psi, x):
    X = as_points(x, psi.width)
    Y = psi.apply(X)
    return Y[0] if np.ndim(x) <= 1 else Y


def inverse_apply(psi, x):
    X = as_points(x, psi.width)
    Y = psi.inverse(X)
    return Y[0] if np.ndim(x) <= 1 else Y


# ---------------------------------------------------------------- checks

def full_jacobian_fd(psi, X, stencil=fd.DEFAULT_STENCIL):
    return fd.jacobian(psi.apply, as_points(X, psi.width), stencil, what=f"{psi.kind} map")


def symplecticity_residuals(psi, X, stencil=fd.DEFAULT_STENCIL):
    """Spectral norm of D psi^T J D psi - J at each point (finite-difference Jacobian)."""
    D = full_jacobian_fd(psi, X, stencil)
    J = symplectic_matrix(psi.m)
    R = np.einsum("nab,ac,ncd->nbd", D, J, D) - J
    return np.linalg.norm(R, ord=2, axis=(1, 2))


def check_symplectic(psi, points, stencil=fd.DEFAULT_STENCIL):
    """Maximum symplecticity residual over the sample points."""
    return float(np.max(symplecticity_residuals(psi, points, stencil)))


def is_admissible(psi, delta, grid=11, tol=1e-9):
    """Whether the base map fixes t e0 for t in [0, delta]; returns (flag, deviation)."""
    t = np.linspace(0.0, delta, grid)
    Q = np.zeros((grid, psi.m))
    Q[:, 0] = t
    dev = float(np.max(np.abs(psi.base_forward(Q) - Q)))
    return dev < tol, dev


# ---------------------------------------------------------------- pullback

class PullbackField(HamiltonianField):
    """The Hamiltonian ``H o psi`` for a fibered map ``psi``."""

    kind = "transformed"

    def __init__(self, root, psi, name=None):
        super().__init__(root.d, name=name or (f"{root.name}*" if root.name else None),
                         stencil=root.stencil)
        if psi.m != root.m:
            raise ValueError("map and Hamiltonian dimensions differ")
        self.root = root
        self.psi = psi
        self.analytic_order = min(root.analytic_order, psi.jet_order)

    def value(self, X):
        X = as_points(X, self.width)
        return check_finite(self.root.value(self.psi.apply(X)), X, self._what())

    def gradient(self, X):
        if self.analytic_order < 1:
            return super().gradient(X)
        X = as_points(X, self.width)
        Y, J, _ = self.psi.jet(X, 1)
        return (self.root.gradient(Y)[:, None, :] @ J)[:, 0]

    def hessian(self, X):
        if self.analytic_order < 2:
            return super().hessian(X)
        return self.gradient_and_hessian(X)[1]

    def gradient_and_hessian(self, X):
        X = as_points(X, self.width)
        if self.analytic_order < 2:
            return self.gradient(X), self.hessian(X)
        Y, J, T = self.psi.jet(X, 2)
        g = self.root.gradient(Y)
        Hr = self.root.hessian(Y)
        grad = (g[:, None, :] @ J)[:, 0]
        hess = np.swapaxes(J, 1, 2) @ Hr @ J + (g[:, None, :] @ T.reshape(len(g), g.shape[1], -1)).reshape(Hr.shape)
        return grad, 0.5 * (hess + np.swapaxes(hess, 1, 2))

    def grad_p(self, X):
        X = as_points(X, self.width)
        Y, G = self.psi.fiber(X)
        return (G @ self.root.grad_p(Y)[:, :, None])[:, :, 0]

    def hess_pp(self, X):
        X = as_points(X, self.width)
        Y, G = self.psi.fiber(X)
        return G @ self.root.hess_pp(Y) @ np.swapaxes(G, 1, 2)


def pullback(H, psi, name=None):
    """``H o psi`` as a transformed field; nested pullbacks are flattened."""
    if isinstance(H, PullbackField):
        return PullbackField(H.root, CompositeMap([psi, H.psi], m=H.m), name=name or H.name)
    return PullbackField(H, psi, name=name)


# ---------------------------------------------------------------- recipes

def base_from_recipe(doc):
    kind = doc.get("base")
    if kind == "identity":
        return IdentityBase(int(doc["m"]))
    if kind == "linear":
        return LinearBase(doc["M"], doc.get("b"))
    if kind == "expression":
        return ExprBase(doc["components"], int(doc["d"]))
    if kind == "frame":
        return FrameBase(_spline_from(doc["curve"]), doc["N"])
    if kind == "shear":
        return ShearBase(_spline_from(doc["l"]))
    if kind == "axis-linear":
        return AxisLinearBase(_spline_from(doc["M"]))
    raise RecipeError(f"unknown base map kind {kind!r}")


def potential_from_recipe(doc):
    kind = doc.get("potential")
    if kind == "expression":
        return ExprPotential(doc["text"], int(doc["d"]))
    if kind == "axis-affine":
        return AxisAffinePotential(_spline_from(doc["dv"]), _spline_from(doc["c"]))
    if kind == "axis-quadratic":
        return AxisQuadraticPotential(_spline_from(doc["S"]))
    raise RecipeError(f"unknown potential kind {kind!r}")


def map_from_recipe(doc, root=None):
    """Rebuild a fibered map from its recipe.

    Flow-box factors are regenerated from ``root`` pulled back through the
    factors applied after them, so ``root`` is required when the recipe
    contains one.
    """
    kind = doc.get("kind")
    if kind == "vertical":
        return VerticalMap(potential_from_recipe(doc), label=doc.get("label"))
    if kind == "homogeneous" and doc.get("base") != "flow-box":
        return HomogeneousMap(base_from_recipe(doc), label=doc.get("label"))
    if kind == "homogeneous":
        raise RecipeError("a flow-box factor can only be rebuilt inside a composite recipe")
    if kind != "composite":
        raise RecipeError(f"unknown map kind {kind!r}")
    docs = doc["factors"]
    built = [None] * len(docs)
    for i in range(len(docs) - 1, -1, -1):
        fdoc = docs[i]
        if fdoc.get("kind") == "homogeneous" and fdoc.get("base") == "flow-box":
            if root is None:
                raise RecipeError("recipe contains a flow-box factor; the Hamiltonian is required")
            gen = pullback(root, CompositeMap(built[i + 1:], m=root.m))
            base = FlowBoxBase(gen, fdoc["P_level"], steps=int(fdoc["steps"]), margin=float(fdoc["margin"]))
            built[i] = HomogeneousMap(base, label=fdoc.get("label"))
        else:
            built[i] = map_from_recipe(fdoc)
    m = root.m if root is not None else (built[0].m if built else None)
    if m is None:
        raise RecipeError("empty recipe without a Hamiltonian has no dimension")
    return CompositeMap(built, m=m)
