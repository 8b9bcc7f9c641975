"""Hamiltonians on T*R^(1+d) and their derivative oracles.

A phase point is stored as a flat vector ``x = (q0..qd, p0..pd)`` of width
``2m`` with ``m = 1 + d``; batches of points are arrays of shape (n, 2m).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import expr, fd, kernels
from .errors import ConvexityError, DerivativeOrderError, DimensionMismatchError, check_finite


@dataclass(frozen=True)
class PhaseState:
    """A point (q, p) of phase space with q = (q0, q*) and p = (p0, p*)."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if q.shape != p.shape:
            raise ValueError(f"q has length {q.size} but p has length {p.size}")
        if q.size < 2:
            raise ValueError("phase space needs d >= 1 (q and p of length >= 2)")
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def d(self):
        return self.q.size - 1

    def to_array(self):
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        m = x.size // 2
        return cls(x[:m], x[m:])


def as_points(x, width=None):
    """Coerce a PhaseState, flat vector or batch to a float array (n, width)."""
    if isinstance(x, PhaseState):
        x = x.to_array()
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if width is not None and X.shape[1] != width:
        raise DimensionMismatchError(f"points have width {X.shape[1]}, expected {width}")
    return X


def variable_index(name, d):
    """Map a variable name (``'q1'``, ``'p0'``) or integer to its column."""
    if isinstance(name, (int, np.integer)):
        return int(name)
    idx = expr.phase_var_index(d)
    if name not in idx:
        raise DimensionMismatchError(f"unknown variable {name!r} for d={d}")
    return idx[name]


class HamiltonianField:
    """Evaluable Hamiltonian with derivative oracles.

    Subclasses implement :meth:`value`.  ``analytic_order`` tells how many
    derivative orders are available without finite differences; missing orders
    are estimated by central differences of the highest analytic order.
    """

    kind = "closed-form"
    analytic_order = 0

    def __init__(self, d, name=None, stencil=fd.DEFAULT_STENCIL):
        if d < 1:
            raise ValueError("d must be at least 1")
        self.d = int(d)
        self.m = self.d + 1
        self.width = 2 * self.m
        self.name = name
        self.stencil = stencil

    def __call__(self, q, p=None):
        X = as_points(q if p is None else np.concatenate([np.ravel(q), np.ravel(p)]), self.width)
        v = self.value(X)
        return float(v[0]) if v.shape[0] == 1 and np.ndim(q) <= 1 else v

    def value(self, X):
        raise NotImplementedError

    def gradient(self, X):
        X = as_points(X, self.width)
        return fd.gradient(self.value, X, self.stencil, what=self._what())

    def hessian(self, X):
        X = as_points(X, self.width)
        if self.analytic_order >= 1:
            Hs = fd.jacobian(self.gradient, X, self.stencil, what=self._what())
            return 0.5 * (Hs + np.swapaxes(Hs, 1, 2))
        return fd.hessian(self.value, X, self.stencil, what=self._what())

    def gradient_and_hessian(self, X):
        return self.gradient(X), self.hessian(X)

    def grad_p(self, X):
        return self.gradient(X)[:, self.m:]

    def hess_pp(self, X):
        return self.hessian(X)[:, self.m:, self.m:]

    def _what(self):
        return f"Hamiltonian {self.name or self.kind}"


class ExpressionField(HamiltonianField):
    """Closed-form Hamiltonian parsed from the expression language.

    Symbolic derivatives up to order 3 are built lazily and compiled to
    bytecode for the evaluation kernels.
    """

    kind = "closed-form"
    analytic_order = 3

    def __init__(self, node, d, params=None, name=None, text=None, stencil=fd.DEFAULT_STENCIL):
        super().__init__(d, name=name, stencil=stencil)
        self.node = node
        self.params = dict(params or {})
        self.source = text if text is not None else expr.to_string(node)
        self._names = expr.phase_var_names(self.d)
        self._index = expr.phase_var_index(self.d)
        self._partial_programs = {}

    @property
    def text(self):
        return expr.to_string(self.node)

    def _compile(self, nodes):
        return expr.compile_many(nodes, self._index)

    @cached_property
    def gradient_nodes(self):
        return [expr.diff(self.node, v) for v in self._names]

    @cached_property
    def _value_program(self):
        return self._compile([self.node])

    @cached_property
    def gradient_program(self):
        return self._compile(self.gradient_nodes)

    @cached_property
    def _hessian_program(self):
        nodes = []
        for i in range(self.width):
            for j in range(i, self.width):
                nodes.append(expr.diff(self.gradient_nodes[i], self._names[j]))
        return self._compile(nodes)

    def _eval(self, program, X, what):
        X = as_points(X, self.width)
        out = kernels.evaluate(program, X)
        return check_finite(out, X, what)

    def value(self, X):
        return self._eval(self._value_program, X, self._what())[:, 0]

    def gradient(self, X):
        return self._eval(self.gradient_program, X, f"gradient of {self._what()}")

    def hessian(self, X):
        flat = self._eval(self._hessian_program, X, f"Hessian of {self._what()}")
        iu = np.triu_indices(self.width)
        H = np.empty((flat.shape[0], self.width, self.width))
        H[:, iu[0], iu[1]] = flat
        H[:, iu[1], iu[0]] = flat
        return H

    def symbolic_partial(self, index, X):
        """Exact mixed partial for a tuple of variable indices (order <= 3)."""
        index = tuple(sorted(index))
        if len(index) > 3:
            raise DerivativeOrderError(f"derivative order {len(index)} exceeds supported order 3")
        if index not in self._partial_programs:
            node = expr.diff_multi(self.node, [self._names[i] for i in index])
            self._partial_programs[index] = self._compile([node])
        return self._eval(self._partial_programs[index], X, self._what())[:, 0]


def parse_hamiltonian(text, d, params=None, name=None):
    """Parse an expression over ``q0..qd, p0..pd`` into a closed-form field."""
    node = expr.parse(text, d=d, params=params)
    return ExpressionField(node, d, params=params, name=name, text=text)


def partial(H, order, x, stencil=None):
    """Mixed partial derivative of ``H`` at ``x``.

    Parameters
    ----------
    order : sequence
        Variables to differentiate by, as names (``('q1', 'p0')``) or column
        indices; at most three entries.
    x : PhaseState or array_like
        One point or a batch.

    Closed-form fields return the exact symbolic value; other kinds use
    central differences with Richardson extrapolation.
    """
    index = tuple(variable_index(v, H.d) for v in order)
    if len(index) > 3:
        raise DerivativeOrderError(f"derivative order {len(index)} exceeds supported order 3")
    X = as_points(x, H.width)
    if isinstance(H, ExpressionField):
        out = H.symbolic_partial(index, X)
    else:
        out = fd.partials(H.value, X, [index], stencil or H.stencil, what=H._what())[:, 0]
    return float(out[0]) if np.ndim(x) <= 1 or isinstance(x, PhaseState) else out


def hessian_pp(H, q, p=None, stencil=None):
    """Symmetrised momentum Hessian at (q, p) and its smallest eigenvalue.

    ``p`` defaults to the zero covector.
    """
    q = np.asarray(q, dtype=float).reshape(-1)
    p = np.zeros(H.m) if p is None else np.asarray(p, dtype=float).reshape(-1)
    X = np.concatenate([q, p])[None, :]
    if stencil is not None:
        M = fd.hessian(H.value, X, stencil, what=H._what(), variables=range(H.m, H.width))[0]
    else:
        M = H.hess_pp(X)[0]
    check_finite(M, X[0], "momentum Hessian")
    M = 0.5 * (M + M.T)
    return M, float(np.linalg.eigvalsh(M)[0])


def convexity_margin(H, X):
    """Smallest eigenvalue of the momentum Hessian over a batch of points."""
    X = as_points(X, H.width)
    Hpp = H.hess_pp(X)
    Hpp = 0.5 * (Hpp + np.swapaxes(Hpp, 1, 2))
    return float(np.linalg.eigvalsh(Hpp)[:, 0].min())


def require_convex(H, X, margin=0.0):
    lam = convexity_margin(H, X)
    if not lam > margin:
        raise ConvexityError(f"momentum Hessian not positive definite: min eigenvalue {lam:.6g}")
    return lam


def tube_points(d, delta, n, rng, q_star=0.25, q0_margin=0.1, p_radius=1.0):
    """Random points of the working tube around the segment [0, delta] e0."""
    m = d + 1
    q0 = rng.uniform(-q0_margin, delta + q0_margin, size=(n, 1))
    qs = rng.uniform(-q_star, q_star, size=(n, d))
    p = rng.uniform(-p_radius, p_radius, size=(n, m))
    return np.concatenate([q0, qs, p], axis=1)


@dataclass(frozen=True)
class BuiltinEntry:
    """A library Hamiltonian with its canonical orbit start and default delta."""

    name: str
    text: str
    d: int
    q0: tuple
    p0: tuple
    delta: float
    params: dict = field(default_factory=dict)
    degree: float | None = None
    convex: bool = True
    description: str = ""

    def field(self, **params):
        unknown = set(params) - set(self.params)
        if unknown:
            raise ValueError(f"{self.name} has no parameter(s) {sorted(unknown)}")
        merged = {**self.params, **{k: float(v) for k, v in params.items()}}
        return parse_hamiltonian(self.text, self.d, merged, name=self.name)

    @property
    def start(self):
        return PhaseState(self.q0, self.p0)


_LIBRARY = (
    BuiltinEntry("free", "0.5*(p0^2+p1^2)", 1, (0.0, 0.0), (1.0, 0.0), 0.5,
                 degree=2.0, description="free particle"),
    BuiltinEntry("aniso", "0.5*p0^2+0.5*(1+q0)*p1^2", 1, (0.0, 0.0), (1.0, 0.0), 0.5,
                 description="transverse metric growing along the axis"),
    BuiltinEntry("cross", "0.5*(p0^2+p1^2)+eps*q1*p0", 1, (0.0, 0.0), (1.0, 0.0), 0.5,
                 params={"eps": 0.1}, description="magnetic-type cross term, d2H/dq1dp0 = eps"),
    BuiltinEntry("riem1", "sqrt(p0^2+(1+q0^2)*p1^2)", 1, (0.0, 0.0), (1.0, 0.2), 0.4,
                 degree=1.0, convex=False, description="Riemannian norm, homogeneous of degree 1"),
    BuiltinEntry("osc", "0.5*(p0^2+p1^2)+0.5*q1^2", 1, (0.0, 0.1), (1.0, 0.0), 0.5,
                 description="transverse harmonic oscillator"),
    BuiltinEntry("aniso2", "0.5*p0^2+0.5*((1+q0)*p1^2+0.6*q0^2*p1*p2+p2^2)", 2,
                 (0.0, 0.0, 0.0), (1.0, 0.0, 0.0), 0.5,
                 description="two transverse directions with a non-commuting metric path"),
)


def builtin_library():
    """Named test Hamiltonians, in a fixed order."""
    return {e.name: e for e in _LIBRARY}


def builtin(name, **params):
    lib = builtin_library()
    if name not in lib:
        raise KeyError(f"unknown Hamiltonian {name!r}; available: {', '.join(lib)}")
    return lib[name].field(**params)
