"""Central finite differences with Richardson extrapolation.

Every derivative is a tensor product of one-dimensional central stencils.  All
stencil points for all requested base points go through a single batched call
of the evaluator, so expensive composed evaluators are called once per
derivative request.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import DerivativeOrderError, check_finite

# one-dimensional central stencils: order -> (offsets, weights), scaled by 1/h^order
_STENCILS = {
    0: (np.array([0.0]), np.array([1.0])),
    1: (np.array([-1.0, 1.0]), np.array([-0.5, 0.5])),
    2: (np.array([-1.0, 0.0, 1.0]), np.array([1.0, -2.0, 1.0])),
    3: (np.array([-2.0, -1.0, 1.0, 2.0]), np.array([-0.5, 1.0, -1.0, 0.5])),
}


@dataclass(frozen=True)
class Stencil:
    """Step policy for finite differences.

    Parameters
    ----------
    h : float
        Base step for first derivatives.
    levels : int
        Number of Richardson levels; ``levels=1`` combines steps ``h`` and ``h/2``.
    h2 : float
        Base step for derivatives of total order 2.  Cancellation error of a
        second difference grows like eps / h^2, so this step is larger than h.
    h3 : float
        Base step for third-order derivatives.
    scale : tuple of float, optional
        Per-variable multiplier of the step.
    """

    h: float = 1e-4
    levels: int = 1
    h2: float = 1e-3
    h3: float = 5e-3
    scale: tuple | None = None

    def __post_init__(self):
        if not (self.h > 0 and self.h2 > 0 and self.h3 > 0):
            raise ValueError("finite-difference steps must be positive")
        if self.levels < 0:
            raise ValueError("Richardson levels must be non-negative")

    def steps(self, width, total_order):
        base = (self.h, self.h, self.h2, self.h3)[total_order]
        s = np.ones(width) if self.scale is None else np.asarray(self.scale, dtype=float)
        if s.shape != (width,):
            raise ValueError(f"stencil scale has length {s.size}, expected {width}")
        return base * s


DEFAULT_STENCIL = Stencil()


def _as_counts(index, width):
    """Normalise a derivative request to per-variable counts."""
    counts = np.zeros(width, dtype=int)
    for i in index:
        if not 0 <= i < width:
            raise DerivativeOrderError(f"variable index {i} out of range for width {width}")
        counts[i] += 1
    if counts.sum() > 3:
        raise DerivativeOrderError(f"derivative order {counts.sum()} exceeds supported order 3")
    return counts


def _tensor_stencil(counts, steps):
    """Offsets (k, width) and weights (k,) for one mixed partial at unit scale."""
    axes = [i for i, c in enumerate(counts) if c > 0]
    parts = [_STENCILS[counts[i]] for i in axes]
    offs, wts = [], []
    for combo in product(*[range(len(p[0])) for p in parts]):
        off = np.zeros(len(counts))
        w = 1.0
        for ax, part, j in zip(axes, parts, combo):
            off[ax] = part[0][j] * steps[ax]
            w *= part[1][j] / steps[ax] ** counts[ax]
        offs.append(off)
        wts.append(w)
    return np.array(offs), np.array(wts)


def partials(f, X, indices, stencil=DEFAULT_STENCIL, what="evaluator"):
    """Finite-difference estimates of several mixed partials at several points.

    Parameters
    ----------
    f : callable
        Maps an (N, width) array to N values (or an (N, k) array).
    X : array_like, shape (n, width)
    indices : sequence of tuples
        Each tuple lists variable indices, e.g. ``(0, 3)`` for d^2/dx0 dx3.

    Returns
    -------
    ndarray, shape (n, len(indices)) or (n, len(indices), k)
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, width = X.shape
    plans = []
    chunks = []
    offset = 0
    for index in indices:
        counts = _as_counts(index, width)
        total = int(counts.sum())
        base = stencil.steps(width, total)
        if total == 0:
            levels = [1.0]
        else:
            levels = [0.5**k for k in range(stencil.levels + 1)]
        per_level = []
        for lv in levels:
            offs, wts = _tensor_stencil(counts, base * lv)
            per_level.append((offset, len(wts), wts))
            chunks.append(offs)
            offset += len(wts)
        plans.append(per_level)
    offsets = np.concatenate(chunks, axis=0)
    pts = (X[:, None, :] + offsets[None, :, :]).reshape(-1, width)
    vals = np.asarray(f(pts), dtype=float)
    vals = vals.reshape((n, offsets.shape[0]) + vals.shape[1:])
    check_finite(vals, X, what)
    out = []
    for per_level in plans:
        est = [np.tensordot(vals[:, s:s + k], w, axes=([1], [0])) for s, k, w in per_level]
        # Richardson table for even error expansions
        for lvl in range(1, len(est)):
            fac = 4.0**lvl
            est = [(fac * est[i + 1] - est[i]) / (fac - 1.0) for i in range(len(est) - 1)]
        out.append(est[0])
    return np.stack(out, axis=1)


def gradient(f, X, stencil=DEFAULT_STENCIL, what="evaluator"):
    X = np.atleast_2d(X)
    return partials(f, X, [(i,) for i in range(X.shape[1])], stencil, what)


def hessian(f, X, stencil=DEFAULT_STENCIL, what="evaluator", variables=None):
    """Symmetric finite-difference Hessian over ``variables`` (default: all)."""
    X = np.atleast_2d(X)
    var = list(range(X.shape[1])) if variables is None else list(variables)
    pairs = [(var[i], var[j]) for i in range(len(var)) for j in range(i, len(var))]
    vals = partials(f, X, pairs, stencil, what)
    k = len(var)
    H = np.empty((X.shape[0], k, k) + vals.shape[2:])
    c = 0
    for i in range(k):
        for j in range(i, k):
            H[:, i, j] = vals[:, c]
            H[:, j, i] = vals[:, c]
            c += 1
    return H


def jacobian(F, X, stencil=DEFAULT_STENCIL, what="map"):
    """Jacobian (n, k, width) of a vector map F: (N, width) -> (N, k)."""
    X = np.atleast_2d(X)
    g = partials(F, X, [(i,) for i in range(X.shape[1])], stencil, what)
    return np.swapaxes(g, 1, 2)
