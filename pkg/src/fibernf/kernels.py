"""Select the compiled kernels when available, else the numpy fallback.

Set ``FIBERNF_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels
if os.environ.get("FIBERNF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # noqa: F811

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def _backend(name):
    if name is None:
        return _impl
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def evaluate(program, X, backend=None):
    """Evaluate a compiled program at the rows of ``X``; returns (n, n_outputs)."""
    X = np.ascontiguousarray(X, dtype=float)
    out = np.empty((X.shape[0], program.n_outputs))
    _backend(backend).eval_programs(
        program.code, program.starts, program.consts, X, out, program.stack_size
    )
    return out


def rk4_hamilton(grad_program, X0, h, nsteps, backend=None):
    """Fixed-step RK4 trajectories of Hamilton's equations.

    Returns ``traj, deriv`` of shape (nsteps + 1, n, 2m).
    """
    X0 = np.ascontiguousarray(np.atleast_2d(X0), dtype=float)
    traj = np.empty((nsteps + 1,) + X0.shape)
    deriv = np.empty_like(traj)
    _backend(backend).rk4_hamilton(
        grad_program.code, grad_program.starts, grad_program.consts, X0, float(h),
        int(nsteps), traj, deriv, grad_program.stack_size,
    )
    return traj, deriv
