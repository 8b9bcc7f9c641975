"""Pure-numpy implementations of the compiled kernels.

Same signatures and results as ``fibernf._kernels``; programs are run once per
instruction over all points at the same time instead of point by point.
"""

import numpy as np

from .expr import (
    OP_ADD,
    OP_CONST,
    OP_COS,
    OP_DIV,
    OP_EXP,
    OP_LOG,
    OP_MUL,
    OP_NEG,
    OP_POW,
    OP_SIN,
    OP_SQRT,
    OP_SUB,
    OP_VAR,
)

_UNARY = {OP_NEG: np.negative, OP_SQRT: np.sqrt, OP_SIN: np.sin, OP_COS: np.cos,
          OP_EXP: np.exp, OP_LOG: np.log}
_BINARY = {OP_ADD: np.add, OP_SUB: np.subtract, OP_MUL: np.multiply,
           OP_DIV: np.divide, OP_POW: np.power}


def _run(code, lo, hi, consts, X):
    n = X.shape[0]
    stack = []
    for pc in range(lo, hi):
        op, arg = code[pc]
        if op == OP_CONST:
            stack.append(np.full(n, consts[arg]))
        elif op == OP_VAR:
            stack.append(X[:, arg])
        elif op in _BINARY:
            b = stack.pop()
            stack.append(_BINARY[op](stack.pop(), b))
        else:
            stack.append(_UNARY[op](stack.pop()))
    return stack[0]


def eval_programs(code, starts, consts, X, out, stack_size):
    code = np.asarray(code).tolist()
    with np.errstate(all="ignore"):
        for k in range(len(starts) - 1):
            out[:, k] = _run(code, starts[k], starts[k + 1], consts, X)


def _field(code, starts, consts, x, m, stack_size):
    g = np.empty((x.shape[0], 2 * m))
    eval_programs(code, starts, consts, x, g, stack_size)
    return np.concatenate([g[:, m:], -g[:, :m]], axis=1)


def rk4_hamilton(code, starts, consts, X0, h, nsteps, traj, deriv, stack_size):
    m = X0.shape[1] // 2
    x = np.array(X0, dtype=float)
    traj[0] = x
    k1 = _field(code, starts, consts, x, m, stack_size)
    for s in range(nsteps):
        deriv[s] = k1
        k2 = _field(code, starts, consts, x + 0.5 * h * k1, m, stack_size)
        k3 = _field(code, starts, consts, x + 0.5 * h * k2, m, stack_size)
        k4 = _field(code, starts, consts, x + h * k3, m, stack_size)
        x = x + h * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
        traj[s + 1] = x
        k1 = _field(code, starts, consts, x, m, stack_size)
    deriv[nsteps] = k1
