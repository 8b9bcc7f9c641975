# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stack-machine evaluator and RK4 integrator for expression bytecode."""

from libc.math cimport pow, sqrt, sin, cos, exp, log
from libc.stdlib cimport malloc, free

DEF OP_CONST = 0
DEF OP_VAR = 1
DEF OP_ADD = 2
DEF OP_SUB = 3
DEF OP_MUL = 4
DEF OP_DIV = 5
DEF OP_POW = 6
DEF OP_NEG = 7
DEF OP_SQRT = 8
DEF OP_SIN = 9
DEF OP_COS = 10
DEF OP_EXP = 11
DEF OP_LOG = 12


cdef inline double run(const int[:, ::1] code, Py_ssize_t lo, Py_ssize_t hi,
                       const double[::1] consts, const double* x, double* stack) noexcept nogil:
    cdef Py_ssize_t pc
    cdef int sp = -1
    cdef int op
    for pc in range(lo, hi):
        op = code[pc, 0]
        if op == OP_CONST:
            sp += 1
            stack[sp] = consts[code[pc, 1]]
        elif op == OP_VAR:
            sp += 1
            stack[sp] = x[code[pc, 1]]
        elif op == OP_ADD:
            sp -= 1
            stack[sp] = stack[sp] + stack[sp + 1]
        elif op == OP_SUB:
            sp -= 1
            stack[sp] = stack[sp] - stack[sp + 1]
        elif op == OP_MUL:
            sp -= 1
            stack[sp] = stack[sp] * stack[sp + 1]
        elif op == OP_DIV:
            sp -= 1
            stack[sp] = stack[sp] / stack[sp + 1]
        elif op == OP_POW:
            sp -= 1
            stack[sp] = pow(stack[sp], stack[sp + 1])
        elif op == OP_NEG:
            stack[sp] = -stack[sp]
        elif op == OP_SQRT:
            stack[sp] = sqrt(stack[sp])
        elif op == OP_SIN:
            stack[sp] = sin(stack[sp])
        elif op == OP_COS:
            stack[sp] = cos(stack[sp])
        elif op == OP_EXP:
            stack[sp] = exp(stack[sp])
        elif op == OP_LOG:
            stack[sp] = log(stack[sp])
    return stack[0]


def eval_programs(const int[:, ::1] code, const Py_ssize_t[::1] starts,
                  const double[::1] consts, const double[:, ::1] X,
                  double[:, ::1] out, int stack_size):
    """Evaluate every program at every row of ``X`` into ``out[n, n_programs]``."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t nprog = starts.shape[0] - 1
    cdef Py_ssize_t i, k
    cdef double* stack = <double*> malloc(stack_size * sizeof(double))
    if stack == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(n):
                for k in range(nprog):
                    out[i, k] = run(code, starts[k], starts[k + 1], consts, &X[i, 0], stack)
    finally:
        free(stack)


cdef inline void field(const int[:, ::1] code, const Py_ssize_t[::1] starts,
                       const double[::1] consts, const double* x, double* dx,
                       int m, double* stack) noexcept nogil:
    # programs hold dH/dq (first m) then dH/dp (last m)
    cdef int k
    for k in range(m):
        dx[m + k] = -run(code, starts[k], starts[k + 1], consts, x, stack)
        dx[k] = run(code, starts[m + k], starts[m + k + 1], consts, x, stack)


def rk4_hamilton(const int[:, ::1] code, const Py_ssize_t[::1] starts,
                 const double[::1] consts, const double[:, ::1] X0, double h,
                 int nsteps, double[:, :, ::1] traj, double[:, :, ::1] deriv,
                 int stack_size):
    """Fixed-step RK4 for Hamilton's equations given compiled gradient programs.

    ``traj`` and ``deriv`` have shape (nsteps + 1, n, 2m) and receive the states
    and the vector field at every node.
    """
    cdef Py_ssize_t n = X0.shape[0]
    cdef int w = X0.shape[1]
    cdef int m = w // 2
    cdef Py_ssize_t i, s
    cdef int j
    cdef double* stack = <double*> malloc(stack_size * sizeof(double))
    cdef double* buf = <double*> malloc(6 * w * sizeof(double))
    if stack == NULL or buf == NULL:
        free(stack)
        free(buf)
        raise MemoryError()
    cdef double* k1 = buf
    cdef double* k2 = buf + w
    cdef double* k3 = buf + 2 * w
    cdef double* k4 = buf + 3 * w
    cdef double* x = buf + 4 * w
    cdef double* y = buf + 5 * w
    try:
        with nogil:
            for i in range(n):
                for j in range(w):
                    x[j] = X0[i, j]
                    traj[0, i, j] = x[j]
                field(code, starts, consts, x, k1, m, stack)
                for s in range(nsteps):
                    for j in range(w):
                        deriv[s, i, j] = k1[j]
                        y[j] = x[j] + 0.5 * h * k1[j]
                    field(code, starts, consts, y, k2, m, stack)
                    for j in range(w):
                        y[j] = x[j] + 0.5 * h * k2[j]
                    field(code, starts, consts, y, k3, m, stack)
                    for j in range(w):
                        y[j] = x[j] + h * k3[j]
                    field(code, starts, consts, y, k4, m, stack)
                    for j in range(w):
                        x[j] = x[j] + h * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) / 6.0
                        traj[s + 1, i, j] = x[j]
                    field(code, starts, consts, x, k1, m, stack)
                for j in range(w):
                    deriv[nsteps, i, j] = k1[j]
    finally:
        free(stack)
        free(buf)
