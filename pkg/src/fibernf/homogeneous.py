"""Normal form for Hamiltonians that are positively homogeneous in the momenta.

For such fields the orbit momentum can be kept at the constant covector
``(P0, 0)`` and the whole mixed block ``d2H/dq dp`` vanishes on the axis.
Only homogeneous factors are used, so the total map fixes the zero section.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .errors import HomogeneityError, NormalFormError, ShrinkDelta
from .hamiltonian import as_points
from .normalform import (
    PipelineOptions,
    PipelineResult,
    evaluate_conditions,
    flow_box_straighten,
    make_recipe,
    raw_orbit,
    shear_map,
    straighten,
    verify_conditions,
    StepResult,
    AxisSamples,
)
from .transforms import CompositeMap, pullback

HOMOGENEITY_TOL = 1e-6


@dataclass
class HomogeneityCertificate:
    """Numerical evidence that ``H(q, s p) = s^a H(q, p)`` for ``s > 0``.

    ``euler_residual`` is ``max |p . dH/dp - a H| / (1 + |H|)``,
    ``scaling_residual`` the same relative bound for ``s`` in {0.5, 2} and
    ``square_margin`` the smallest eigenvalue of ``d2(H^2)/dp dp``.
    """

    degree: float
    euler_residual: float
    scaling_residual: float
    square_margin: float
    positivity_margin: float
    n_samples: int
    tol: float = HOMOGENEITY_TOL

    @property
    def passed(self):
        return bool(self.euler_residual < self.tol and self.scaling_residual < self.tol
                    and self.square_margin > 0 and self.positivity_margin > 0)


def homogeneous_samples(d, delta=0.5, n=200, seed=0, q_star=0.25, margin=0.1):
    """Seeded tube points with momentum norm in [0.5, 2]."""
    rng = np.random.default_rng(seed)
    m = d + 1
    q0 = rng.uniform(-margin, delta + margin, size=(n, 1))
    qs = rng.uniform(-q_star, q_star, size=(n, d))
    direction = rng.normal(size=(n, m))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    p = direction * rng.uniform(0.5, 2.0, size=(n, 1))
    return np.concatenate([q0, qs, p], axis=1)


def certify_homogeneous(H, degree, samples=None, tol=HOMOGENEITY_TOL, raise_on_failure=True):
    """Check the Euler relation, the scaling law and convexity of ``H^2``.

    Raises HomogeneityError ("not homogeneous of declared degree") when the
    certificate fails and ``raise_on_failure`` is set.
    """
    a = float(degree)
    X = homogeneous_samples(H.d) if samples is None else as_points(samples, H.width)
    m = H.m
    h = H.value(X)
    g, hess = H.gradient_and_hessian(X)
    gp, Hpp = g[:, m:], hess[:, m:, m:]
    scale = 1.0 + np.abs(h)
    euler = float(np.max(np.abs(np.sum(X[:, m:] * gp, axis=1) - a * h) / scale))
    scaling = 0.0
    for s in (0.5, 2.0):
        Xs = X.copy()
        Xs[:, m:] *= s
        scaling = max(scaling, float(np.max(np.abs(H.value(Xs) - s**a * h) / (1.0 + np.abs(s**a * h)))))
    H2pp = 2.0 * (gp[:, :, None] * gp[:, None, :] + h[:, None, None] * Hpp)
    H2pp = 0.5 * (H2pp + np.swapaxes(H2pp, 1, 2))
    cert = HomogeneityCertificate(a, euler, scaling, float(np.linalg.eigvalsh(H2pp)[:, 0].min()),
                                  float(np.min(h)), X.shape[0], tol)
    if raise_on_failure and not cert.passed:
        raise HomogeneityError(
            f"not homogeneous of declared degree {a:g}: Euler residual {euler:.3g}, "
            f"scaling residual {scaling:.3g}, min eigenvalue of d2(H^2)/dp2 {cert.square_margin:.3g}, "
            f"min H {cert.positivity_margin:.3g}"
        )
    return cert


def verify_homogeneous_conditions(H, delta, P0, grid=11, stencil=None, tolerances=None, steps=None):
    """Report on (2), (9), (4), (5), (10) for the orbit through ``(0, (P0, 0))``."""
    x0 = np.zeros(2 * H.m)
    x0[H.m] = float(P0)
    return verify_conditions(H, delta, grid, stencil, tolerances, x0=x0, steps=steps, homogeneous=True)


def p0_constancy(H, orbit, degree, x0):
    """``max_t |P(t) . Qdot(t) - a H(x0)|`` along an integrated orbit.

    ``P . Qdot`` is the axis momentum after straightening, so this is the
    constancy of P0 measured on the raw orbit.
    """
    m = orbit.m
    target = float(degree) * float(H.value(as_points(x0, H.width))[0])
    P0 = np.sum(orbit.P * orbit.xdot[:, :m], axis=1)
    return float(np.max(np.abs(P0 - target))), target


def _run_once(H, x0, delta, degree, options):
    orbit, check_idx = raw_orbit(H, x0, delta, options)
    m = H.m
    steps = []
    level = None

    def record(step):
        if options.step_reports and not step.identity:
            o = step.orbit
            step.report = evaluate_conditions(step.H, o.t[check_idx], o.x[check_idx], delta,
                                              stencil=options.stencil, tolerances=options.tolerances,
                                              homogeneous=True, P_level=level)
        steps.append(step)
        return step

    s = straighten(H, orbit, delta)
    P = s.orbit.x[:, m:]
    i0 = int(np.argmin(np.abs(s.orbit.t)))
    P0 = float(P[i0, 0])
    if abs(P0) < 1e-12:
        raise NormalFormError("P0(0) = 0: the orbit is constant")
    level = np.zeros(m)
    level[0] = P0
    s.info["P0_drift"] = float(np.max(np.abs(P[:, 0] - P0)))
    record(s)
    psi, ident = shear_map(P[:, 1:] / P[:, :1], s.orbit.t, "shear_momentum")
    if ident:
        s = record(StepResult("shear_momentum", s.H, psi, s.orbit, True))
    else:
        s = record(StepResult("shear_momentum", pullback(s.H, psi), psi,
                              AxisSamples(s.orbit.t, psi.inverse(s.orbit.x)), False))
    s = record(flow_box_straighten(s.H, s.orbit, level, delta, steps=options.flow_steps))
    return orbit, steps, P0


def homogeneous_pipeline(H, x0, delta, degree, options=None, samples=None):
    """Straighten, shear the momentum to ``(P0, 0)`` and flow-box at that level.

    Returns a :class:`PipelineResult` whose report covers (2), (9), (4), (5)
    and (10); ``result.certificate`` holds the homogeneity certificate.
    """
    options = options or PipelineOptions()
    if not delta > 0:
        raise ValueError("delta must be positive")
    cert = certify_homogeneous(H, degree, samples)
    x0 = as_points(x0, H.width)[0]
    start = time.perf_counter()
    d_try = float(delta)
    for attempt in range(options.max_shrink + 1):
        try:
            orbit, steps, P0 = _run_once(H, x0, d_try, degree, options)
            break
        except ShrinkDelta:
            if attempt == options.max_shrink:
                raise
            d_try *= 0.5
    factors = [s.psi for s in reversed(steps) if not s.identity]
    psi_total = CompositeMap(factors, m=H.m)
    H_final = pullback(H, psi_total)
    report = verify_homogeneous_conditions(H_final, d_try, P0, options.grid, options.stencil,
                                           options.tolerances, steps=options.verify_steps)
    recipe = make_recipe(H, x0, d_try, psi_total, options,
                         homogeneous={"degree": float(degree), "P0": P0})
    result = PipelineResult(H, H_final, psi_total, report, recipe, steps, orbit, None, d_try,
                            time.perf_counter() - start)
    result.certificate = cert
    result.P0 = P0
    result.p0_drift = p0_constancy(H, orbit, degree, x0)[0]
    return result
