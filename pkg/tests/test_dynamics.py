import numpy as np
import pytest

from fibernf.dynamics import (
    FlowMap,
    flow_jacobian,
    hamiltonian_vector_field,
    integrate_on_grid,
    integrate_orbit,
    reparametrized_flow,
)
from fibernf.errors import FlowBoxError, IntegrationError
from fibernf.hamiltonian import PhaseState, builtin, builtin_library, parse_hamiltonian
from fibernf.io import orbit_csv

from oracles import fd_jacobian, osc_q1, reference_orbit


def _osc_exact(t):
    return np.array([t, osc_q1(t), 1.0, -0.1 * np.sin(t)])


# ---------------------------------------------------------------- vector field

def test_vector_field_free():
    qdot, pdot = hamiltonian_vector_field(builtin("free"), PhaseState([0, 0], [1, 0]))
    np.testing.assert_array_equal(qdot, [1, 0])
    np.testing.assert_array_equal(pdot, [0, 0])


def test_vector_field_osc():
    qdot, pdot = hamiltonian_vector_field(builtin("osc"), np.array([0, 0.1, 1, 0]))
    np.testing.assert_allclose(qdot, [1, 0])
    np.testing.assert_allclose(pdot, [0, -0.1])


def test_vector_field_cross():
    qdot, pdot = hamiltonian_vector_field(builtin("cross", eps=0.1), np.array([0, 0, 1, 0]))
    np.testing.assert_allclose(qdot, [1, 0])
    np.testing.assert_allclose(pdot, [0, -0.1], atol=1e-15)


def test_vector_field_batch():
    qdot, pdot = hamiltonian_vector_field(builtin("free"), np.ones((3, 4)))
    assert qdot.shape == (3, 2) and pdot.shape == (3, 2)


# ---------------------------------------------------------------- orbits

def test_free_orbit_is_exact():
    o = integrate_orbit(builtin("free"), PhaseState([0, 0], [1, 0]), 1.0, 512)
    np.testing.assert_allclose(o.Q[:, 0], o.t, atol=1e-14)
    np.testing.assert_array_equal(o.Q[:, 1], 0)
    np.testing.assert_array_equal(o.P, np.tile([1.0, 0.0], (513, 1)))


def test_osc_orbit_matches_harmonic_solution():
    o = integrate_orbit(builtin("osc"), np.array([0, 0.1, 1, 0]), 1.0, 512)
    assert abs(o.x[-1, 1] - osc_q1(1.0)) < 1e-8


def test_aniso_axis_is_invariant():
    o = integrate_orbit(builtin("aniso"), np.array([0, 0, 1, 0]), 1.0, 512)
    np.testing.assert_allclose(o.P, np.tile([1.0, 0.0], (513, 1)), atol=1e-15)
    np.testing.assert_allclose(o.Q[:, 0], o.t, atol=1e-13)
    np.testing.assert_array_equal(o.Q[:, 1], 0)


@pytest.mark.parametrize("name", list(builtin_library()))
def test_energy_conservation(name):
    entry = builtin_library()[name]
    o = integrate_orbit(entry.field(), entry.start, 1.0, 512)
    assert o.energy_drift() <= 1e-8


@pytest.mark.parametrize("name", list(builtin_library()))
def test_orbit_against_high_accuracy_reference(name):
    entry = builtin_library()[name]
    H = entry.field()
    o = integrate_orbit(H, entry.start, 1.0, 512)
    ref = reference_orbit(lambda x: H.gradient(x[None, :])[0], entry.start.to_array(), 1.0)
    assert np.max(np.abs(o.x[-1] - ref)) < 1e-9


def test_rk4_order_factor_on_osc():
    H = builtin("osc")
    x0 = np.array([0, 0.1, 1, 0])
    errors = []
    for steps in (16, 32):
        o = integrate_orbit(H, x0, 1.0, steps)
        errors.append(np.max(np.abs(o.x[-1] - _osc_exact(1.0))))
    assert 12 <= errors[0] / errors[1] <= 20


def test_dense_output_and_midpoint_residual():
    H = builtin("osc")
    o = integrate_orbit(H, np.array([0, 0.1, 1, 0]), 1.0, 512)
    s = np.linspace(0, 1, 37)
    err = max(np.max(np.abs(o.dense(si) - _osc_exact(si))) for si in s)
    assert err < 1e-10
    assert o.midpoint_residual(H) < 1e-8
    np.testing.assert_allclose(o.dense(o.t[5]), o.x[5], atol=1e-15)


def test_integration_errors():
    H = builtin("osc")
    with pytest.raises(ValueError):
        integrate_orbit(H, np.array([0, 0.1, 1, 0]), 1.0, 8)
    with pytest.raises(ValueError):
        integrate_orbit(H, np.array([0, 0.1, 1, 0]), -1.0, 64)
    stiff = parse_hamiltonian("0.5*(p0^2+p1^2)+50*q1^2", 1)
    with pytest.raises(IntegrationError, match="energy drift"):
        integrate_orbit(stiff, np.array([0, 0.5, 1, 0]), 1.0, 16)


def test_integrate_on_grid_matches_forward_integration():
    H = builtin("osc")
    t = np.linspace(-0.25, 0.5, 31)
    o = integrate_on_grid(H, np.array([0, 0.1, 1, 0]), t)
    for ti, xi in zip(t, o.x):
        np.testing.assert_allclose(xi, _osc_exact(ti), atol=1e-11)
    with pytest.raises(ValueError):
        integrate_on_grid(H, np.array([0, 0.1, 1, 0]), np.linspace(0.1, 0.5, 5))


def test_orbit_csv_header():
    o = integrate_orbit(builtin("aniso2"), np.array([0, 0, 0, 1, 0, 0]), 0.5, 16)
    lines = orbit_csv(o).splitlines()
    assert lines[0] == "t,q0,q1,q2,p0,p1,p2,energy"
    assert len(lines) == 18


# ---------------------------------------------------------------- flows

def _linear_field(X):
    return np.stack([np.ones(len(X)), X[:, 1]], axis=1)


def test_reparametrized_constant_field():
    F = reparametrized_flow(lambda X: np.tile([1.0, 0.0], (len(X), 1)), margin=0.1)
    np.testing.assert_allclose(F.flow(np.array([[0.0, 0.3]]), 0.7), [[0.7, 0.3]], atol=1e-15)


def test_reparametrized_linear_field():
    F = reparametrized_flow(_linear_field, margin=0.1)
    a = np.array([0.2, -0.1, 0.05])
    start = np.stack([np.zeros(3), a], axis=1)
    out = F.flow(start, 1.0)
    np.testing.assert_allclose(out[:, 0], 1.0, atol=1e-15)
    np.testing.assert_allclose(out[:, 1], a * np.e, atol=1e-8)


def test_reparametrized_field_rescales_first_component():
    F = reparametrized_flow(lambda X: np.tile([2.0, 0.0], (len(X), 1)), reference=np.zeros(2))
    np.testing.assert_allclose(F.flow(np.array([[0.0, 0.4]]), 0.3), [[0.3, 0.4]], atol=1e-15)


def test_flow_box_guard():
    def V(X):
        return np.stack([1.0 - 2.0 * X[:, 0], np.zeros(len(X))], axis=1)

    F = reparametrized_flow(V, reference=np.zeros((1, 2)))
    with pytest.raises(FlowBoxError, match="flow box not applicable here"):
        F.flow(np.array([[0.0, 0.0]]), 1.0)


def test_flow_invertibility(rng):
    def V(X):
        return np.stack([1.0 + 0.2 * X[:, 1] ** 2, 0.3 * X[:, 0] - X[:, 1]], axis=1)

    F = FlowMap(V, steps=64)
    X = rng.uniform(-0.5, 0.5, size=(20, 2))
    back = F.flow(F.flow(X, 0.6), -0.6)
    assert np.max(np.abs(back - X)) < 1e-9


def test_flow_jacobian_examples():
    const = FlowMap(lambda X: np.tile([1.0, 0.0], (len(X), 1)))
    np.testing.assert_allclose(flow_jacobian(const, np.zeros(2), 0.8), np.eye(2), atol=1e-15)
    lin = FlowMap(_linear_field, steps=64)
    np.testing.assert_allclose(flow_jacobian(lin, np.zeros(2), 1.0), [[1, 0], [0, np.e]], atol=1e-8)


def test_flow_jacobian_matches_finite_differences_on_aniso_field(rng):
    H = builtin("aniso")
    level = np.array([1.0, 0.3])

    def V(Q):
        X = np.concatenate([Q, np.tile(level, (len(Q), 1))], axis=1)
        return H.grad_p(X)

    F = FlowMap(V, steps=64)
    for start in rng.uniform(-0.2, 0.2, size=(5, 2)):
        Y = flow_jacobian(F, start, 0.5)
        oracle = fd_jacobian(lambda s: F.flow(s[None, :], 0.5)[0], start)
        np.testing.assert_allclose(Y, oracle, atol=1e-6)
        assert np.linalg.det(flow_jacobian(F, start, 0.05)) > 0


def test_flow_time_derivative():
    F = FlowMap(_linear_field, steps=64)
    x, _, z = F.flow_with_jacobian(np.array([[0.0, 0.2]]), 0.5)
    np.testing.assert_allclose(z[0], _linear_field(x)[0], atol=1e-9)
