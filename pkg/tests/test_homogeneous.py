import numpy as np
import pytest
from hypothesis import given, strategies as st

from fibernf.dynamics import integrate_on_grid
from fibernf.errors import HomogeneityError
from fibernf.hamiltonian import builtin, parse_hamiltonian
from fibernf.homogeneous import (
    certify_homogeneous,
    homogeneous_pipeline,
    homogeneous_samples,
    p0_constancy,
    verify_homogeneous_conditions,
)
from fibernf.normalform import verify_conditions

X0 = np.array([0, 0, 1.0, 0])


@pytest.fixture(scope="module")
def flat_norm():
    return homogeneous_pipeline(parse_hamiltonian("sqrt(p0^2+p1^2)", 1), X0, 0.5, 1)


@pytest.fixture(scope="module")
def kinetic():
    return homogeneous_pipeline(builtin("free"), X0, 0.5, 2)


# ---------------------------------------------------------------- certificate

def test_kinetic_energy_is_degree_two():
    cert = certify_homogeneous(builtin("free"), 2)
    assert cert.passed
    assert cert.euler_residual < 1e-14 and cert.scaling_residual < 1e-14


def test_riem1_is_degree_one():
    cert = certify_homogeneous(builtin("riem1"), 1)
    assert cert.euler_residual < 1e-8 and cert.scaling_residual < 1e-8
    assert cert.square_margin > 0


def test_potential_breaks_homogeneity():
    with pytest.raises(HomogeneityError, match="not homogeneous of declared degree"):
        certify_homogeneous(parse_hamiltonian("0.5*(p0^2+p1^2)+q1", 1), 2)


def test_wrong_degree_is_detected():
    cert = certify_homogeneous(builtin("free"), 1, raise_on_failure=False)
    assert not cert.passed
    assert cert.euler_residual > 0.1


def test_samples_are_seeded_and_in_range():
    a = homogeneous_samples(1, seed=3)
    assert np.array_equal(a, homogeneous_samples(1, seed=3))
    r = np.linalg.norm(a[:, 2:], axis=1)
    assert r.min() >= 0.5 and r.max() <= 2.0


@given(st.floats(0.3, 3.0), st.integers(0, 1000))
def test_scaling_law_on_riem1(s, seed):
    H = builtin("riem1")
    X = homogeneous_samples(1, n=5, seed=seed)
    Xs = X.copy()
    Xs[:, 2:] *= s
    np.testing.assert_allclose(H.value(Xs), s * H.value(X), rtol=1e-13)


# ---------------------------------------------------------------- pipeline

def test_flat_norm_axis_momentum(flat_norm):
    assert flat_norm.P0 == pytest.approx(1.0, abs=1e-12)
    assert flat_norm.report.passed
    assert max(c.max_residual for c in flat_norm.report.conditions) < 1e-8


def test_kinetic_axis_momentum(kinetic):
    # P0 = a H(x0) = 2 * 1/2
    assert kinetic.P0 == pytest.approx(1.0, abs=1e-12)
    assert max(c.max_residual for c in kinetic.report.conditions) < 1e-8


def test_riem1_needs_normalisation():
    rep = verify_conditions(builtin("riem1"), 0.4, x0=[0, 0, 1.0, 0.2], homogeneous=True)
    assert rep.condition("(10)").max_residual > 1e-3
    assert not rep.condition("(9)").passed or not rep.condition("(2)").passed


def test_riem1_pipeline(pipeline):
    r = pipeline("riem1")
    names = [c.name.split()[0] for c in r.report.conditions]
    assert names == ["(2)", "(9)", "(4)", "(5)", "(10)"]
    assert all(c.max_residual < 1e-6 for c in r.report.conditions)
    assert r.p0_drift < 1e-8
    assert r.P0 == pytest.approx(np.sqrt(1.04), abs=1e-8)


def test_riem1_map_fixes_zero_section(pipeline, rng):
    r = pipeline("riem1")
    assert all(f.kind == "homogeneous" for f in r.psi_total.factors)
    Q = np.stack([rng.uniform(0, 0.4, 50), rng.uniform(-0.25, 0.25, 50)], axis=1)
    X = np.concatenate([Q, np.zeros_like(Q)], axis=1)
    assert np.array_equal(r.psi_total.apply(X)[:, 2:], np.zeros_like(Q))


def test_flow_box_gives_condition_4_for_free(pipeline):
    steps = {s.name: s for s in pipeline("riem1").steps}
    assert steps["flow_box"].report.condition("(4)").passed


def test_p0_constancy_on_raw_orbit():
    H = builtin("riem1")
    x0 = np.array([0, 0, 1.0, 0.2])
    orbit = integrate_on_grid(H, x0, np.linspace(0, 0.4, 81))
    drift, target = p0_constancy(H, orbit, 1, x0)
    assert target == pytest.approx(np.sqrt(1.04))
    assert drift < 1e-8


def test_pipeline_rejects_non_homogeneous_field():
    with pytest.raises(HomogeneityError):
        homogeneous_pipeline(builtin("osc"), np.array([0, 0.1, 1.0, 0]), 0.5, 2)


def test_pipeline_rejects_nonpositive_delta():
    with pytest.raises(ValueError, match="delta must be positive"):
        homogeneous_pipeline(builtin("free"), X0, 0.0, 2)


def test_recipe_records_degree(kinetic):
    assert kinetic.recipe["homogeneous"]["degree"] == 2.0
