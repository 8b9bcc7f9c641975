import numpy as np
import pytest

from fibernf.errors import TransferError
from fibernf.hamiltonian import parse_hamiltonian
from fibernf.transfer import (
    ShiftedScaledField,
    SumWithPotentialField,
    complete_momentum,
    linearize_transfer,
    mane_perturbation_experiment,
    maupertuis_diagnostics,
    maupertuis_normalize,
    origin_energy,
    reparam_invariance_check,
    section_map,
    shoot_to_section,
)

from oracles import free_shell_qstar, free_transfer

SHIFTED_FREE = "0.5*((p0+1)^2+p1^2)"
WEIGHTED = "0.5*(1+0.2*q1^2)*((p0+1)^2+p1^2)"


@pytest.fixture(scope="module")
def free():
    return parse_hamiltonian(SHIFTED_FREE, 1)


@pytest.fixture(scope="module")
def weighted():
    return parse_hamiltonian(WEIGHTED, 1)


def _points(n, seed=0, r=0.3):
    return np.random.default_rng(seed).uniform(-r, r, size=(n, 4))


# ---------------------------------------------------------------- reparametrisation

def test_maupertuis_of_shifted_free(free):
    X = _points(30)
    p0, p1 = X[:, 2], X[:, 3]
    Ht = maupertuis_normalize(free)
    np.testing.assert_allclose(Ht.value(X), p0 + 0.5 * p0**2 + 0.5 * p1**2, atol=1e-14)


def test_maupertuis_keeps_normalised_field():
    H = parse_hamiltonian("p0 + 0.5*p0^2 + 0.5*p1^2 + 0.3*q1*p1^2", 1)
    X = _points(30, 1)
    np.testing.assert_allclose(maupertuis_normalize(H).value(X), H.value(X), atol=1e-14)


def test_maupertuis_weight_and_gradient(weighted):
    Ht = maupertuis_normalize(weighted)
    X = _points(20, 2)
    w = 1 + 0.2 * X[:, 1] ** 2
    np.testing.assert_allclose(Ht.value(X), (weighted.value(X) - 0.5) / w, atol=1e-14)
    from fibernf import fd

    g_fd = fd.jacobian(lambda Y: Ht.value(Y)[:, None], X)[:, 0, :]
    np.testing.assert_allclose(Ht.gradient(X), g_fd, atol=1e-7)


def test_maupertuis_on_pipeline_field(pipeline):
    Ht = maupertuis_normalize(pipeline("aniso").H_final)
    h, dp0 = maupertuis_diagnostics(Ht, np.linspace(0, 0.5, 11))
    assert h < 1e-6
    assert dp0 < 1e-6


def test_weight_below_margin_is_rejected():
    H = parse_hamiltonian("0.5*(p0^2+p1^2)", 1)
    with pytest.raises(TransferError, match="below margin"):
        maupertuis_normalize(H).value(np.zeros((1, 4)))


def test_level_sets_coincide(weighted):
    check_points = _points(10, 3, 0.1)
    from fibernf.transfer import complete_momentum_at

    X = complete_momentum_at(weighted, 0.5, check_points)
    np.testing.assert_allclose(weighted.value(X), 0.5, atol=1e-13)
    assert np.max(np.abs(maupertuis_normalize(weighted).value(X))) < 1e-13


# ---------------------------------------------------------------- section maps

def test_complete_momentum(free):
    Y = np.array([[0.0, 0.1], [0.05, -0.2]])
    X = complete_momentum(free, 0.5, Y)
    np.testing.assert_allclose(free.value(X), 0.5, atol=1e-14)
    np.testing.assert_allclose(X[:, 2], np.sqrt(1 - Y[:, 1] ** 2) - 1, atol=1e-14)


def test_unreachable_energy(free):
    with pytest.raises(TransferError):
        complete_momentum(free, -1.0, np.zeros((1, 2)))


def test_section_map_origin(free):
    np.testing.assert_allclose(section_map(free, 0.5, [0.0, 0.0], 0.5), [0.0, 0.0], atol=1e-14)


@pytest.mark.parametrize("p1", [0.1, -0.3, 0.5])
def test_section_map_free_shell(free, p1):
    out = section_map(free, 0.5, [0.0, p1], 0.5)
    assert out[0] == pytest.approx(free_shell_qstar(p1, 0.5), abs=1e-7)
    assert out[1] == pytest.approx(p1, abs=1e-12)


def test_section_map_value_from_example(free):
    assert section_map(free, 0.5, [0.0, 0.1], 0.5)[0] == pytest.approx(0.050252, abs=1e-6)


def test_section_shot_conserves_energy(weighted):
    Y = np.random.default_rng(4).uniform(-0.1, 0.1, size=(20, 2))
    X0 = complete_momentum(weighted, 0.5, Y)
    shot = shoot_to_section(weighted, X0, 0.5)
    assert shot.energy_drift < 1e-8
    np.testing.assert_allclose(shot.x_end[:, 0], 0.5, atol=1e-13)
    assert np.all(shot.t_end > 0)


def test_section_map_never_reached():
    H = parse_hamiltonian("0.5*((p0+1)^2+p1^2)", 1)
    with pytest.raises(TransferError):
        shoot_to_section(H, np.array([[0, 0, -2.0, 0]]), 0.5, t_max=2.0)


# ---------------------------------------------------------------- transfer matrices

def test_free_transfer_matrix(free):
    T = linearize_transfer(free, 0.5, 0.5)
    np.testing.assert_allclose(T.L, free_transfer(1, 0.5), atol=1e-6)
    assert T.symplecticity < 1e-6
    doc = T.to_dict()
    assert set(doc) == {"L", "symplecticity", "metadata"}
    assert doc["metadata"] == {"e": 0.5, "delta": 0.5, "fd_step": 1e-4}


def test_short_segment_is_near_identity(free):
    T = linearize_transfer(free, 0.5, 1e-3)
    assert np.linalg.norm(T.L - np.eye(2), 2) < 2e-3


def test_free_transfer_in_two_dimensions():
    H = parse_hamiltonian("0.5*((p0+1)^2+p1^2+p2^2)", 2)
    T = linearize_transfer(H, 0.5, 0.5)
    np.testing.assert_allclose(T.L, free_transfer(2, 0.5), atol=1e-6)


def test_weighted_transfer_is_symplectic(weighted):
    T = linearize_transfer(weighted, 0.5, 0.5)
    assert T.symplecticity < 1e-6
    assert np.linalg.norm(T.L - free_transfer(1, 0.5), 2) > 1e-3


def test_reparametrisation_invariance(weighted):
    check = reparam_invariance_check(weighted, 0.5)
    assert check.difference < 1e-5
    assert check.surface_residual < 1e-12
    assert check.L_tilde.symplecticity < 1e-6


def test_reparametrisation_is_idempotent(weighted):
    Ht = maupertuis_normalize(weighted)
    check = reparam_invariance_check(Ht, 0.5)
    assert check.difference < 1e-8


def test_origin_energy(weighted):
    assert origin_energy(weighted) == 0.5


# ---------------------------------------------------------------- perturbation experiment

def test_zero_potential_reduces_to_invariance(weighted):
    res = mane_perturbation_experiment(weighted, "0*q1", [1e-2], 0.5)
    base = reparam_invariance_check(weighted, 0.5)
    assert res.rows[0].identity_residual == pytest.approx(base.difference, abs=1e-12)
    assert res.rows[0].effect_size < 1e-12


def test_free_experiment(free):
    res = mane_perturbation_experiment(free, "0.5*q1^2", [1e-2], 0.5)
    row = res.rows[0]
    assert row.identity_residual < 1e-5
    assert row.effect_size > 1e-3
    assert row.symplecticity_L1 < 1e-6 and row.symplecticity_L2 < 1e-6


def test_weighted_experiment_is_linear(weighted):
    res = mane_perturbation_experiment(weighted, "0.5*q1^2", [1e-3, 1e-2, 1e-1], 0.5)
    assert all(r.identity_residual < 1e-5 for r in res.rows)
    dev, slope = res.slope_deviation()
    assert dev < 0.2 and slope > 0
    assert res.header[0] == "eps"
    assert len(res.matrices) == 3


def test_sum_with_potential_gradient(weighted):
    from fibernf import fd

    F = SumWithPotentialField(weighted, "q0*q1^2", 0.3, weighted=True)
    X = _points(10, 5)
    np.testing.assert_allclose(F.value(X), weighted.value(X) + 0.3 * (1 + 0.2 * X[:, 1] ** 2) * X[:, 0] * X[:, 1] ** 2,
                               atol=1e-14)
    g_fd = fd.jacobian(lambda Y: F.value(Y)[:, None], X)[:, 0, :]
    np.testing.assert_allclose(F.gradient(X), g_fd, atol=1e-7)


def test_momentum_dependent_potential_rejected(free):
    with pytest.raises(ValueError, match="q only"):
        mane_perturbation_experiment(free, "p1^2", [1e-2], 0.5)


def test_shifted_scaled_explicit_shift(free):
    F = ShiftedScaledField(free, shift=0.0)
    X = _points(5, 6)
    np.testing.assert_allclose(F.value(X), free.value(X), atol=1e-15)
