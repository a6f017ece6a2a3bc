import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contmon.core_ops import (
    DimensionMismatchError,
    InvalidStateError,
    build_standard_ops,
    dissipator,
    expectation,
    measurement_superop,
    min_eigenvalue,
    validate_state,
)

from conftest import random_density_matrix


def test_dissipator_decay_from_excited(qubit_ops, excited):
    out = dissipator(qubit_ops["sigma_minus"], excited)
    np.testing.assert_allclose(out, np.diag([-1.0, 1.0]), atol=1e-15)


def test_dissipator_dark_state(qubit_ops, ground):
    out = dissipator(qubit_ops["sigma_minus"], ground)
    np.testing.assert_allclose(out, np.zeros((2, 2)), atol=1e-15)


@pytest.mark.parametrize("theta", [0.0, np.pi / 4, np.pi / 2, 1.3, 0.7])
def test_dissipator_phase_invariance(qubit_ops, theta):
    rng = np.random.default_rng(7)
    rho = random_density_matrix(rng)
    sm = qubit_ops["sigma_minus"]
    np.testing.assert_allclose(
        dissipator(sm * np.exp(1j * theta), rho), dissipator(sm, rho), atol=1e-14
    )


def test_dissipator_traceless_and_hermitian(qubit_ops):
    rng = np.random.default_rng(3)
    for _ in range(20):
        rho = random_density_matrix(rng, dim=4)
        op = rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4))
        out = dissipator(op, rho)
        assert abs(np.trace(out)) < 1e-12
        np.testing.assert_allclose(out, out.conj().T, atol=1e-12)


def test_dissipator_dimension_mismatch(qubit_ops):
    with pytest.raises(DimensionMismatchError):
        dissipator(qubit_ops["sigma_minus"], np.eye(3, dtype=complex) / 3)


def test_measurement_superop_on_excited(qubit_ops, excited):
    out = measurement_superop(qubit_ops["sigma_minus"], excited)
    np.testing.assert_allclose(out, np.array([[0, 1], [1, 0]]), atol=1e-15)


def test_measurement_superop_on_mixed(qubit_ops):
    out = measurement_superop(qubit_ops["sigma_minus"], np.eye(2, dtype=complex) / 2)
    np.testing.assert_allclose(out, np.array([[0, 0.5], [0.5, 0]]), atol=1e-15)


def test_measurement_superop_zero_operator(qubit_ops, excited):
    out = measurement_superop(np.zeros((2, 2), dtype=complex), excited)
    np.testing.assert_allclose(out, np.zeros((2, 2)), atol=1e-15)


def test_measurement_superop_traceless(qubit_ops):
    rng = np.random.default_rng(11)
    rho = random_density_matrix(rng)
    out = measurement_superop(qubit_ops["sigma_minus"], rho)
    assert abs(np.trace(out)) < 1e-12


def test_measurement_superop_is_nonlinear(qubit_ops):
    # H[A](alpha rho) != alpha H[A] rho because of the expectation-value term
    rng = np.random.default_rng(5)
    rho = random_density_matrix(rng)
    sm = qubit_ops["sigma_minus"]
    lhs = measurement_superop(sm, 2.0 * rho, check_trace=False)
    rhs = 2.0 * measurement_superop(sm, rho, check_trace=False)
    assert np.max(np.abs(lhs - rhs)) > 1e-3


def test_measurement_superop_rejects_unnormalized(qubit_ops):
    with pytest.raises(InvalidStateError):
        measurement_superop(qubit_ops["sigma_minus"], np.diag([2.0, 0.0]).astype(complex))


def test_expectation_examples(qubit_ops, excited):
    assert expectation(excited, qubit_ops["sigma_z"]) == pytest.approx(1.0)
    assert expectation(np.eye(2, dtype=complex) / 2, qubit_ops["sigma_x"]) == pytest.approx(0.0)
    number = qubit_ops["sigma_plus"] @ qubit_ops["sigma_minus"]
    assert expectation(excited, number) == pytest.approx(1.0)


def test_expectation_real_for_hermitian(qubit_ops):
    rng = np.random.default_rng(2)
    rho = random_density_matrix(rng)
    val = expectation(rho, qubit_ops["sigma_y"])
    assert abs(val.imag) < 1e-12


def test_qubit_basis_convention(qubit_ops):
    # (|e>, |g>) ordering: sigma_minus lowers e -> g
    np.testing.assert_array_equal(qubit_ops["sigma_minus"], np.array([[0, 0], [1, 0]]))


def test_boson_ladder_entries():
    ops = build_standard_ops("boson", 3)
    assert ops["a"][0, 1] == pytest.approx(1.0)
    assert ops["a"][1, 2] == pytest.approx(np.sqrt(2.0))


def test_boson_commutator_truncation():
    # oracle: direct matrix product of the constructed quadratures
    ops = build_standard_ops("boson", 8)
    comm = ops["q"] @ ops["p"] - ops["p"] @ ops["q"]
    np.testing.assert_allclose(np.diag(comm)[:7], 1j * np.ones(7), atol=1e-12)
    # truncation corrupts the last diagonal entry
    assert abs(np.diag(comm)[7] - 1j) > 1.0
    off_diag = comm - np.diag(np.diag(comm))
    np.testing.assert_allclose(off_diag, 0, atol=1e-12)


def test_boson_number_spectrum():
    ops = build_standard_ops("boson", 6)
    spectrum = np.sort(np.linalg.eigvalsh(ops["a_dag"] @ ops["a"]))
    np.testing.assert_allclose(spectrum, np.arange(6), atol=1e-12)


def test_boson_dim_too_small():
    with pytest.raises(ValueError):
        build_standard_ops("boson", 1)


def test_validate_state_perfect(excited):
    diag = validate_state(excited)
    assert diag.hermiticity_defect == 0
    assert diag.trace_defect == 0
    assert diag.min_eigenvalue == pytest.approx(0.0, abs=1e-15)
    assert diag.is_physical()


def test_validate_state_trace_defect():
    diag = validate_state(np.diag([1.1, 0.0]).astype(complex))
    assert diag.trace_defect == pytest.approx(0.1)
    assert not diag.is_physical()


def test_validate_state_negative_eigenvalue():
    rho = np.array([[0.5, 0.6], [0.6, 0.5]], dtype=complex)
    diag = validate_state(rho)
    assert diag.min_eigenvalue == pytest.approx(-0.1)
    assert not diag.is_physical()


def test_truncation_leak_flag():
    ops = build_standard_ops("boson", 4)
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = 1.0
    assert not validate_state(rho).truncation_leak()
    leaky = np.zeros((4, 4), dtype=complex)
    leaky[0, 0] = 1.0 - 1e-5
    leaky[3, 3] = 1e-5  # population in the top Fock level beyond 1e-6
    assert validate_state(leaky).truncation_leak()
    assert ops["n"][3, 3].real == 3.0


def test_unknown_operator_set_kind():
    with pytest.raises(ValueError, match="unknown operator set"):
        build_standard_ops("qutrit")


def test_min_eigenvalue_2x2_matches_eigvalsh():
    rng = np.random.default_rng(9)
    batch = np.stack([random_density_matrix(rng) for _ in range(64)])
    fast = min_eigenvalue(batch)
    slow = np.linalg.eigvalsh(batch)[:, 0]
    np.testing.assert_allclose(fast, slow, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), theta=st.floats(0, 2 * np.pi))
def test_dissipator_phase_invariance_property(seed, theta):
    rng = np.random.default_rng(seed)
    rho = random_density_matrix(rng)
    op = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
    np.testing.assert_allclose(
        dissipator(op * np.exp(1j * theta), rho), dissipator(op, rho), atol=1e-12
    )


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_superoperators_traceless_property(seed):
    rng = np.random.default_rng(seed)
    rho = random_density_matrix(rng, dim=3)
    op = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    assert abs(np.trace(dissipator(op, rho))) < 1e-12
    assert abs(np.trace(measurement_superop(op, rho))) < 1e-12
