#!/usr/bin/env python3
"""
Observable tests
Expectation functions, brackets, dispersions and the pointwise identities
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis import FAIL, identity_suite  # noqa: E402
from geometry import PotentialBackend, ProductBackend, ProjectiveBackend, fubini_study_distance  # noqa: E402
from observables import (HermitianOperator, NonHermitianError, ObservableError, ObservableFunction,  # noqa: E402
                         commutator, dispersion, expectation, gradient, hamiltonian_flow, identity_residuals,
                         killing_residual, poisson_bracket, random_hermitian, random_observable,
                         spectral_decomposition)

SIGMA_X = HermitianOperator(np.array([[0.0, 1.0], [1.0, 0.0]]))


def _qubit():
    backend = ProjectiveBackend(1)
    return backend, ObservableFunction.linear(backend, HermitianOperator.diagonal([0.0, 1.0]), label="P1")


def _unit_state(backend, p):
    psi = backend.homogeneous(p.coords[None], [p.chart])[0][0]
    return psi / np.linalg.norm(psi)


def test_non_hermitian_matrix_names_entry():
    print("Testing Hermitian validation...")
    with pytest.raises(NonHermitianError) as excinfo:
        HermitianOperator.from_pairs([[[0.0, 0.0], [1.0, 0.0]], [[2.0, 0.0], [0.0, 0.0]]])
    assert "(0,1)" in str(excinfo.value)
    with pytest.raises(NonHermitianError):
        HermitianOperator.from_pairs([[[1.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]])
    op = HermitianOperator.from_pairs([[[0.0, 0.0], [0.5, -0.5]], [[0.5, 0.5], [1.0, 0.0]]])
    assert op.dim == 2
    assert op.to_pairs()[0][1] == [0.5, -0.5]


def test_spectrum_merges_degenerate_levels():
    backend = ProjectiveBackend(2)
    H = ObservableFunction.linear(backend, HermitianOperator.diagonal([1.0, 1.0, 2.0]))
    spectrum = H.spectrum()
    assert np.allclose(spectrum.eigenvalues, [1.0, 2.0])
    assert spectrum.multiplicities == (2, 1)
    assert spectrum.degenerate == (True, False)
    overlaps = spectrum.overlaps(np.array([1.0, 0.0, 1.0]))
    assert np.allclose(overlaps, [[0.5, 0.5]])
    assert H.spread == pytest.approx(1.0)
    assert H.norm == pytest.approx(2.0)


def test_expectation_and_dispersion_at_equal_superposition():
    print("\nTesting expectation and dispersion on CP^1...")
    backend, H = _qubit()
    p = backend.point([1.0, 0.0], 0)
    assert expectation(H, p) == pytest.approx(0.5, abs=1e-14)
    assert dispersion(H, p) == pytest.approx(0.25, abs=1e-14)
    eigenstate = backend.point([0.0, 0.0], 0)
    assert dispersion(H, eigenstate) == pytest.approx(0.0, abs=1e-15)


def test_dispersion_is_quantum_variance():
    rng = np.random.default_rng(11)
    backend = ProjectiveBackend(2)
    op = random_hermitian(rng, 3)
    H = ObservableFunction.linear(backend, op)
    A = op.entries
    for _ in range(5):
        p = backend.point(rng.uniform(-1.0, 1.0, size=4), int(rng.integers(0, 3)))
        psi = _unit_state(backend, p)
        mean = np.real(psi.conj() @ A @ psi)
        variance = np.real(psi.conj() @ A @ A @ psi) - mean ** 2
        assert expectation(H, p) == pytest.approx(mean, abs=1e-12)
        assert dispersion(H, p) == pytest.approx(variance, abs=1e-10)


def test_poisson_bracket_matches_commutator():
    print("\nTesting Poisson bracket against the commutator...")
    rng = np.random.default_rng(5)
    backend = ProjectiveBackend(2)
    F = ObservableFunction.linear(backend, random_hermitian(rng, 3), label="F")
    G = ObservableFunction.linear(backend, random_hermitian(rng, 3), label="G")
    C = commutator(F, G)
    for _ in range(4):
        p = backend.point(rng.uniform(-1.5, 1.5, size=4), 0)
        assert poisson_bracket(F, G, p) == pytest.approx(expectation(C, p), abs=1e-10)
        assert poisson_bracket(F, G, p) == pytest.approx(-poisson_bracket(G, F, p), abs=1e-12)


def test_commuting_observables():
    backend, H = _qubit()
    H2 = ObservableFunction.linear(backend, HermitianOperator.diagonal([0.0, 4.0]))
    X = ObservableFunction.linear(backend, SIGMA_X)
    assert H.commutes_with(H2)
    assert not H.commutes_with(X)
    p = backend.point([0.4, -0.3], 0)
    assert abs(poisson_bracket(H, H2, p)) < 1e-14


def test_killing_residual_is_small():
    rng = np.random.default_rng(2)
    backend = ProjectiveBackend(2)
    H = ObservableFunction.linear(backend, random_hermitian(rng, 3))
    p = backend.point([0.3, 0.1, -0.2, 0.5], 0)
    assert killing_residual(H, p) < 1e-6


def test_killing_residual_flags_non_observables():
    backend = PotentialBackend(1, "flat")
    p = backend.point([0.3, -0.2])
    # x^2 generates a shear, not an isometry
    shear = ObservableFunction.custom(backend, lambda x: x[0] ** 2, label="shear")
    assert killing_residual(shear, p) > 1e-3
    rotation = ObservableFunction.moment_map(backend, [1.0])
    assert killing_residual(rotation, p) < 1e-6


def test_hamiltonian_flow_preserves_distance():
    rng = np.random.default_rng(3)
    backend = ProjectiveBackend(2)
    H = ObservableFunction.linear(backend, random_hermitian(rng, 3))
    p = backend.point([0.2, 0.1, -0.1, 0.3], 0)
    q = backend.point([-0.4, 0.2, 0.1, 0.0], 0)
    before = fubini_study_distance(backend, p, q)
    after = fubini_study_distance(backend, hamiltonian_flow(H, p, 0.5), hamiltonian_flow(H, q, 0.5))
    assert before > 0.1
    assert after == pytest.approx(before, abs=1e-7)


def test_affine_observable():
    rng = np.random.default_rng(4)
    backend = ProjectiveBackend(2)
    F = ObservableFunction.linear(backend, random_hermitian(rng, 3))
    G = F.affine(-2.5, 0.75)
    assert G.form == "linear"
    for _ in range(3):
        p = backend.point(rng.uniform(-1.0, 1.0, size=4), 0)
        assert expectation(G, p) == pytest.approx(-2.5 * expectation(F, p) + 0.75, abs=1e-12)
        assert np.allclose(gradient(G, p), -2.5 * gradient(F, p), atol=1e-12)
        assert dispersion(G, p) == pytest.approx(6.25 * dispersion(F, p), abs=1e-10)
    flat = PotentialBackend(1, "flat")
    M = ObservableFunction.moment_map(flat, [1.0])
    shifted = M.affine(3.0, -1.0)
    p = flat.point([0.3, -0.2])
    assert expectation(shifted, p) == pytest.approx(3.0 * expectation(M, p) - 1.0, abs=1e-12)
    assert np.allclose(gradient(shifted, p), 3.0 * gradient(M, p), atol=1e-12)


def test_spectral_decomposition_reconstructs_operator():
    rng = np.random.default_rng(6)
    for op in (random_hermitian(rng, 4), HermitianOperator.diagonal([2.0, -1.0, 2.0, 0.5])):
        spectrum = spectral_decomposition(op)
        assert np.all(np.diff(spectrum.eigenvalues) > 0.0)
        rebuilt = sum(value * P for value, P in zip(spectrum.eigenvalues, spectrum.projectors))
        assert np.allclose(rebuilt, op.entries, atol=1e-12)
        assert np.allclose(sum(spectrum.projectors), np.eye(op.dim), atol=1e-12)
        for P, m in zip(spectrum.projectors, spectrum.multiplicities):
            assert np.allclose(P @ P, P, atol=1e-12)
            assert np.trace(P).real == pytest.approx(m)


def test_hamiltonian_flow_rotates_phase():
    print("\nTesting Hamiltonian flow on CP^1...")
    backend, H = _qubit()
    p = backend.point([0.6, 0.0], 0)
    q = hamiltonian_flow(H, p, 0.7)
    expected = 0.6 * np.exp(-0.7j)
    assert q.chart == 0
    assert np.allclose(q.coords, [expected.real, expected.imag], atol=1e-8)
    assert expectation(H, q) == pytest.approx(expectation(H, p), abs=1e-9)


def test_heisenberg_slack_is_nonnegative():
    rng = np.random.default_rng(8)
    backend = ProjectiveBackend(1)
    F = ObservableFunction.linear(backend, random_hermitian(rng, 2))
    G = ObservableFunction.linear(backend, random_hermitian(rng, 2))
    _, H = _qubit()
    report = identity_residuals(F, G, H, backend.point([0.2, 0.5], 0))
    assert report.heisenberg_slack >= -1e-10
    assert report.applicable["heisenberg"]
    assert report.commuting_bracket is None


def test_identity_suite_on_qubit():
    print("\nTesting identity suite on CP^1...")
    _, H = _qubit()
    verdicts = identity_suite(H, count=3, seed=0)
    names = [v.name for v in verdicts]
    assert "killing" in names and "drift_third_vs_curvature" in names
    failed = [v.name for v in verdicts if v.status == FAIL]
    assert not failed, failed
    assert next(v for v in verdicts if v.name == "commuting_bracket").applicable
    print(f"{len(verdicts)} identity verdicts OK")


def test_identity_suite_on_product():
    print("\nTesting identity suite on CP^1 x CP^1...")
    backend = ProductBackend([1, 1])
    Z = HermitianOperator.diagonal([0.0, 1.0])
    H = ObservableFunction.separable_sum(backend, [Z, SIGMA_X])
    verdicts = identity_suite(H, count=3, seed=0)
    assert len(verdicts) == 9
    failed = [v.name for v in verdicts if v.status == FAIL]
    assert not failed, failed
    assert next(v for v in verdicts if v.name == "jacobi").applicable
    print(f"{len(verdicts)} identity verdicts OK")


def test_constructors_check_their_backend():
    with pytest.raises(ObservableError):
        ObservableFunction.linear(ProjectiveBackend(2), SIGMA_X)
    with pytest.raises(ObservableError):
        ObservableFunction.separable_sum(ProductBackend([1, 1]), [SIGMA_X])
    with pytest.raises(ObservableError):
        ObservableFunction.moment_map(PotentialBackend(2, "flat"), [1.0])
    rng = np.random.default_rng(0)
    assert random_observable(ProductBackend([1, 2]), rng).form == "separable_sum"
    assert random_observable(PotentialBackend(1, "flat"), rng).form == "custom"


def test_separable_sum_operator():
    backend = ProductBackend([1, 1])
    Z = HermitianOperator.diagonal([0.0, 1.0])
    H = ObservableFunction.separable_sum(backend, [Z, Z])
    assert np.allclose(np.diag(H.full_operator().entries).real, [0.0, 1.0, 1.0, 2.0])
    p = backend.point([1.0, 0.0, 0.0, 0.0], 0)
    assert expectation(H, p) == pytest.approx(0.5)
    assert dispersion(H, p) == pytest.approx(0.25)


def main():
    """Run all observable tests"""
    print("Kähler reduction simulator - observable tests")
    print("=" * 50)

    tests = [
        ("Hermitian validation", test_non_hermitian_matrix_names_entry),
        ("Spectrum", test_spectrum_merges_degenerate_levels),
        ("Expectation and dispersion", test_expectation_and_dispersion_at_equal_superposition),
        ("Quantum variance", test_dispersion_is_quantum_variance),
        ("Poisson bracket", test_poisson_bracket_matches_commutator),
        ("Commuting observables", test_commuting_observables),
        ("Killing residual", test_killing_residual_is_small),
        ("Killing residual of a shear", test_killing_residual_flags_non_observables),
        ("Flow isometry", test_hamiltonian_flow_preserves_distance),
        ("Affine observable", test_affine_observable),
        ("Spectral decomposition", test_spectral_decomposition_reconstructs_operator),
        ("Hamiltonian flow", test_hamiltonian_flow_rotates_phase),
        ("Heisenberg slack", test_heisenberg_slack_is_nonnegative),
        ("Identity suite", test_identity_suite_on_qubit),
        ("Identity suite on product", test_identity_suite_on_product),
        ("Constructors", test_constructors_check_their_backend),
        ("Separable sum", test_separable_sum_operator),
    ]

    passed = 0
    for test_name, test_func in tests:
        try:
            test_func()
            passed += 1
            print(f"{test_name} PASSED")
        except Exception as e:
            print(f"{test_name} FAILED: {e}")

    print(f"\n{'=' * 50}")
    print(f"Test Results: {passed}/{len(tests)} tests passed")
    return 0 if passed == len(tests) else 1


if __name__ == "__main__":
    sys.exit(main())
