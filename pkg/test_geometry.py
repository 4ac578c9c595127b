#!/usr/bin/env python3
"""
Geometry backend tests
Closed-form tensors, atlas handling and curvature on CP^n, products and potentials
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis import curvature_checks  # noqa: E402
from geometry import (ChartPoint, GeometryError, InvalidPointError, PotentialBackend, ProductBackend,  # noqa: E402
                      ProjectiveBackend, build_backend, chart_transition, complex_structure, curvature_extremes,
                      fubini_study_distance, holomorphic_sectional_batch, homogeneous_lift, invariant_report,
                      metric_at, point_from_homogeneous, preferred_chart, sample_points, sectional_curvature_H)
from observables import HermitianOperator, ObservableFunction  # noqa: E402


def _check(checks, name):
    matches = [c for c in checks if c["name"] == name]
    assert matches, f"check {name} missing from {[c['name'] for c in checks]}"
    return matches[0]


def test_fubini_study_metric_on_cp1():
    print("Testing CP^1 metric in the affine chart...")
    backend = ProjectiveBackend(1)
    p = backend.point([0.3, -0.4], 0)
    m = metric_at(backend, p)
    expected = 4.0 / (1.0 + 0.25) ** 2
    assert np.allclose(m.g, expected * np.eye(2), atol=1e-14)
    assert np.allclose(m.omega, m.g @ m.J, atol=1e-14)
    print(f"g = {m.g[0, 0]:.6f} I OK")


def test_complex_structure_squares_to_minus_identity():
    for n in (1, 2, 3):
        J = complex_structure(n)
        assert np.allclose(J @ J, -np.eye(2 * n))
        assert np.allclose(J.T, -J)


def test_algebraic_invariants_on_cp2():
    print("\nTesting invariant report on CP^2...")
    report = invariant_report(ProjectiveBackend(2), count=12, seed=1)
    assert report["backend"] == "cp2"
    assert report["kind"] == "cpn"
    for name in ("metric_symmetric", "metric_positive_definite", "J_squared", "ginv_omega_is_J",
                 "omega_antisymmetric", "riemann_antisymmetric_ab", "riemann_antisymmetric_cd",
                 "riemann_pair_symmetry", "first_bianchi", "christoffel_symmetric", "parallel_J",
                 "metric_compatibility", "closed_form_riemann", "chart_round_trip"):
        check = _check(report["checks"], name)
        assert check["passed"], f"{name}: {check}"
    assert report["passed"], [c["name"] for c in report["checks"] if not c["passed"]]
    print(f"{len(report['checks'])} checks, max |R| = {report['max_abs_riemann']:.3f}")


def test_indefinite_potential_fails_positivity():
    print("\nTesting indefinite Kähler potential...")
    backend = build_backend({"kind": "potential", "n": 1, "potential": "indefinite", "epsilon": 0.25})
    report = invariant_report(backend, count=40, seed=0)
    assert not report["passed"]
    assert not _check(report["checks"], "metric_positive_definite")["passed"]


def test_holomorphic_curvature_is_one_on_cp2():
    checks = curvature_checks(ProjectiveBackend(2), count=16, seed=3)
    for name in ("curvature_finite", "holomorphic_curvature_constant", "bisectional_closed_form",
                 "bisectional_lower_bound"):
        assert _check(checks, name)["passed"], name


def test_sectional_curvature_of_gradient_plane():
    backend = ProjectiveBackend(1)
    H = ObservableFunction.linear(backend, HermitianOperator.diagonal([0.0, 1.0]))
    p = backend.point([0.7, 0.2], 0)
    grad = H.gradients(p.coords[None], [0])[0]
    assert abs(sectional_curvature_H(backend, p, grad) - 1.0) < 1e-10


def test_invariant_report_on_product_with_hamiltonian():
    print("\nTesting invariant report on CP^1 x CP^1...")
    backend = ProductBackend([1, 1])
    H = ObservableFunction.separable_sum(backend, [HermitianOperator.diagonal([0.0, 1.0])] * 2)
    report = invariant_report(backend, count=12, seed=1, H=H)
    assert report["backend"] == "cp1xcp1"
    names = {c["name"] for c in report["checks"]}
    assert {"metric_compatibility", "parallel_J", "curvature_homogeneity", "chart_invariance"} <= names
    assert "closed_form_riemann" not in names
    assert report["passed"], [c["name"] for c in report["checks"] if not c["passed"]]


def test_product_curvature_bounds():
    backend = ProductBackend([1, 1])
    assert backend.backend_id == "cp1xcp1"
    assert backend.n_charts == 4
    H = ObservableFunction.separable_sum(backend, [HermitianOperator.diagonal([0.0, 1.0])] * 2)
    kappa, lam = curvature_extremes(backend, H, 2000, seed=3)
    # K_H = (V1^2 + V2^2) / (V1 + V2)^2 lies in [1/2, 1]
    assert 0.5 - 1e-9 <= kappa < 0.6
    assert 0.8 < lam <= 1.0 + 1e-9
    assert _check(curvature_checks(backend, count=16, seed=2), "product_curvature_bounds")["passed"]


def test_product_curvature_with_one_active_factor():
    print("\nTesting K_H for H acting on one factor...")
    backend = ProductBackend([1, 1])
    H = ObservableFunction.separable_sum(backend, [HermitianOperator.diagonal([0.0, 1.0]),
                                                   HermitianOperator.diagonal([0.0, 0.0])])
    kappa, lam = curvature_extremes(backend, H, 200, seed=1)
    assert kappa == pytest.approx(1.0, abs=1e-8)
    assert lam == pytest.approx(1.0, abs=1e-8)


def test_single_sample_curvature_estimate():
    backend = ProductBackend([1, 1])
    H = ObservableFunction.separable_sum(backend, [HermitianOperator.diagonal([0.0, 1.0])] * 2)
    kappa, lam = curvature_extremes(backend, H, 1, seed=5)
    coords, charts = sample_points(backend, 1, seed=5)
    sampled = holomorphic_sectional_batch(backend, coords, charts, H.gradients(coords, charts))[0]
    assert kappa == lam
    assert kappa == pytest.approx(float(sampled), abs=1e-12)
    with pytest.raises(GeometryError):
        curvature_extremes(backend, H, 0)


def test_flat_potential_has_zero_curvature():
    print("\nTesting flat C^2...")
    backend = PotentialBackend(2, "flat")
    assert backend.n_charts == 1
    checks = curvature_checks(backend, count=8, seed=0)
    flat = _check(checks, "flat_curvature")
    assert flat["passed"], flat
    p = backend.point([0.5, 0.0, 0.0, 0.5])
    # K = |z|^2 gives the Euclidean metric scaled by 4
    assert np.allclose(metric_at(backend, p).g, 4.0 * np.eye(4), atol=1e-12)


def test_orthogonal_states_are_pi_apart():
    backend = ProjectiveBackend(1)
    up = point_from_homogeneous(backend, [np.array([1.0, 0.0])])
    down = point_from_homogeneous(backend, [np.array([0.0, 1.0])])
    assert up.chart == 0 and down.chart == 1
    assert math.isclose(fubini_study_distance(backend, up, down), math.pi, rel_tol=1e-12)
    assert fubini_study_distance(backend, up, up) < 1e-7


def test_point_from_homogeneous_uses_largest_component():
    backend = ProjectiveBackend(2)
    p = point_from_homogeneous(backend, [np.array([0.1, 1.0, 0.2j])])
    assert p.chart == 1
    assert np.allclose(p.coords, [0.1, 0.0, 0.0, 0.2])


def test_homogeneous_lift_round_trip():
    backend = ProductBackend([1, 2])
    coords, charts = sample_points(backend, 5, seed=4)
    for c, ch in zip(coords, charts):
        p = ChartPoint(backend.backend_id, int(ch), c)
        psis = homogeneous_lift(backend, p)
        assert [psi.shape for psi in psis] == [(2,), (3,)]
        q = point_from_homogeneous(backend, [2.0j * psi for psi in psis])
        assert fubini_study_distance(backend, p, q) < 1e-6


def test_chart_transition_and_preferred_chart():
    backend = ProjectiveBackend(1)
    p = backend.point([3.0, 0.0], 0)
    moved = preferred_chart(backend, p)
    assert moved.chart == 1
    assert np.allclose(moved.coords, [1.0 / 3.0, 0.0])
    back = chart_transition(backend, moved, 0)
    assert np.allclose(back.coords, p.coords)


def test_invalid_points_are_rejected():
    backend = ProjectiveBackend(1)
    with pytest.raises(InvalidPointError):
        backend.point([0.0, 0.0, 0.0], 0)
    with pytest.raises(InvalidPointError):
        backend.point([0.0, 0.0], 5)
    with pytest.raises(InvalidPointError):
        backend.validate(ChartPoint("cp2", 0, np.zeros(2)))
    with pytest.raises(GeometryError):
        build_backend({"kind": "torus"})


def main():
    """Run all geometry tests"""
    print("Kähler reduction simulator - geometry tests")
    print("=" * 50)

    tests = [
        ("CP^1 metric", test_fubini_study_metric_on_cp1),
        ("Complex structure", test_complex_structure_squares_to_minus_identity),
        ("CP^2 invariants", test_algebraic_invariants_on_cp2),
        ("Indefinite potential", test_indefinite_potential_fails_positivity),
        ("CP^2 curvature", test_holomorphic_curvature_is_one_on_cp2),
        ("Gradient plane curvature", test_sectional_curvature_of_gradient_plane),
        ("Product bounds", test_product_curvature_bounds),
        ("Product invariants", test_invariant_report_on_product_with_hamiltonian),
        ("One active factor", test_product_curvature_with_one_active_factor),
        ("Single sample", test_single_sample_curvature_estimate),
        ("Flat potential", test_flat_potential_has_zero_curvature),
        ("Orthogonal distance", test_orthogonal_states_are_pi_apart),
        ("Homogeneous chart", test_point_from_homogeneous_uses_largest_component),
        ("Homogeneous lift", test_homogeneous_lift_round_trip),
        ("Chart transition", test_chart_transition_and_preferred_chart),
        ("Invalid points", test_invalid_points_are_rejected),
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
