#!/usr/bin/env python3
"""
Fokker-Planck grid solver tests
Bloch coordinates, conservation, CFL handling and relaxation on the sphere
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis import PASS  # noqa: E402
from dynamics import SdeConfig, run_ensemble  # noqa: E402
from fokker_planck import (FokkerPlanckError, Frame, SphereGrid, bloch_axis, bloch_vector, cfl_limit,  # noqa: E402
                           coarsen, ensemble_histogram, fokker_planck_cp1, solve_fokker_planck, total_variation)
from geometry import ProjectiveBackend  # noqa: E402
from observables import HermitianOperator, ObservableFunction  # noqa: E402

QUBIT = HermitianOperator.diagonal([0.0, 1.0])
PLUS = np.array([1.0, 1.0]) / math.sqrt(2.0)


def test_bloch_coordinates():
    print("Testing Bloch coordinates...")
    assert np.allclose(bloch_vector(np.array([1.0, 0.0])), [[0.0, 0.0, 1.0]])
    assert np.allclose(bloch_vector(PLUS), [[1.0, 0.0, 0.0]])
    assert np.allclose(bloch_vector(np.array([1.0, 1.0j])), [[0.0, 1.0, 0.0]])
    assert np.allclose(bloch_axis(QUBIT), [0.0, 0.0, -0.5])
    assert np.allclose(bloch_axis(HermitianOperator(np.array([[0.0, 1.0], [1.0, 0.0]]))), [1.0, 0.0, 0.0])


def test_grid_geometry():
    grid = SphereGrid(16, 32)
    assert np.sum(grid.areas) * grid.n_phi == pytest.approx(4.0 * math.pi)
    i, j = grid.cell_index(np.array([0.0, math.pi]), np.array([-0.01, 2.0 * math.pi]))
    assert list(i) == [0, 15]
    assert list(j) == [31, 0]
    with pytest.raises(FokkerPlanckError):
        SphereGrid(2, 32)


def test_frame_angles():
    frame = Frame.around(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    theta, phi = frame.angles(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]))
    assert theta[0] == pytest.approx(math.pi / 2.0)
    assert phi[0] == pytest.approx(math.pi / 2.0)
    assert theta[1] == pytest.approx(math.pi)


def test_coarsen_and_total_variation():
    rng = np.random.default_rng(1)
    mass = rng.random((16, 32))
    mass /= mass.sum()
    coarse = coarsen(mass, (4, 8))
    assert coarse.shape == (4, 4)
    assert coarse.sum() == pytest.approx(1.0)
    assert coarse[0, 0] == pytest.approx(mass[:4, :8].sum())
    assert total_variation(mass, mass) == 0.0
    a, b = np.zeros((4, 4)), np.zeros((4, 4))
    a[0, 0], b[3, 3] = 1.0, 1.0
    assert total_variation(a, b) == pytest.approx(1.0)
    with pytest.raises(FokkerPlanckError):
        coarsen(mass, (3, 8))


def test_solver_rejects_bad_input():
    grid = SphereGrid(16, 32)
    limit = cfl_limit(grid, "reduction", 1.0, 0.5)
    with pytest.raises(FokkerPlanckError):
        solve_fokker_planck(QUBIT, PLUS, 1.0, [1.0], "reduction", grid, dt_pde=10.0 * limit)
    with pytest.raises(FokkerPlanckError):
        solve_fokker_planck(QUBIT, PLUS, 1.0, [1.0], "diffusion", grid)
    with pytest.raises(FokkerPlanckError):
        solve_fokker_planck(HermitianOperator.diagonal([0.0, 1.0, 2.0]), np.ones(3), 1.0, [1.0], grid=grid)
    with pytest.raises(FokkerPlanckError):
        solve_fokker_planck(HermitianOperator.diagonal([1.0, 1.0]), PLUS, 1.0, [1.0], "reduction", grid)
    assert math.isinf(cfl_limit(grid, "brownian", 0.0, 0.5))


def test_reduction_conserves_mass_and_concentrates_at_poles():
    print("\nTesting reduction-mode density...")
    grid = SphereGrid(16, 32)
    solution = solve_fokker_planck(QUBIT, PLUS, 1.0, [1.0, 16.0], "reduction", grid)
    assert solution["times"] == [1.0, 16.0]
    for mass in solution["masses"]:
        assert np.sum(mass) == pytest.approx(1.0, abs=1e-10)
    final = solution["masses"][-1]
    caps = np.sum(final[:4]) + np.sum(final[-4:])
    assert caps > 0.6
    # H = diag(0, 1) treats both eigenstates alike, so the hemispheres stay balanced
    assert np.sum(final[:8]) == pytest.approx(0.5, abs=0.05)
    print(f"polar cap mass {caps:.3f}")


def test_brownian_mode_relaxes_to_uniform():
    print("\nTesting brownian mode...")
    grid = SphereGrid(32, 64)
    sde = SdeConfig(sigma=1.0, dt=0.01, horizon=1.0)
    verdict = fokker_planck_cp1(QUBIT, ProjectiveBackend(1).point([0.0, 0.0], 0), sde, mode="brownian", grid=grid)
    assert verdict.status == PASS
    assert list(verdict.details["tv"]) == ["10"]


def test_histogram_needs_recorded_coordinates():
    backend = ProjectiveBackend(1)
    H = ObservableFunction.linear(backend, QUBIT)
    sde = SdeConfig(sigma=0.5, dt=0.01, horizon=0.1, ensemble_size=4)
    stats = run_ensemble(backend, H, backend.point([1.0, 0.0], 0), sde, kappa=1.0, lam=1.0)
    frame = Frame.around(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0]))
    with pytest.raises(FokkerPlanckError):
        ensemble_histogram(stats, backend, frame, SphereGrid(16, 32), 0.1)
    recorded = run_ensemble(backend, H, backend.point([1.0, 0.0], 0), sde.replace(record_coords=True),
                            kappa=1.0, lam=1.0)
    hist = ensemble_histogram(recorded, backend, frame, SphereGrid(16, 32), 0.0)
    assert hist.sum() == pytest.approx(1.0)
    assert np.count_nonzero(hist) == 1


def main():
    """Run all Fokker-Planck tests"""
    print("Kähler reduction simulator - Fokker-Planck tests")
    print("=" * 50)

    tests = [
        ("Bloch coordinates", test_bloch_coordinates),
        ("Grid geometry", test_grid_geometry),
        ("Frame angles", test_frame_angles),
        ("Coarsening and TV", test_coarsen_and_total_variation),
        ("Input checks", test_solver_rejects_bad_input),
        ("Reduction density", test_reduction_conserves_mass_and_concentrates_at_poles),
        ("Brownian relaxation", test_brownian_mode_relaxes_to_uniform),
        ("Ensemble histogram", test_histogram_needs_recorded_coordinates),
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
