#!/usr/bin/env python3
"""
Hilbert-space oracle tests
Lifted state-vector dynamics, the Lindblad superoperator and the pathwise comparison
"""
import math
import os
import sys

import numpy as np
import pytest
from scipy import linalg

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis import PASS  # noqa: E402
from dynamics import NoisePath, SdeConfig  # noqa: E402
from geometry import PotentialBackend, ProjectiveBackend, fubini_study_distance, point_from_homogeneous  # noqa: E402
from observables import HermitianOperator, ObservableFunction  # noqa: E402
from oracles import (OracleError, fit_lindblad_constant, lifted_oracle, lindblad_check,  # noqa: E402
                     lindblad_constant, liouvillian, pathwise_gap)

QUBIT = HermitianOperator.diagonal([0.0, 1.0])
PLUS = np.array([1.0, 1.0]) / math.sqrt(2.0)


def _evolve(H, c, rho0, times):
    L = liouvillian(H, c)
    return np.array([(linalg.expm(L * t) @ rho0.reshape(-1)).reshape(rho0.shape) for t in times])


def test_lindblad_constant():
    assert lindblad_constant(0.5) == pytest.approx(0.03125)
    assert lindblad_constant(0.0) == 0.0


def test_liouvillian_dephases_coherences():
    print("Testing Lindblad superoperator...")
    rho0 = np.outer(PLUS, PLUS.conj()).astype(complex)
    rho = _evolve(QUBIT.entries, 0.1, rho0, [2.0])[0]
    assert np.allclose(np.diag(rho).real, [0.5, 0.5])
    assert abs(rho[0, 1]) == pytest.approx(0.5 * math.exp(-0.2))
    assert rho[0, 1] == pytest.approx(0.5 * math.exp(-0.2) * np.exp(2.0j))
    assert np.trace(rho).real == pytest.approx(1.0)


def test_fit_recovers_constant():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    H = 0.5 * (m + m.conj().T)
    psi = rng.normal(size=3) + 1j * rng.normal(size=3)
    psi /= np.linalg.norm(psi)
    times = np.linspace(0.0, 3.0, 16)
    rho = _evolve(H, 0.07, np.outer(psi, psi.conj()), times)
    fit = fit_lindblad_constant(H, times, rho, upper=1.0)
    assert fit["c"] == pytest.approx(0.07, abs=1e-5)
    assert fit["residual"] < 1e-6


def test_zero_noise_lifted_path_is_unitary():
    print("\nTesting lifted oracle at sigma = 0...")
    sde = SdeConfig(sigma=0.0, dt=0.001, horizon=1.0)
    traj = lifted_oracle(QUBIT, PLUS, sde, NoisePath.zeros(sde.n_steps, sde.dt))
    backend = ProjectiveBackend(1)
    expected = point_from_homogeneous(backend, [linalg.expm(-1j * QUBIT.entries) @ PLUS])
    assert len(traj.points) == sde.n_steps + 1
    assert fubini_study_distance(backend, traj.points[-1], expected) < 2e-3
    assert abs(traj.h_series[-1] - 0.5) < 1e-3
    assert traj.outcome == "unresolved"


def test_lifted_path_with_noise_stays_normalized():
    sde = SdeConfig(sigma=1.0, dt=0.002, horizon=2.0, master_seed=9)
    traj = lifted_oracle(QUBIT, PLUS, sde, NoisePath.generate(9, 0, sde.n_steps, sde.dt))
    assert np.all(np.isfinite(traj.h_series))
    assert np.all((traj.h_series >= -1e-12) & (traj.h_series <= 1.0 + 1e-12))
    assert np.all(traj.v_series <= 0.25 + 1e-12)
    assert np.all(np.diff(traj.q_series) >= 0.0)
    with pytest.raises(OracleError):
        lifted_oracle(QUBIT, np.zeros(2), sde, NoisePath.zeros(sde.n_steps, sde.dt))


def test_lindblad_check_without_noise():
    sde = SdeConfig(sigma=0.0, dt=0.001, horizon=1.0, output_points=10)
    verdict = lindblad_check(QUBIT, PLUS, sde, count=8)
    assert verdict.status == PASS
    assert verdict.details["derived_c"] == 0.0


def test_lindblad_check_recovers_sigma_squared_over_eight():
    print("\nTesting fitted Lindblad constant...")
    sde = SdeConfig(sigma=1.0, dt=0.005, horizon=4.0, output_points=20, master_seed=21)
    verdict = lindblad_check(QUBIT, PLUS, sde, count=1000)
    fitted = verdict.details["fitted_c"]
    assert abs(fitted - 0.125) / 0.125 < 0.3
    print(f"fitted c = {fitted:.4f}, derived 0.125")


def test_pathwise_gap_shrinks_with_step():
    print("\nTesting pathwise gap under refinement...")
    backend = ProjectiveBackend(1)
    H = ObservableFunction.linear(backend, QUBIT)
    sde = SdeConfig(sigma=0.5, dt=0.01, horizon=1.0, scheme="milstein", master_seed=5)
    gaps = pathwise_gap(backend, H, backend.point([1.0, 0.0], 0), sde, count=8)
    assert set(gaps) == {1, 2, 4}
    assert gaps[1] > gaps[2] > gaps[4] > 0.0
    flat = PotentialBackend(1, "flat")
    moment = ObservableFunction.moment_map(flat, [1.0])
    with pytest.raises(OracleError):
        pathwise_gap(flat, moment, flat.point([0.1, 0.0]), sde, count=2)


def main():
    """Run all oracle tests"""
    print("Kähler reduction simulator - oracle tests")
    print("=" * 50)

    tests = [
        ("Lindblad constant", test_lindblad_constant),
        ("Liouvillian", test_liouvillian_dephases_coherences),
        ("Constant fit", test_fit_recovers_constant),
        ("Unitary lifted path", test_zero_noise_lifted_path_is_unitary),
        ("Noisy lifted path", test_lifted_path_with_noise_stays_normalized),
        ("Lindblad at sigma = 0", test_lindblad_check_without_noise),
        ("Lindblad constant fit", test_lindblad_check_recovers_sigma_squared_over_eight),
        ("Pathwise gap", test_pathwise_gap_shrinks_with_step),
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
