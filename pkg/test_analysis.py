#!/usr/bin/env python3
"""
Verdict tests
Normalized statistics on hand-built and small simulated ensembles
"""
import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from analysis import (FAIL, INCONCLUSIVE, NOT_APPLICABLE, PASS, TestVerdict, born_frequency_check,  # noqa: E402
                      dispersion_supermartingale_F, drift_regression_V, ito_isometry_check, martingale_test,
                      residual_verdict, summarize, supermartingale_bound, terminal_variance_check)
from dynamics import EnsembleStats, RestartEnsemble, SdeConfig, run_ensemble  # noqa: E402
from geometry import ProductBackend, ProjectiveBackend  # noqa: E402
from observables import HermitianOperator, ObservableFunction  # noqa: E402


def _stats(**overrides):
    """Hand-built qubit ensemble: H0 = 0.5, V0 = 0.25, levels 0 and 1."""
    times = np.linspace(0.0, 4.0, 5)
    v0 = 0.25
    bound = v0 / (1.0 + 0.25 * v0 * times)
    values = dict(
        times=times, sigma=0.5, dt=0.01, h0=0.5, v0=v0,
        mean_H=np.full(5, 0.5), se_H=np.full(5, 0.01),
        mean_V=0.9 * bound, se_V=np.full(5, 0.001),
        mean_Q=np.zeros(5), se_Q=np.zeros(5), mean_sq_dH=np.zeros(5), se_sq_dH=np.zeros(5),
        levels=np.array([0.0, 1.0]), counts=np.array([480, 520]),
        unresolved=0, blown_up=0, ensemble_size=1000,
        kappa=1.0, lam=1.0, tau=16.0, eta=np.zeros(5), xi=np.zeros(5),
        terminal_sq_dev=0.25, terminal_sq_se=0.0, epsilon=2.5e-7,
    )
    values.update(overrides)
    return EnsembleStats(**values)


def _psi0():
    return np.array([1.0, 1.0]) / math.sqrt(2.0)


def test_summarize_counts_statuses():
    print("Testing verdict summary...")
    verdicts = [TestVerdict("a", 0.1, 1.0, PASS), TestVerdict("b", math.nan, 1.0, INCONCLUSIVE),
                TestVerdict("c", math.nan, 1.0, NOT_APPLICABLE)]
    overview = summarize(verdicts)
    assert overview["passed"]
    assert overview["inconclusive"] == ["b"]
    assert overview["total"] == 3 and overview["applicable"] == 2
    assert not summarize(verdicts, strict=True)["passed"]
    verdicts.append(TestVerdict("d", 3.0, 1.0, FAIL))
    assert summarize(verdicts)["failed"] == ["d"]
    assert not summarize(verdicts)["passed"]
    assert verdicts[1].to_dict()["statistic"] is None


def test_residual_verdict():
    assert residual_verdict("x", None, 1e-6).status == NOT_APPLICABLE
    assert residual_verdict("x", math.inf, 1e-6).status == FAIL
    ok = residual_verdict("x", 5e-7, 1e-6)
    assert ok.status == PASS and ok.statistic == pytest.approx(0.5)
    assert residual_verdict("x", 2e-6, 1e-6).status == FAIL


def test_born_frequencies():
    spectrum = ObservableFunction.linear(ProjectiveBackend(1), HermitianOperator.diagonal([0.0, 1.0])).spectrum()
    close = born_frequency_check(_stats(), spectrum, _psi0())
    assert close.status == PASS
    assert close.details["expected"] == pytest.approx([0.5, 0.5])
    skewed = born_frequency_check(_stats(counts=np.array([600, 400])), spectrum, _psi0())
    assert skewed.status == FAIL
    open_ended = born_frequency_check(_stats(counts=np.array([440, 460]), unresolved=100), spectrum, _psi0())
    assert open_ended.status == INCONCLUSIVE


def test_terminal_variance():
    # every resolved qubit trajectory ends 0.5 away from H0, so the variance is exactly V0
    assert terminal_variance_check(_stats()).status == PASS
    assert terminal_variance_check(_stats(kappa=0.0, lam=0.0)).status == NOT_APPLICABLE
    assert terminal_variance_check(_stats(), kappa=2.0, lam=2.0).status == FAIL
    assert terminal_variance_check(_stats(unresolved=200)).status == INCONCLUSIVE


def test_supermartingale_bound():
    print("\nTesting supermartingale bound...")
    below = supermartingale_bound(_stats())
    assert below.status == PASS
    above = supermartingale_bound(_stats(mean_V=np.full(5, 0.25)))
    assert above.status == FAIL
    assert supermartingale_bound(_stats(kappa=0.0)).status == NOT_APPLICABLE
    assert supermartingale_bound(_stats(xi=np.array([0.0, -1.0, -1.0, -1.0, -1.0]))).status == FAIL


def test_martingale_preconditions():
    assert martingale_test(_stats(ensemble_size=50)).status == INCONCLUSIVE
    assert martingale_test(_stats(), "F").status == NOT_APPLICABLE
    assert dispersion_supermartingale_F(_stats()).status == NOT_APPLICABLE
    assert martingale_test(_stats()).status == PASS
    shifted = _stats(mean_H=np.array([0.5, 0.52, 0.55, 0.6, 0.7]))
    assert martingale_test(shifted).status == FAIL
    with pytest.raises(ValueError):
        martingale_test(_stats(), "G")


def _restart(k_h):
    backend = ProjectiveBackend(1)
    wiggle = np.tile([1e-4, -1e-4], 50)
    return RestartEnsemble(
        start=backend.point([1.0, 0.0], 0), sigma=1.0, dt=1e-4, horizons=(0.1, 0.05), v0=0.25, k_h=k_h,
        dv={0.1: -0.00625 + wiggle, 0.05: -0.003125 + wiggle},
    )


def test_drift_regression():
    assert drift_regression_V([_restart(1.0)]).status == PASS
    assert drift_regression_V([_restart(1.0), _restart(2.0)]).status == FAIL
    assert drift_regression_V([_restart(1.0)], "VF").status == NOT_APPLICABLE
    assert drift_regression_V([]).status == INCONCLUSIVE


def test_verdicts_on_simulated_qubit():
    print("\nTesting verdicts on a simulated ensemble...")
    backend = ProjectiveBackend(1)
    H = ObservableFunction.linear(backend, HermitianOperator.diagonal([0.0, 1.0]))
    sde = SdeConfig(sigma=0.5, dt=0.01, horizon=4.0, ensemble_size=400, master_seed=3, output_points=20)
    stats = run_ensemble(backend, H, backend.point([1.0, 0.0], 0), sde, kappa=1.0, lam=1.0)
    assert supermartingale_bound(stats).status == PASS
    assert martingale_test(stats).statistic < 2.0
    assert ito_isometry_check(stats).statistic < 2.0
    assert np.all(stats.xi >= 0.0)
    print(f"mean V_T = {stats.mean_V[-1]:.4f}, bound {stats.bound_V()[-1]:.4f}")


def test_verdicts_on_product_ensemble():
    print("\nTesting verdicts on a CP^1 x CP^1 ensemble...")
    backend = ProductBackend([1, 1])
    Z = HermitianOperator.diagonal([0.0, 1.0])
    H = ObservableFunction.separable_sum(backend, [Z, Z])
    sde = SdeConfig(sigma=2.0, dt=0.005, horizon=16.0, ensemble_size=300, master_seed=13,
                    collapse_epsilon=1e-4, collapse_hold_steps=20, output_points=40)
    # K_H lies in [1/2, 1] for a separable sum on two factors
    stats = run_ensemble(backend, H, backend.point([1.0, 0.0, 1.0, 0.0], 0), sde, kappa=0.5, lam=1.0)
    assert stats.v0 == pytest.approx(0.5)
    assert stats.tau == pytest.approx(1.0)
    assert stats.unresolved_fraction < 0.05
    assert np.allclose(stats.levels, [0.0, 1.0, 2.0])
    assert np.all(np.abs(stats.frequencies - [0.25, 0.5, 0.25]) < 0.1)
    bound = supermartingale_bound(stats, 0.5)
    assert bound.status == PASS, bound.narrative
    terminal = terminal_variance_check(stats, 0.5, 1.0)
    assert terminal.details["lower"] == pytest.approx(0.5)
    assert terminal.details["upper"] == pytest.approx(1.0)
    # Born outcomes give E[(H_T - H_0)^2] = V0, the lower end of [V0, 2 V0]
    variance = terminal.details["terminal_variance"]
    assert 0.9 * stats.v0 <= variance <= 2.0 * stats.v0
    print(f"terminal variance {variance:.4f}, V0 {stats.v0:.3f}")


def test_zero_noise_martingale_is_exact():
    backend = ProjectiveBackend(1)
    H = ObservableFunction.linear(backend, HermitianOperator.diagonal([0.0, 1.0]))
    sde = SdeConfig(sigma=0.0, dt=0.01, horizon=1.0, ensemble_size=120, output_points=10)
    stats = run_ensemble(backend, H, backend.point([0.5, 0.5], 0), sde, kappa=1.0, lam=1.0)
    assert math.isinf(stats.tau)
    assert martingale_test(stats).status == PASS
    assert stats.resolved == 0


def main():
    """Run all verdict tests"""
    print("Kähler reduction simulator - verdict tests")
    print("=" * 50)

    tests = [
        ("Summary", test_summarize_counts_statuses),
        ("Residual verdict", test_residual_verdict),
        ("Born frequencies", test_born_frequencies),
        ("Terminal variance", test_terminal_variance),
        ("Supermartingale bound", test_supermartingale_bound),
        ("Martingale preconditions", test_martingale_preconditions),
        ("Drift regression", test_drift_regression),
        ("Simulated qubit", test_verdicts_on_simulated_qubit),
        ("Product ensemble", test_verdicts_on_product_ensemble),
        ("Zero noise", test_zero_noise_martingale_is_exact),
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
