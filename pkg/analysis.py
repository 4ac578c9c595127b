"""
Statistical verdicts over ensemble statistics.

Every verdict compares a normalized statistic to a threshold of 1: the
deviation divided by SE_MULTIPLIER standard errors plus an O(dt)
discretization allowance. Verdicts are pure functions of their inputs.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats as scistats

from config import config
from dynamics import EnsembleStats, RestartEnsemble, SdeConfig, coupled_endpoints
from geometry import (ChartPoint, GeometryBackend, PotentialBackend, ProductBackend, bisectional_batch,
                      sample_points)
from observables import (HermitianOperator, ObservableFunction, Spectrum, drift_identity_residuals,
                         identity_residuals, jacobi_residual, killing_residual, random_observable)

logger = logging.getLogger(__name__)

PASS, FAIL, INCONCLUSIVE, NOT_APPLICABLE = "pass", "fail", "inconclusive", "not_applicable"


@dataclass
class TestVerdict:
    name: str
    statistic: float
    threshold: float
    status: str
    narrative: str = ""
    details: Dict[str, Any] = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def passed(self) -> bool:
        return self.status == PASS

    @property
    def applicable(self) -> bool:
        return self.status != NOT_APPLICABLE

    def to_dict(self) -> Dict[str, Any]:
        stat = self.statistic if math.isfinite(self.statistic) else None
        return {"name": self.name, "statistic": stat, "threshold": self.threshold, "status": self.status,
                "narrative": self.narrative, "details": self.details}


def _judge(name: str, statistic: float, narrative: str, threshold: float = 1.0, **details) -> TestVerdict:
    status = PASS if statistic <= threshold else FAIL
    if status == FAIL:
        logger.info("verdict %s failed: statistic %.4g > %.4g", name, statistic, threshold)
    return TestVerdict(name, float(statistic), threshold, status, narrative, dict(details))


def _skip(name: str, status: str, narrative: str, **details) -> TestVerdict:
    if status == INCONCLUSIVE:
        logger.warning("verdict %s inconclusive: %s", name, narrative)
    return TestVerdict(name, float("nan"), 1.0, status, narrative, dict(details))


def _ratio(excess: np.ndarray, scale: np.ndarray, floor: float) -> float:
    """max of excess / scale with non-positive excess counted as 0."""
    excess = np.maximum(np.asarray(excess, dtype=float), 0.0)
    scale = np.maximum(np.asarray(scale, dtype=float), floor)
    return float(np.max(excess / scale)) if excess.size else 0.0


def discretization_allowance(stats: EnsembleStats, power: int = 3, spread: Optional[float] = None) -> np.ndarray:
    """t * dt * spread^power, the Euler-Maruyama bias allowance per recorded time."""
    s = stats.h_spread if spread is None else spread
    return stats.times * stats.dt * s ** power


def _filtration_regression(paths: np.ndarray, times: np.ndarray, allowance: np.ndarray) -> Dict[str, float]:
    """Regress increments on the current value over a coarse sub-grid; slope must vanish."""
    grid = np.unique(np.round(np.linspace(0, times.shape[0] - 1, config.FILTRATION_SUBGRID + 1)).astype(int))
    worst, slopes = 0.0, []
    for a, b in zip(grid[:-1], grid[1:]):
        x, dx = paths[:, a], paths[:, b] - paths[:, a]
        if np.ptp(x) < 1e-12 * max(1.0, float(np.max(np.abs(x)))):
            continue
        fit = scistats.linregress(x, dx)
        if not np.isfinite(fit.stderr):
            continue
        slopes.append(float(fit.slope))
        scale = config.SE_MULTIPLIER * fit.stderr + (allowance[b] - allowance[a]) / max(np.ptp(x), 1e-300) + 1e-15
        worst = max(worst, abs(fit.slope) / scale)
    return {"statistic": worst, "slopes": slopes}


def martingale_test(stats: EnsembleStats, which: str = "H") -> TestVerdict:
    name = f"martingale_{which}"
    if which not in ("H", "F"):
        raise ValueError(f"which must be 'H' or 'F', got {which!r}")
    if which == "F" and not stats.tracked:
        return _skip(name, NOT_APPLICABLE, "no commuting tracked observable")
    usable = stats.ensemble_size - stats.blown_up
    if usable < config.MIN_MARTINGALE_ENSEMBLE:
        return _skip(name, INCONCLUSIVE, f"ensemble of {usable} below {config.MIN_MARTINGALE_ENSEMBLE}")
    if which == "H":
        mean, se, x0, paths = stats.mean_H, stats.se_H, stats.h0, stats.paths.get("h")
        allowance = discretization_allowance(stats)
    else:
        mean, se, x0, paths = stats.mean_F, stats.se_F, stats.f0, stats.paths.get("f")
        allowance = discretization_allowance(stats, 2) * (stats.f_spread or 1.0)
    dev = np.abs(mean - x0)
    mean_stat = _ratio(dev, config.SE_MULTIPLIER * se + allowance, 1e-15)
    regression = {"statistic": 0.0, "slopes": []}
    if paths is not None and paths.shape[1] > 1:
        regression = _filtration_regression(paths, stats.times, allowance)
    statistic = max(mean_stat, regression["statistic"])
    k = int(np.argmax(dev))
    return _judge(name, statistic,
                  f"max |mean {which}_t - {which}_0| = {dev[k]:.3g} at t = {stats.times[k]:.4g}",
                  mean_statistic=mean_stat, regression_statistic=regression["statistic"],
                  slopes=regression["slopes"])


def supermartingale_bound(stats: EnsembleStats, kappa: Optional[float] = None) -> TestVerdict:
    name = "supermartingale_V"
    k = stats.kappa if kappa is None else kappa
    if not k > 0.0:
        return _skip(name, NOT_APPLICABLE, f"kappa = {k:.3g} is not positive")
    allowance = discretization_allowance(stats, 4)
    bound = stats.bound_V(k)
    floor = 1e-15 * max(stats.v0, 1.0)
    bound_stat = _ratio(stats.mean_V - bound, config.SE_MULTIPLIER * stats.se_V + allowance, floor)
    rise = np.diff(stats.mean_V)
    rise_scale = (config.SE_MULTIPLIER * np.sqrt(stats.se_V[1:] ** 2 + stats.se_V[:-1] ** 2)
                  + np.diff(allowance))
    monotone_stat = _ratio(rise, rise_scale, floor)
    xi_min = float(np.min(stats.xi)) if stats.xi.size else 0.0
    xi_stat = 0.0 if xi_min >= -1e-12 else math.inf
    statistic = max(bound_stat, monotone_stat, xi_stat)
    return _judge(name, statistic,
                  f"mean V_t against V0/(1 + kappa sigma^2 V0 t) with kappa = {k:.4g}",
                  kappa=k, bound_statistic=bound_stat, monotone_statistic=monotone_stat, xi_min=xi_min)


def dispersion_supermartingale_F(stats: EnsembleStats) -> TestVerdict:
    name = "supermartingale_VF"
    if not stats.tracked:
        return _skip(name, NOT_APPLICABLE, "no commuting tracked observable")
    allowance = discretization_allowance(stats, 2) * (stats.f_spread or 1.0) ** 2
    floor = 1e-15 * max(stats.vf0 or 0.0, 1.0)
    rise = np.diff(stats.mean_VF)
    scale = config.SE_MULTIPLIER * np.sqrt(stats.se_VF[1:] ** 2 + stats.se_VF[:-1] ** 2) + np.diff(allowance)
    monotone_stat = _ratio(rise, scale, floor)
    start_stat = _ratio(stats.mean_VF - stats.vf0, config.SE_MULTIPLIER * stats.se_VF + allowance, floor)
    return _judge(name, max(monotone_stat, start_stat), "mean V^F_t non-increasing",
                  monotone_statistic=monotone_stat, start_statistic=start_stat)


def _drift_estimate(samples: Dict[float, np.ndarray], horizons) -> Dict[str, float]:
    h, h2 = horizons
    d1, d2 = float(np.mean(samples[h])) / h, float(np.mean(samples[h2])) / h2
    se1 = float(np.std(samples[h], ddof=1)) / math.sqrt(samples[h].size) / h
    se2 = float(np.std(samples[h2], ddof=1)) / math.sqrt(samples[h2].size) / h2
    return {
        "coarse": d1,
        "fine": d2,
        "extrapolated": 2.0 * d2 - d1,
        "se": math.sqrt(4.0 * se2 ** 2 + se1 ** 2),
        "bias": abs(d1 - d2),
    }


def drift_regression_V(restarts: Sequence[RestartEnsemble], which: str = "V") -> TestVerdict:
    """Instantaneous drift of V (or V^F) at each start point against the curvature law."""
    name = f"drift_law_{which}"
    points: List[Dict[str, Any]] = []
    worst, inconclusive = 0.0, []
    for idx, r in enumerate(restarts):
        samples = r.dv if which == "V" else r.dvf
        predicted = r.predicted_V if which == "V" else r.predicted_VF
        if samples is None or predicted is None:
            return _skip(name, NOT_APPLICABLE, "no commuting tracked observable with a regular plane")
        est = _drift_estimate(samples, r.horizons)
        allowance = r.dt * r.h_spread ** 4
        scale = config.SE_MULTIPLIER * est["se"] + allowance + 1e-15
        if est["bias"] > 0.5 * abs(predicted) + scale:
            inconclusive.append(idx)
        stat = abs(est["extrapolated"] - predicted) / scale
        worst = max(worst, stat)
        points.append({"start": r.start.to_dict(), "predicted": predicted, "statistic": stat, **est})
    if not points:
        return _skip(name, INCONCLUSIVE, "no restart ensembles")
    if worst > 1.0:
        return _judge(name, worst, "drift estimate departs from -sigma^2 K V^2", points=points)
    if inconclusive:
        return _skip(name, INCONCLUSIVE, f"horizon too long at start points {inconclusive}", points=points)
    return _judge(name, worst, f"drift law holds at {len(points)} start points", points=points)


def ito_isometry_check(stats: EnsembleStats) -> TestVerdict:
    lhs, rhs = stats.mean_sq_dH, stats.sigma ** 2 * stats.mean_Q
    se = np.sqrt(stats.se_sq_dH ** 2 + (stats.sigma ** 2 * stats.se_Q) ** 2)
    allowance = discretization_allowance(stats, 4)
    floor = 1e-15 * max(stats.v0, 1.0)
    statistic = _ratio(np.abs(lhs - rhs), config.SE_MULTIPLIER * se + allowance, floor)
    return _judge("ito_isometry", statistic, "E[(H_t - H_0)^2] against sigma^2 mean Q_t")


def terminal_variance_check(stats: EnsembleStats, kappa: Optional[float] = None,
                            lam: Optional[float] = None) -> TestVerdict:
    name = "terminal_variance"
    k = stats.kappa if kappa is None else kappa
    l = stats.lam if lam is None else lam
    if not (k > 0.0 and l > 0.0):
        return _skip(name, NOT_APPLICABLE, "curvature extremes are not positive")
    if stats.unresolved_fraction > config.UNRESOLVED_LIMIT:
        return _skip(name, INCONCLUSIVE, f"{100 * stats.unresolved_fraction:.1f}% unresolved at the horizon",
                     unresolved_fraction=stats.unresolved_fraction)
    resolved = stats.resolved
    if resolved == 0:
        return _skip(name, INCONCLUSIVE, "no resolved trajectories")
    from_table = float(np.sum(stats.counts * (stats.levels - stats.h0) ** 2) / resolved)
    se = stats.terminal_sq_se if math.isfinite(stats.terminal_sq_se) else 0.0
    upper, lower = stats.v0 / k, stats.v0 / l
    floor = 1e-12 * max(stats.h_spread ** 2, 1.0)
    scale = config.SE_MULTIPLIER * se
    statistic = max(_ratio(np.array([from_table - upper]), np.array([scale]), floor),
                    _ratio(np.array([lower - from_table]), np.array([scale]), floor))
    return _judge(name, statistic, f"terminal variance {from_table:.4g} within [{lower:.4g}, {upper:.4g}]",
                  terminal_variance=from_table, per_trajectory=stats.terminal_sq_dev, se=se,
                  lower=lower, upper=upper)


def born_frequency_check(stats: EnsembleStats, spectrum: Spectrum, psi0: np.ndarray) -> TestVerdict:
    name = "born_frequencies"
    if stats.unresolved_fraction > config.UNRESOLVED_LIMIT:
        return _skip(name, INCONCLUSIVE, f"{100 * stats.unresolved_fraction:.1f}% unresolved at the horizon")
    resolved = stats.resolved
    if resolved == 0:
        return _skip(name, INCONCLUSIVE, "no resolved trajectories")
    expected = spectrum.overlaps(np.atleast_2d(psi0))[0]
    observed = stats.counts / resolved
    se = np.sqrt(expected * (1.0 - expected) / resolved)
    statistic = _ratio(np.abs(observed - expected), config.SE_MULTIPLIER * se, 1.0 / resolved)
    return _judge(name, statistic, "collapse frequencies against squared projector overlaps",
                  expected=expected.tolist(), observed=observed.tolist())


def weak_convergence_check(backend, H, x0, sde: SdeConfig) -> TestVerdict:
    """Observed weak order of E[H_T], E[V_T] from coupled runs at dt, dt/2, dt/4."""
    runs = coupled_endpoints(backend, H, x0, sde, (1, 2, 4))
    orders, details = [], {}
    for key in ("H", "V"):
        m = {r: float(np.mean(runs[r][key])) for r in (1, 2, 4)}
        d1, d2 = m[1] - m[2], m[2] - m[4]
        noise = 1e-12 * max(1.0, H.spread ** 2)
        if abs(d1) < noise or abs(d2) < noise:
            details[key] = {"means": m, "order": None}
            continue
        order = math.log2(abs(d1 / d2))
        orders.append(order)
        details[key] = {"means": m, "order": order}
    if not orders:
        return _skip("weak_convergence", INCONCLUSIVE, "discretization differences below round-off", **details)
    statistic = max(abs(o - 1.0) for o in orders) / 0.5
    return _judge("weak_convergence", statistic, f"observed weak orders {', '.join(f'{o:.2f}' for o in orders)}",
                  **details)


def summarize(verdicts: Sequence[TestVerdict], strict: bool = False) -> Dict[str, Any]:
    failed = [v.name for v in verdicts if v.status == FAIL]
    inconclusive = [v.name for v in verdicts if v.status == INCONCLUSIVE]
    ok = not failed and not (strict and inconclusive)
    return {"passed": ok, "failed": failed, "inconclusive": inconclusive,
            "total": len(verdicts), "applicable": sum(v.applicable for v in verdicts)}


# ---------------------------------------------------------------------------
# Deterministic suites
# ---------------------------------------------------------------------------

def residual_verdict(name: str, residual: Optional[float], tolerance: float, narrative: str = "",
                     **details) -> TestVerdict:
    """Residual against an absolute tolerance; None means the precondition failed."""
    if residual is None:
        return _skip(name, NOT_APPLICABLE, narrative or "precondition not met", **details)
    if not math.isfinite(residual):
        return TestVerdict(name, math.inf, 1.0, FAIL, narrative or "non-finite residual", dict(details))
    return _judge(name, residual / tolerance, narrative or f"max residual {residual:.3g} (tolerance {tolerance:g})",
                  residual=residual, tolerance=tolerance, **details)


def _commuting_partner(H: ObservableFunction, rng: np.random.Generator) -> ObservableFunction:
    if H.form == "linear":
        A = H.operators[0].entries
        return ObservableFunction.linear(H.backend, HermitianOperator(A @ A), label="H^2")
    if H.form == "separable_sum":
        return ObservableFunction.separable_sum(
            H.backend, [HermitianOperator(op.entries @ op.entries) for op in H.operators], label="sum H_i^2")
    return random_observable(H.backend, rng, label="moment_map")


def sample_chart_points(backend: GeometryBackend, count: int, seed: int) -> List[ChartPoint]:
    coords, charts = sample_points(backend, count, seed)
    targets = backend.preferred_chart(coords, charts)
    coords = backend.transition(coords, charts, targets) if backend.n_charts > 1 else coords
    return [ChartPoint(backend.backend_id, int(c), x) for c, x in zip(targets, coords)]


def identity_suite(H: ObservableFunction, count: int, seed: int = 0,
                   tracked: Optional[ObservableFunction] = None) -> List[TestVerdict]:
    """Observable identities at `count` sampled points, one verdict per identity (max residual)."""
    backend = H.backend
    tol = config.IDENTITY_TOLERANCES
    rng = np.random.default_rng(seed)
    F = tracked if tracked is not None else random_observable(backend, rng, label="F")
    G = random_observable(backend, rng, label="G")
    C = _commuting_partner(H, rng)
    matrix_forms = all(o.form != "custom" for o in (F, G, H))
    scale = max(1.0, H.spread ** 4, F.spread ** 4)
    worst: Dict[str, float] = {k: 0.0 for k in ("killing", "adler_horwitz", "commuting_bracket",
                                                  "third_derivative", "jacobi", "energy_ito", "energy_curvature",
                                                  "tracked_curvature")}
    heisenberg = math.inf
    seen_tracked = False
    for p in sample_chart_points(backend, count, seed):
        report = identity_residuals(F, G, H, p)
        worst["adler_horwitz"] = max(worst["adler_horwitz"], report.adler_horwitz)
        worst["third_derivative"] = max(worst["third_derivative"], report.third_derivative)
        heisenberg = min(heisenberg, report.heisenberg_slack)
        partner = identity_residuals(C, G, H, p).commuting_bracket
        worst["commuting_bracket"] = max(worst["commuting_bracket"], partner or 0.0)
        worst["killing"] = max(worst["killing"], *(killing_residual(o, p) for o in (H, F, G)))
        if matrix_forms:
            worst["jacobi"] = max(worst["jacobi"], jacobi_residual(F, G, H, p))
        drift = drift_identity_residuals(H, p, C)
        worst["energy_ito"] = max(worst["energy_ito"], drift["energy_ito_vs_third"])
        worst["energy_curvature"] = max(worst["energy_curvature"], drift["energy_third_vs_curvature"])
        if drift["tracked_ito_vs_curvature"] is not None:
            seen_tracked = True
            worst["tracked_curvature"] = max(worst["tracked_curvature"], drift["tracked_ito_vs_curvature"])
    where = f"{count} points on {backend.backend_id}"
    return [
        residual_verdict("killing", worst["killing"], tol["killing"], f"symmetrized covariant derivative, {where}"),
        residual_verdict("adler_horwitz", worst["adler_horwitz"], tol["adler_horwitz"] * scale,
                         f"Hessian-gradient identity, {where}"),
        residual_verdict("commuting_bracket", worst["commuting_bracket"], tol["commuting_bracket"] * scale,
                         f"{{H, V^F}} for F commuting with H, {where}"),
        residual_verdict("third_derivative_curvature", worst["third_derivative"],
                         tol["third_derivative"] * scale,
                         f"third covariant derivative against curvature, {where}"),
        residual_verdict("heisenberg", max(0.0, -heisenberg), -tol["heisenberg"],
                         f"min V^F V^G - {{F,G}}^2 = {heisenberg:.3g}", min_slack=heisenberg),
        residual_verdict("jacobi", worst["jacobi"] if matrix_forms else None, tol["jacobi"] * scale,
                         f"Jacobi identity, {where}" if matrix_forms else "needs matrix observables"),
        residual_verdict("drift_ito_vs_third", worst["energy_ito"], tol["drift_identity"] * scale,
                         f"Ito drift of V against the third-derivative form, {where}"),
        residual_verdict("drift_third_vs_curvature", worst["energy_curvature"], tol["drift_identity"] * scale,
                         f"third-derivative form against -K_H V^2, {where}"),
        residual_verdict("drift_tracked_vs_curvature", worst["tracked_curvature"] if seen_tracked else None,
                         tol["drift_identity"] * scale, f"drift of V^F against -K_FH V^F V^H, {where}"
                         if seen_tracked else "no regular commuting pair"),
    ]


def curvature_checks(backend: GeometryBackend, count: int, seed: int = 0,
                     groups: int = 4) -> List[Dict[str, Any]]:
    """K_H and K_FH at sampled (point, random observable) pairs against their closed forms."""
    tol = config.IDENTITY_TOLERANCES
    rng = np.random.default_rng(seed + 1)
    coords, charts = sample_points(backend, count, seed + 1)
    k_h, k_fh, closed = [], [], []
    for idx in np.array_split(np.arange(count), max(1, min(groups, count))):
        if idx.size == 0:
            continue
        c, ch = coords[idx], charts[idx]
        H, F = random_observable(backend, rng), random_observable(backend, rng)
        g, _, J = backend.tensors(c, ch)
        r = backend.riemann(c, ch)
        dH, dF = H.gradients(c, ch), F.gradients(c, ch)
        k_h.append(bisectional_batch(r, g, J, dH, dH))
        k_fh.append(bisectional_batch(r, g, J, dF, dH))
        X, Y = np.linalg.solve(g, dF[..., None])[..., 0], np.linalg.solve(g, dH[..., None])[..., 0]
        JY = np.einsum("nab,nb->na", J, Y)
        gxy = np.einsum("na,nab,nb->n", X, g, Y)
        gxjy = np.einsum("na,nab,nb->n", X, g, JY)
        cos2 = (gxy ** 2 + gxjy ** 2) / (np.einsum("na,na->n", dF, X) * np.einsum("na,na->n", dH, Y))
        closed.append(0.5 * (1.0 + cos2))
    k_h, k_fh, closed = np.concatenate(k_h), np.concatenate(k_fh), np.concatenate(closed)
    ok = np.isfinite(k_h) & np.isfinite(k_fh)
    checks = [{"name": "curvature_finite", "statistic": float(np.count_nonzero(~ok)), "threshold": 0.0,
               "passed": bool(np.all(ok))}]
    k_h, k_fh, closed = k_h[ok], k_fh[ok], closed[ok]
    if k_h.size == 0:
        return checks
    checks.append({"name": "holomorphic_curvature_range", "statistic": float(np.min(k_h)),
                   "threshold": float(np.max(k_h)), "passed": True})
    constant = backend.constant_holomorphic_curvature
    if constant is not None:
        dev = float(np.max(np.abs(k_h - constant)))
        checks.append({"name": "holomorphic_curvature_constant", "statistic": dev,
                       "threshold": tol["holomorphic_constant"], "passed": dev <= tol["holomorphic_constant"]})
        dev = float(np.max(np.abs(k_fh - constant * closed)))
        checks.append({"name": "bisectional_closed_form", "statistic": dev,
                       "threshold": tol["holomorphic_constant"], "passed": dev <= tol["holomorphic_constant"]})
        low = float(np.min(k_fh))
        checks.append({"name": "bisectional_lower_bound", "statistic": low, "threshold": 0.5 * constant,
                       "passed": low >= 0.5 * constant - tol["holomorphic_constant"]})
    elif isinstance(backend, ProductBackend):
        lo, hi = 1.0 / len(backend.factors), 1.0
        excess = float(max(lo - np.min(k_h), np.max(k_h) - hi, 0.0))
        checks.append({"name": "product_curvature_bounds", "statistic": excess,
                       "threshold": tol["holomorphic_constant"], "passed": excess <= tol["holomorphic_constant"]})
    elif isinstance(backend, PotentialBackend) and backend.potential_name == "flat":
        dev = float(np.max(np.abs(k_h)))
        checks.append({"name": "flat_curvature", "statistic": dev, "threshold": tol["holomorphic_constant"],
                       "passed": dev <= tol["holomorphic_constant"]})
    return checks
