"""
Hilbert-space oracles for the CP^n dynamics.

The reduction SDE lifted to normalized state vectors reads

    d psi = -i H psi dt - (sigma^2 / 8) (H - <H>)^2 psi dt + (sigma / 2) (H - <H>) psi dW

(derivation in docs/lifted_dynamics.md). Its ensemble average obeys the
Lindblad equation with double-commutator constant c = sigma^2 / 8.
"""
from __future__ import annotations

import logging
import math
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy import stats as scistats
from scipy.optimize import minimize_scalar

from analysis import INCONCLUSIVE, TestVerdict, _judge, _skip
from config import config
from dynamics import (BLOWN_UP, NoisePath, SdeConfig, Trajectory, _chunks, _draw_block, _integrate_batch,
                      collapse_epsilon, detect_collapse, noise_generator)
from geometry import ChartPoint, ProjectiveBackend
from observables import HermitianOperator, ObservableFunction

logger = logging.getLogger(__name__)


class OracleError(Exception):
    """Lifted integration or oracle comparison failed."""


def lindblad_constant(sigma: float) -> float:
    return sigma ** 2 / 8.0


def _moments(H: np.ndarray, psi: np.ndarray):
    hpsi = psi @ H.T
    mean = np.real(np.einsum("ni,ni->n", psi.conj(), hpsi))
    centered = hpsi - mean[:, None] * psi
    var = np.real(np.einsum("ni,ni->n", centered.conj(), centered))
    return mean, var, centered


def _lifted_step(H: np.ndarray, psi: np.ndarray, dt: float, dW: np.ndarray, sigma: float, scheme: str):
    mean, var, centered = _moments(H, psi)
    centered2 = centered @ H.T - mean[:, None] * centered
    new = (psi - 1j * (psi @ H.T) * dt - (sigma ** 2 / 8.0) * centered2 * dt
           + (sigma / 2.0) * centered * dW[:, None])
    if scheme == "milstein":
        # (b . d) b for b = (sigma/2)(H - <H>) psi on the unit sphere
        new += 0.5 * (sigma ** 2 / 4.0) * (centered2 - 2.0 * var[:, None] * psi) * (dW ** 2 - dt)[:, None]
    norm = np.linalg.norm(new, axis=1)
    if not np.all(np.isfinite(norm)) or np.any(norm == 0.0):
        raise OracleError("lifted state lost its norm")
    new /= norm[:, None]
    if np.max(np.abs(np.linalg.norm(new, axis=1) - 1.0)) > config.NORM_DRIFT_LIMIT:
        raise OracleError("renormalization drift above limit")
    return new


def _normalized(psi0: np.ndarray) -> np.ndarray:
    psi0 = np.asarray(psi0, dtype=complex).reshape(-1)
    norm = np.linalg.norm(psi0)
    if not norm > 0.0:
        raise OracleError("initial state vector is zero")
    return psi0 / norm


def lifted_oracle(H: HermitianOperator, psi0: np.ndarray, sde: SdeConfig, noise: NoisePath) -> Trajectory:
    """Integrate the lifted SDE along one noise path and project every state to its preferred chart."""
    A = H.entries
    backend = ProjectiveBackend(H.dim - 1)
    psi = _normalized(psi0)[None]
    n_steps = min(sde.n_steps, len(noise))
    states = [psi[0]]
    for k in range(n_steps):
        psi = _lifted_step(A, psi, sde.dt, noise.increments[k:k + 1], sde.sigma, sde.scheme)
        states.append(psi[0])
    states = np.array(states)
    mean, var, _ = _moments(A, states)
    coords, charts = backend.from_homogeneous([states])
    points = [ChartPoint(backend.backend_id, int(c), x) for c, x in zip(charts, coords)]
    q = np.concatenate([[0.0], np.cumsum(0.5 * (var[1:] ** 2 + var[:-1] ** 2) * sde.dt)])
    traj = Trajectory(times=np.arange(n_steps + 1) * sde.dt, points=points, h_series=mean, v_series=var,
                      q_series=q)
    spectrum = ObservableFunction.linear(backend, H).spectrum()
    traj.outcome = detect_collapse(traj, spectrum, collapse_epsilon(sde, float(var[0]), H.norm),
                                   sde.collapse_hold_steps, backend)
    return traj


def run_lifted_ensemble(H: HermitianOperator, psi0: np.ndarray, sde: SdeConfig,
                        count: Optional[int] = None) -> Dict[str, np.ndarray]:
    """Ensemble-mean density matrix on the output grid, streams keyed like run_ensemble."""
    A = H.entries
    count = sde.ensemble_size if count is None else count
    n_steps = sde.n_steps
    grid = np.unique(np.round(np.linspace(0, n_steps, sde.output_points + 1)).astype(int))
    rho = np.zeros((grid.shape[0], H.dim, H.dim), dtype=complex)
    start = _normalized(psi0)
    for lo, hi in _chunks(count):
        generators = [noise_generator(sde.master_seed, i) for i in range(lo, hi)]
        psi = np.repeat(start[None], hi - lo, axis=0)
        block, block_start, pos = np.zeros((hi - lo, 0)), 0, 0
        for k in range(n_steps + 1):
            while pos < grid.shape[0] and grid[pos] == k:
                rho[pos] += np.einsum("ni,nj->ij", psi, psi.conj())
                pos += 1
            if k == n_steps:
                break
            if k - block_start >= block.shape[1]:
                block_start = k
                block = _draw_block(generators, min(config.NOISE_BLOCK, n_steps - k), sde.dt)
            psi = _lifted_step(A, psi, sde.dt, block[:, k - block_start], sde.sigma, sde.scheme)
    return {"times": grid * sde.dt, "rho": rho / count}


def liouvillian(H: np.ndarray, c: float) -> np.ndarray:
    """Row-major superoperator of rho -> -i[H, rho] - c [H, [H, rho]]."""
    d = H.shape[0]
    eye = np.eye(d)
    H2 = H @ H
    return (-1j * (np.kron(H, eye) - np.kron(eye, H.T))
            - c * (np.kron(H2, eye) - 2.0 * np.kron(H, H.T) + np.kron(eye, H2.T)))


def _propagate(H: np.ndarray, c: float, rho0: np.ndarray, times: np.ndarray) -> np.ndarray:
    L = liouvillian(H, c)
    vec = rho0.reshape(-1)
    return np.array([(linalg.expm(L * t) @ vec).reshape(rho0.shape) for t in times])


def fit_lindblad_constant(H: np.ndarray, times: np.ndarray, rho: np.ndarray, upper: float) -> Dict[str, float]:
    def loss(c):
        return float(np.sum(np.abs(_propagate(H, c, rho[0], times) - rho) ** 2))

    result = minimize_scalar(loss, bounds=(0.0, upper), method="bounded", options={"xatol": 1e-8 * upper})
    return {"c": float(result.x), "residual": float(math.sqrt(result.fun / times.shape[0]))}


def lindblad_check(H: HermitianOperator, psi0: np.ndarray, sde: SdeConfig,
                   count: Optional[int] = None) -> TestVerdict:
    """Fitted double-commutator constant against sigma^2 / 8."""
    ens = run_lifted_ensemble(H, psi0, sde, count)
    times, rho = ens["times"], ens["rho"]
    A = H.entries
    derived = lindblad_constant(sde.sigma)
    if derived == 0.0:
        residual = float(np.max(np.abs(_propagate(A, 0.0, rho[0], times) - rho)))
        tol = config.NORM_DRIFT_LIMIT + times[-1] * sde.dt * H.spread ** 2
        return _judge("lindblad", residual / tol, "sigma = 0: ensemble follows von Neumann evolution",
                      derived_c=0.0, residual=residual)
    fit = fit_lindblad_constant(A, times, rho, upper=10.0 * derived)
    details: Dict[str, Any] = {"derived_c": derived, "fitted_c": fit["c"], "fit_residual": fit["residual"]}
    w, v = linalg.eigh(A)
    rho_eig = np.einsum("ia,tij,jb->tab", v.conj(), rho, v)
    off = np.abs(rho_eig[:, 0, -1])
    usable = off > 1e-3 * max(off[0], 1e-300)
    if off[0] > 1e-6 and np.count_nonzero(usable) > 2:
        reg = scistats.linregress(times[usable], np.log(off[usable]))
        details["decay_rate"] = float(-reg.slope)
        details["predicted_decay_rate"] = derived * float(w[-1] - w[0]) ** 2
    rel = abs(fit["c"] - derived) / derived
    return _judge("lindblad", rel / config.LINDBLAD_RTOL,
                  f"fitted c = {fit['c']:.5g} against derived sigma^2/8 = {derived:.5g}", **details)


def _fs_gap(backend: ProjectiveBackend, coords: np.ndarray, charts: np.ndarray, psi: np.ndarray) -> np.ndarray:
    a = backend.homogeneous(coords, charts)[0]
    overlap = np.abs(np.einsum("ni,ni->n", a.conj(), psi)) / (np.linalg.norm(a, axis=1) * np.linalg.norm(psi, axis=1))
    return 2.0 * np.arccos(np.clip(overlap, 0.0, 1.0))


def pathwise_gap(backend: ProjectiveBackend, H: ObservableFunction, x0: ChartPoint, sde: SdeConfig,
                 count: int = 16, refinements: Sequence[int] = (1, 2, 4)) -> Dict[int, float]:
    """Mean over trajectories of the max Fubini-Study gap between intrinsic and lifted paths."""
    op = H.full_operator()
    if op is None or not isinstance(backend, ProjectiveBackend):
        raise OracleError("the lifted oracle needs a linear observable on CP^n")
    finest = max(refinements)
    n_fine = sde.n_steps * finest
    fine = np.stack([NoisePath.generate(sde.master_seed, i, n_fine, sde.dt / finest).increments
                     for i in range(count)])
    psi0 = backend.homogeneous(x0.coords[None], np.array([x0.chart]))[0][0]
    gaps: Dict[int, float] = {}
    for r in refinements:
        noise = fine.reshape(count, -1, finest // r).sum(axis=2)
        run = sde.replace(dt=sde.dt / r, stop_on_collapse=False)
        steps = np.arange(noise.shape[1] + 1)
        intrinsic = _integrate_batch(backend, H, np.repeat(x0.coords[None], count, axis=0),
                                     np.full(count, x0.chart), run, range(count), steps, 0.0, None,
                                     noise=noise, record_coords=True)
        if np.any(intrinsic.outcome == BLOWN_UP):
            raise OracleError("intrinsic integration blew up during the oracle comparison")
        psi = np.repeat(_normalized(psi0)[None], count, axis=0)
        worst = np.zeros(count)
        for k in range(noise.shape[1]):
            psi = _lifted_step(op.entries, psi, run.dt, noise[:, k], run.sigma, run.scheme)
            gap = _fs_gap(backend, intrinsic.coords[:, k + 1], intrinsic.charts[:, k + 1], psi)
            worst = np.maximum(worst, gap)
        gaps[r] = float(np.mean(worst))
        logger.debug("pathwise gap at dt=%.3g: %.3g", run.dt, gaps[r])
    return gaps


def oracle_equivalence(backend: ProjectiveBackend, H: ObservableFunction, x0: ChartPoint, sde: SdeConfig,
                       count: int = 16) -> TestVerdict:
    """Gap ratios under dt halving must sit at 2 +- tolerance (first-order strong agreement)."""
    run = sde if sde.scheme == "milstein" else sde.replace(scheme="milstein")
    gaps = pathwise_gap(backend, H, x0, run, count)
    floor = 1e-13
    if gaps[4] < floor:
        return _skip("oracle_equivalence", INCONCLUSIVE, "gaps at round-off level", gaps=gaps)
    ratios = [gaps[1] / gaps[2], gaps[2] / gaps[4]]
    statistic = max(abs(r - config.ORACLE_RATIO_TARGET) for r in ratios) / config.ORACLE_RATIO_TOLERANCE
    return _judge("oracle_equivalence", statistic,
                  f"gap ratios {ratios[0]:.3f}, {ratios[1]:.3f} under dt halving",
                  gaps={str(k): v for k, v in gaps.items()}, ratios=ratios, scheme=run.scheme)
