"""
Fokker-Planck cross-check on CP^1 (the unit Bloch sphere).

The density is evolved on a latitude-longitude grid in a frame where the
generator has no longitudinal part:
- reduction mode: pole along the Bloch axis of H, longitude co-rotating with
  the Hamiltonian precession; noise and the dispersion drift are meridional.
- brownian mode (mu = 0, h = sigma^2 g): pole at the initial state, zonal start.
Each longitude column then evolves by the same conservative finite-volume
operator in latitude with zero flux through the poles.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from analysis import TestVerdict, _judge
from config import config
from dynamics import EnsembleStats, SdeConfig, reduction_timescale, run_ensemble
from geometry import ChartPoint, ProjectiveBackend, curvature_extremes
from observables import HermitianOperator, ObservableFunction

logger = logging.getLogger(__name__)

MODES = ("reduction", "brownian")
INITIAL_WIDTH = 0.05  # radians, spread of the smooth stand-in for the point mass


class FokkerPlanckError(Exception):
    """Configuration or CFL failure of the grid solver."""


def bloch_vector(psi: np.ndarray) -> np.ndarray:
    psi = np.atleast_2d(psi)
    psi = psi / np.linalg.norm(psi, axis=1, keepdims=True)
    a, b = psi[:, 0], psi[:, 1]
    ab = a.conj() * b
    return np.stack([2.0 * ab.real, 2.0 * ab.imag, np.abs(a) ** 2 - np.abs(b) ** 2], axis=1)


def bloch_axis(H: HermitianOperator) -> np.ndarray:
    """m with H = tr(H)/2 + m . sigma."""
    h = H.entries
    return np.array([h[0, 1].real, -h[0, 1].imag, 0.5 * (h[0, 0] - h[1, 1]).real])


@dataclass
class SphereGrid:
    n_theta: int
    n_phi: int

    def __post_init__(self):
        if self.n_theta < 4 or self.n_phi < 4:
            raise FokkerPlanckError(f"grid {self.n_theta}x{self.n_phi} too coarse")

    @property
    def d_theta(self) -> float:
        return math.pi / self.n_theta

    @property
    def d_phi(self) -> float:
        return 2.0 * math.pi / self.n_phi

    @property
    def theta_faces(self) -> np.ndarray:
        return np.linspace(0.0, math.pi, self.n_theta + 1)

    @property
    def theta_centers(self) -> np.ndarray:
        return (np.arange(self.n_theta) + 0.5) * self.d_theta

    @property
    def phi_centers(self) -> np.ndarray:
        return (np.arange(self.n_phi) + 0.5) * self.d_phi

    @property
    def areas(self) -> np.ndarray:
        faces = self.theta_faces
        return (np.cos(faces[:-1]) - np.cos(faces[1:])) * self.d_phi

    def cell_index(self, theta: np.ndarray, phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        i = np.clip((theta / self.d_theta).astype(int), 0, self.n_theta - 1)
        j = np.mod((np.mod(phi, 2.0 * math.pi) / self.d_phi).astype(int), self.n_phi)
        return i, j


@dataclass
class Frame:
    """Orthonormal (e1, e2, pole); longitude counted from e1 toward e2."""
    e1: np.ndarray
    e2: np.ndarray
    pole: np.ndarray
    rate: float = 0.0  # longitude precession rate removed by co-rotation
    offset: float = 0.0

    @classmethod
    def around(cls, pole: np.ndarray, reference: np.ndarray, rate: float = 0.0, offset: float = 0.0) -> "Frame":
        pole = pole / np.linalg.norm(pole)
        e1 = reference - (reference @ pole) * pole
        if np.linalg.norm(e1) < 1e-12:
            trial = np.eye(3)[int(np.argmin(np.abs(pole)))]
            e1 = trial - (trial @ pole) * pole
        e1 = e1 / np.linalg.norm(e1)
        return cls(e1, np.cross(pole, e1), pole, rate, offset)

    def angles(self, r: np.ndarray, t: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        z = np.clip(r @ self.pole, -1.0, 1.0)
        phi = np.arctan2(r @ self.e2, r @ self.e1) - self.rate * t + self.offset
        return np.arccos(z), np.mod(phi, 2.0 * math.pi)


def _coefficients(mode: str, theta: np.ndarray, sigma: float, m_norm: float) -> Tuple[np.ndarray, np.ndarray]:
    """Meridional drift mu^theta and diffusion h^{theta theta}."""
    if mode == "brownian":
        return np.zeros_like(theta), np.full_like(theta, sigma ** 2)
    s2m2 = sigma ** 2 * m_norm ** 2
    return -0.5 * s2m2 * np.sin(theta) * np.cos(theta), s2m2 * np.sin(theta) ** 2


def cfl_limit(grid: SphereGrid, mode: str, sigma: float, m_norm: float) -> float:
    mu, diff = _coefficients(mode, grid.theta_faces, sigma, m_norm)
    rate = 2.0 * float(np.max(diff)) / grid.d_theta ** 2 + float(np.max(np.abs(mu))) / grid.d_theta
    return math.inf if rate == 0.0 else 1.0 / rate


def _initial_masses(grid: SphereGrid, theta0: float, phi0: float, width: float) -> np.ndarray:
    th = grid.theta_centers[:, None]
    ph = grid.phi_centers[None, :]
    cos_d = np.cos(th) * math.cos(theta0) + np.sin(th) * math.sin(theta0) * np.cos(ph - phi0)
    d = np.arccos(np.clip(cos_d, -1.0, 1.0))
    mass = np.exp(-0.5 * (d / width) ** 2) * grid.areas[:, None]
    total = float(np.sum(mass))
    if not total > 0.0:
        raise FokkerPlanckError("initial density vanishes on the grid")
    return mass / total


def _evolve(grid: SphereGrid, mass: np.ndarray, mode: str, sigma: float, m_norm: float, duration: float,
            dt: float) -> np.ndarray:
    """Explicit conservative update of the columns carrying mass."""
    if duration <= 0.0:
        return mass
    if mass.shape[1] > 1 and np.allclose(mass, mass[:, :1], rtol=1e-12, atol=1e-300):
        column = _evolve(grid, mass[:, :1] * grid.n_phi, mode, sigma, m_norm, duration, dt) / grid.n_phi
        return np.repeat(column, grid.n_phi, axis=1)
    active = np.flatnonzero(np.sum(mass, axis=0) > 1e-14)
    cols = mass[:, active]
    areas = grid.areas[:, None]
    faces = grid.theta_faces[1:-1]
    centers = grid.theta_centers
    mu_f, diff_f = _coefficients(mode, faces, sigma, m_norm)
    _, diff_c = _coefficients(mode, centers, sigma, m_norm)
    sin_f = np.sin(faces)[:, None]
    sin_c = np.sin(centers)[:, None]
    mu_f = mu_f[:, None]
    steps = max(1, int(math.ceil(duration / dt)))
    h = duration / steps
    flux = np.zeros((grid.n_theta + 1, cols.shape[1]))
    for _ in range(steps):
        rho = cols / areas
        if mode == "brownian":
            diffusive = 0.5 * diff_f[:, None] * sin_f * (rho[1:] - rho[:-1]) / grid.d_theta
        else:
            q = sin_c * diff_c[:, None] * rho
            diffusive = 0.5 * (q[1:] - q[:-1]) / grid.d_theta
        upwind = np.where(mu_f > 0.0, rho[:-1], rho[1:])
        flux[1:-1] = grid.d_phi * (sin_f * mu_f * upwind - diffusive)
        cols = cols + h * (flux[:-1] - flux[1:])
    out = np.zeros_like(mass)
    out[:, active] = cols
    return out


def coarsen(mass: np.ndarray, factors: Sequence[int]) -> np.ndarray:
    a, b = factors
    n, m = mass.shape
    if n % a or m % b:
        raise FokkerPlanckError(f"grid {n}x{m} not divisible by {a}x{b}")
    return mass.reshape(n // a, a, m // b, b).sum(axis=(1, 3))


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.abs(p - q)))


def solve_fokker_planck(H: HermitianOperator, psi0: np.ndarray, sigma: float, checkpoints: Sequence[float],
                        mode: str = "reduction", grid: Optional[SphereGrid] = None, dt_pde: Optional[float] = None,
                        width: float = INITIAL_WIDTH) -> Dict[str, object]:
    """Grid masses at each checkpoint plus the frame they are expressed in."""
    if mode not in MODES:
        raise FokkerPlanckError(f"unknown mode {mode!r}, expected one of {MODES}")
    if H.dim != 2:
        raise FokkerPlanckError("the grid solver covers CP^1 only")
    grid = grid or SphereGrid(*config.FP_GRID)
    r0 = bloch_vector(psi0)[0]
    m = bloch_axis(H)
    m_norm = float(np.linalg.norm(m))
    coarse_dphi = 2.0 * math.pi / (grid.n_phi // config.FP_HISTOGRAM_COARSEN[1])
    if mode == "reduction":
        if m_norm < 1e-12:
            raise FokkerPlanckError("H is proportional to the identity; nothing reduces")
        frame = Frame.around(m, r0, rate=2.0 * m_norm, offset=math.pi + 0.5 * coarse_dphi)
    else:
        frame = Frame.around(r0, m if m_norm > 1e-12 else np.array([1.0, 0.0, 0.0]))
    limit = cfl_limit(grid, mode, sigma, m_norm)
    if dt_pde is None:
        dt_pde = config.FP_CFL_SAFETY * limit if math.isfinite(limit) else max(checkpoints)
    elif dt_pde > limit:
        raise FokkerPlanckError(f"dt_pde {dt_pde:.3g} violates the CFL bound {limit:.3g}")
    theta0, phi0 = frame.angles(r0[None])
    mass = _initial_masses(grid, float(theta0[0]), float(phi0[0]), width)
    results: List[np.ndarray] = []
    now = 0.0
    for t in sorted(checkpoints):
        mass = _evolve(grid, mass, mode, sigma, m_norm, t - now, dt_pde)
        now = t
        results.append(mass.copy())
    logger.info("Fokker-Planck %s: grid %dx%d, dt_pde %.3g, %d checkpoints", mode, grid.n_theta, grid.n_phi,
                dt_pde, len(results))
    return {"times": sorted(checkpoints), "masses": results, "frame": frame, "grid": grid, "dt_pde": dt_pde}


def ensemble_histogram(stats: EnsembleStats, backend: ProjectiveBackend, frame: Frame, grid: SphereGrid,
                       t: float) -> np.ndarray:
    if "coords" not in stats.paths:
        raise FokkerPlanckError("ensemble did not record coordinates")
    k = int(np.argmin(np.abs(stats.times - t)))
    psi = backend.homogeneous(stats.paths["coords"][:, k], stats.paths["charts"][:, k])[0]
    theta, phi = frame.angles(bloch_vector(psi), float(stats.times[k]))
    i, j = grid.cell_index(theta, phi)
    hist = np.zeros((grid.n_theta, grid.n_phi))
    np.add.at(hist, (i, j), 1.0)
    return hist / max(psi.shape[0], 1)


def fokker_planck_cp1(H: HermitianOperator, x0: ChartPoint, sde: SdeConfig, mode: str = "reduction",
                      checkpoints: Optional[Sequence[float]] = None, grid: Optional[SphereGrid] = None,
                      dt_pde: Optional[float] = None) -> TestVerdict:
    """PDE density against the trajectory ensemble (reduction) or the uniform density (brownian)."""
    backend = ProjectiveBackend(1)
    backend.validate(x0)
    psi0 = backend.homogeneous(x0.coords[None], np.array([x0.chart]))[0][0]
    obs = ObservableFunction.linear(backend, H)
    grid = grid or SphereGrid(*config.FP_GRID)
    v0 = float(np.real(psi0.conj() @ H.entries @ H.entries @ psi0) / np.vdot(psi0, psi0).real
               - (np.real(psi0.conj() @ H.entries @ psi0) / np.vdot(psi0, psi0).real) ** 2)
    if checkpoints is None:
        if mode == "brownian":
            checkpoints = [10.0 / max(sde.sigma ** 2, 1e-12)]
        else:
            kappa, _ = curvature_extremes(backend, obs, 1)
            tau = reduction_timescale(kappa, sde.sigma, v0)
            if not math.isfinite(tau):
                raise FokkerPlanckError("no reduction: sigma or V0 vanishes")
            checkpoints = [tau / 4.0, tau, 4.0 * tau]
    solution = solve_fokker_planck(H, psi0, sde.sigma, checkpoints, mode, grid, dt_pde)
    coarse = config.FP_HISTOGRAM_COARSEN
    tvs: Dict[str, float] = {}
    if mode == "brownian":
        uniform = grid.areas[:, None] * np.ones((1, grid.n_phi)) / (4.0 * math.pi)
        for t, mass in zip(solution["times"], solution["masses"]):
            tvs[f"{t:.6g}"] = total_variation(coarsen(mass, coarse), coarsen(uniform, coarse))
        return _judge("fokker_planck_brownian", max(tvs.values()) / config.FP_TV_LIMIT,
                      "heat flow on the sphere against the uniform density", tv=tvs)
    horizon = max(checkpoints)
    steps = max(1, int(round(horizon / sde.dt)))
    points = max(1, min(config.OUTPUT_POINTS, steps))
    run = sde.replace(horizon=horizon, record_coords=True, output_points=points)
    stats = run_ensemble(backend, obs, x0, run, kappa=1.0, lam=1.0)
    for t, mass in zip(solution["times"], solution["masses"]):
        hist = ensemble_histogram(stats, backend, solution["frame"], grid, t)
        tvs[f"{t:.6g}"] = total_variation(coarsen(mass, coarse), coarsen(hist, coarse))
    final = solution["masses"][-1]
    north = float(np.sum(final[: grid.n_theta // 2]))
    return _judge("fokker_planck_reduction", max(tvs.values()) / config.FP_TV_LIMIT,
                  "grid density against the ensemble histogram", tv=tvs,
                  hemisphere_mass={"upper_eigenstate": north, "lower_eigenstate": 1.0 - north})
