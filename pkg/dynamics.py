"""
Energy-driven reduction dynamics as a covariant Ito diffusion in chart coordinates.

Drift and volatility of one step:

    mu^a    = 2 omega^ab grad_b H - 1/4 sigma^2 grad^a V - 1/2 sigma^2 Gamma^a_bc grad^b H grad^c H
    sigma^a = sigma grad^a H

Trajectories are integrated in vectorized chunks. Each trajectory draws its
increments from its own counter-based stream keyed by (master_seed, index),
so results do not depend on chunk scheduling or thread count.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import cumulative_trapezoid

from config import config
from geometry import ChartPoint, GeometryBackend, curvature_extremes, holomorphic_sectional_batch, preferred_chart
from observables import ObservableFunction, Spectrum, joint_state
from utils.numerics import directional_difference

logger = logging.getLogger(__name__)

SCHEMES = ("euler_maruyama", "milstein")
# milstein only drives the pathwise oracle comparison
ENSEMBLE_SCHEMES = ("euler_maruyama",)
UNRESOLVED = -1
BLOWN_UP = -2

Outcome = Union[int, str]


class DynamicsError(Exception):
    """Base class for integration failures."""


class BlowUpError(DynamicsError):
    def __init__(self, message: str, last_state: Optional[ChartPoint] = None):
        super().__init__(message)
        self.last_state = last_state


class SimulationConfigError(DynamicsError, ValueError):
    pass


@dataclass
class SdeConfig:
    sigma: float
    dt: float
    horizon: float
    scheme: str = "euler_maruyama"
    collapse_epsilon: Optional[float] = None  # None -> COLLAPSE_EPSILON_FACTOR * V0
    collapse_hold_steps: int = config.COLLAPSE_HOLD_STEPS
    master_seed: int = 0
    ensemble_size: int = 1000
    output_points: int = config.OUTPUT_POINTS
    threads: int = config.DEFAULT_THREADS
    stop_on_collapse: bool = True
    record_coords: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.sigma >= 0.0 and math.isfinite(self.sigma)):
            raise SimulationConfigError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not self.dt > 0.0:
            raise SimulationConfigError(f"dt must be > 0, got {self.dt}")
        if not self.horizon > 0.0:
            raise SimulationConfigError(f"horizon must be > 0, got {self.horizon}")
        if self.dt >= self.horizon:
            raise SimulationConfigError(f"dt {self.dt} must be below horizon {self.horizon}")
        if self.scheme not in SCHEMES:
            raise SimulationConfigError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        if self.collapse_hold_steps < 1:
            raise SimulationConfigError("collapse_hold_steps must be >= 1")
        if self.ensemble_size < 1:
            raise SimulationConfigError("ensemble_size must be >= 1")
        if self.output_points < 1:
            raise SimulationConfigError("output_points must be >= 1")
        if self.collapse_epsilon is not None and not self.collapse_epsilon > 0.0:
            raise SimulationConfigError("collapse_epsilon must be > 0")
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise SimulationConfigError("master_seed must be an unsigned 64-bit integer")

    @property
    def n_steps(self) -> int:
        return max(1, int(round(self.horizon / self.dt)))

    def replace(self, **changes: Any) -> "SdeConfig":
        values = asdict(self)
        values.update(changes)
        return SdeConfig(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def reduction_timescale(kappa: float, sigma: float, v0: float) -> float:
    """tau = 1 / (kappa sigma^2 V0); infinite when nothing reduces."""
    rate = kappa * sigma ** 2 * v0
    return 1.0 / rate if rate > 0.0 else math.inf


def default_dt(h_norm: float, tau: float) -> float:
    """min(DT_ROTATION / ||H||, tau / DT_TAU_DIVISOR)."""
    rotation = config.DT_ROTATION / h_norm if h_norm > 0.0 else math.inf
    reduction = tau / config.DT_TAU_DIVISOR if math.isfinite(tau) else math.inf
    dt = min(rotation, reduction)
    return dt if math.isfinite(dt) else config.DT_ROTATION


def noise_generator(master_seed: int, index: int) -> np.random.Generator:
    """Independent Philox stream for trajectory `index`."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(seq))


def _draw_block(generators: Sequence[np.random.Generator], size: int, dt: float) -> np.ndarray:
    return np.stack([gen.standard_normal(size) for gen in generators]) * math.sqrt(dt)


@dataclass(frozen=True)
class NoisePath:
    increments: np.ndarray
    dt: float

    @classmethod
    def generate(cls, master_seed: int, index: int, n_steps: int, dt: float) -> "NoisePath":
        """Same block layout the ensemble integrator consumes."""
        gen = noise_generator(master_seed, index)
        blocks = []
        for start in range(0, n_steps, config.NOISE_BLOCK):
            blocks.append(_draw_block([gen], min(config.NOISE_BLOCK, n_steps - start), dt)[0])
        return cls(np.concatenate(blocks), float(dt))

    @classmethod
    def zeros(cls, n_steps: int, dt: float) -> "NoisePath":
        return cls(np.zeros(n_steps), float(dt))

    def __len__(self) -> int:
        return self.increments.shape[0]

    def coarsen(self, factor: int) -> "NoisePath":
        """Sum adjacent increments: the same Brownian path at step dt * factor."""
        usable = (len(self) // factor) * factor
        return NoisePath(self.increments[:usable].reshape(-1, factor).sum(axis=1), self.dt * factor)


@dataclass
class Trajectory:
    times: np.ndarray
    points: List[ChartPoint]
    h_series: np.ndarray
    v_series: np.ndarray
    q_series: np.ndarray
    outcome: Outcome = "unresolved"
    vf_series: Optional[np.ndarray] = None
    f_series: Optional[np.ndarray] = None
    collapse_time: Optional[float] = None
    chart_switches: int = 0


# ---------------------------------------------------------------------------
# Coefficients
# ---------------------------------------------------------------------------

def _coefficients(backend: GeometryBackend, H: ObservableFunction, coords: np.ndarray, charts: np.ndarray,
                  sigma: float) -> Dict[str, np.ndarray]:
    g, omega, _ = backend.tensors(coords, charts)
    ginv = np.linalg.inv(g)
    value, dH, hess = H.value_gradient_hessian(coords, charts)
    gamma = backend.christoffels(coords, charts)
    cov_hess = hess - np.einsum("ncab,nc->nab", gamma, dH)
    up = np.einsum("nab,nb->na", ginv, dH)
    omega_up = np.einsum("nac,ncd,ndb->nab", ginv, omega, ginv)
    dV = 2.0 * np.einsum("nab,nb->na", cov_hess, up)
    s2 = sigma ** 2
    drift = (2.0 * np.einsum("nab,nb->na", omega_up, dH)
             - 0.25 * s2 * np.einsum("nab,nb->na", ginv, dV)
             - 0.5 * s2 * np.einsum("nabc,nb,nc->na", gamma, up, up))
    return {
        "drift": drift,
        "vol": sigma * up,
        "H": value,
        "V": np.einsum("na,na->n", dH, up),
        "dH": dH,
    }


def _volatility(backend, H, coords, charts, sigma) -> np.ndarray:
    g = backend.tensors(coords, charts)[0]
    return sigma * np.linalg.solve(g, H.gradients(coords, charts)[..., None])[..., 0]


def coordinate_drift(backend: GeometryBackend, H: ObservableFunction, p: ChartPoint, sigma: float) -> np.ndarray:
    backend.validate(p)
    return _coefficients(backend, H, p.coords[None], np.array([p.chart]), sigma)["drift"][0]


def volatility_vector(backend: GeometryBackend, H: ObservableFunction, p: ChartPoint, sigma: float) -> np.ndarray:
    backend.validate(p)
    return _volatility(backend, H, p.coords[None], np.array([p.chart]), sigma)[0]


def _advance(backend, H, coords, charts, dt, dW, sigma, scheme, coeffs=None):
    """One batched step; returns (coords, charts, blown mask, switched mask)."""
    if coeffs is None:
        coeffs = _coefficients(backend, H, coords, charts, sigma)
    vol = coeffs["vol"]
    new = coords + coeffs["drift"] * dt + vol * dW[:, None]
    if scheme == "milstein" and sigma > 0.0:
        dvol = directional_difference(lambda x: _volatility(backend, H, x, charts, sigma), coords, vol)
        new = new + 0.5 * dvol * (dW ** 2 - dt)[:, None]
    blown = ~np.all(np.isfinite(new), axis=1) | np.any(np.abs(new) > config.BLOWUP_RADIUS, axis=1)
    new_charts = np.array(charts, dtype=int, copy=True)
    switched = backend.needs_switch(np.where(blown[:, None], 0.0, new)) & ~blown
    if np.any(switched):
        target = backend.preferred_chart(new[switched], new_charts[switched])
        moved = target != new_charts[switched]
        rows = np.flatnonzero(switched)[moved]
        if rows.size:
            new[rows] = backend.transition(new[rows], new_charts[rows], target[moved])
            new_charts[rows] = target[moved]
        switched[:] = False
        switched[rows] = True
    return new, new_charts, blown, switched


def step(backend: GeometryBackend, H: ObservableFunction, state: ChartPoint, dt: float, dW: float,
         sigma: float, scheme: str = "euler_maruyama") -> ChartPoint:
    """x' = x + mu dt + b dW, then the chart-switch rule."""
    if not dt > 0.0:
        raise SimulationConfigError(f"dt must be > 0, got {dt}")
    backend.validate(state)
    new, charts, blown, _ = _advance(backend, H, state.coords[None], np.array([state.chart]), dt,
                                     np.array([dW], dtype=float), sigma, scheme)
    if blown[0]:
        raise BlowUpError(f"step from {state.coords} left the coordinate domain", last_state=state)
    return ChartPoint(backend.backend_id, int(charts[0]), new[0])


# ---------------------------------------------------------------------------
# Collapse
# ---------------------------------------------------------------------------

def collapse_epsilon(sde: SdeConfig, v0: float, h_norm: float) -> float:
    if sde.collapse_epsilon is not None:
        return float(sde.collapse_epsilon)
    return config.COLLAPSE_EPSILON_FACTOR * max(v0, config.COLLAPSE_FLOOR * h_norm ** 2)


def _labels(backend: GeometryBackend, H: ObservableFunction, spectrum: Optional[Spectrum],
            coords: np.ndarray, charts: np.ndarray) -> np.ndarray:
    if spectrum is None:
        return np.zeros(coords.shape[0], dtype=int)
    return spectrum.label(joint_state(backend, coords, charts))


def _level_values(spectrum: Optional[Spectrum], labels: np.ndarray, h_at_collapse: np.ndarray) -> np.ndarray:
    if spectrum is None:
        return h_at_collapse
    return spectrum.eigenvalues[labels]


def cluster_levels(values: np.ndarray, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    """Group terminal values of a matrix-free observable into levels (tolerance 1e-3 * scale)."""
    if values.size == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    order = np.argsort(values)
    tol = 1e-3 * max(scale, 1e-12)
    levels, index = [], np.empty(values.size, dtype=int)
    members: List[List[float]] = []
    for k in order:
        if members and values[k] - members[-1][-1] <= tol:
            members[-1].append(values[k])
        else:
            members.append([values[k]])
        index[k] = len(members) - 1
    levels = [float(np.mean(m)) for m in members]
    return np.array(levels), index


def detect_collapse(traj: Trajectory, spectrum: Optional[Spectrum], epsilon: float, hold_steps: int,
                    backend: Optional[GeometryBackend] = None) -> Outcome:
    """Label of the first run of hold_steps samples with V below epsilon, else "unresolved".

    The label is an index into spectrum.eigenvalues (ascending, degenerate levels merged), so the
    collapsed eigenvalue is spectrum.eigenvalues[label]. The state at the end of the run picks the
    projector with the largest overlap. Without a spectrum every collapse is labelled 0.
    """
    below = traj.v_series < epsilon
    run = 0
    for k, flag in enumerate(below):
        run = run + 1 if flag else 0
        if run >= hold_steps:
            if spectrum is None:
                return 0
            if backend is None:
                raise DynamicsError("labelling a collapse needs the backend")
            p = traj.points[k]
            return int(spectrum.label(joint_state(backend, p.coords[None], np.array([p.chart])))[0])
    return "unresolved"


# ---------------------------------------------------------------------------
# Batched integrator
# ---------------------------------------------------------------------------

@dataclass
class _BatchResult:
    h: np.ndarray
    v: np.ndarray
    q: np.ndarray
    f: Optional[np.ndarray]
    vf: Optional[np.ndarray]
    k: np.ndarray
    outcome: np.ndarray
    terminal: np.ndarray
    collapse_step: np.ndarray
    switches: np.ndarray
    coords: Optional[np.ndarray] = None
    charts: Optional[np.ndarray] = None


def _curvature(backend, coords, charts, dH) -> np.ndarray:
    constant = backend.constant_holomorphic_curvature
    if constant is not None:
        return np.full(coords.shape[0], constant)
    return holomorphic_sectional_batch(backend, coords, charts, dH)


def _integrate_batch(backend: GeometryBackend, H: ObservableFunction, coords0: np.ndarray, charts0: np.ndarray,
                     sde: SdeConfig, indices: Sequence[int], record_steps: np.ndarray, epsilon: float,
                     spectrum: Optional[Spectrum], track_F: Optional[ObservableFunction] = None,
                     noise: Optional[np.ndarray] = None, record_coords: bool = False) -> _BatchResult:
    """Integrate len(indices) trajectories; scalars recorded at record_steps (ascending, starts at 0)."""
    n = len(indices)
    n_steps = int(record_steps[-1])
    coords = np.array(coords0, dtype=float, copy=True)
    charts = np.array(charts0, dtype=int, copy=True)
    n_rec = record_steps.shape[0]
    rec = {name: np.zeros((n, n_rec)) for name in ("h", "v", "q", "k")}
    if track_F is not None:
        rec["f"] = np.zeros((n, n_rec))
        rec["vf"] = np.zeros((n, n_rec))
    coords_rec = np.zeros((n, n_rec, coords.shape[1])) if record_coords else None
    charts_rec = np.zeros((n, n_rec), dtype=int) if record_coords else None

    generators = [noise_generator(sde.master_seed, i) for i in indices] if noise is None else None
    block = np.zeros((n, 0))
    block_start = 0

    active = np.ones(n, dtype=bool)
    blown = np.zeros(n, dtype=bool)
    hold = np.zeros(n, dtype=int)
    collapse_step = np.full(n, -1, dtype=int)
    outcome = np.full(n, UNRESOLVED, dtype=int)
    terminal = np.full(n, np.nan)
    switches = np.zeros(n, dtype=int)
    q = np.zeros(n)
    last = {}

    def snapshot(coeffs, rows):
        last.setdefault("H", np.zeros(n))[rows] = coeffs["H"]
        last.setdefault("V", np.zeros(n))[rows] = coeffs["V"]
        if track_F is not None:
            fv, fg, _ = track_F.value_gradient_hessian(coords[rows], charts[rows])
            g = backend.tensors(coords[rows], charts[rows])[0]
            last.setdefault("F", np.zeros(n))[rows] = fv
            last.setdefault("VF", np.zeros(n))[rows] = np.einsum(
                "na,na->n", fg, np.linalg.solve(g, fg[..., None])[..., 0])

    all_rows = np.arange(n)
    coeffs = _coefficients(backend, H, coords, charts, sde.sigma)
    snapshot(coeffs, all_rows)
    rec_pos = 0

    def record(k_step):
        nonlocal rec_pos
        while rec_pos < n_rec and record_steps[rec_pos] == k_step:
            rec["h"][:, rec_pos] = last["H"]
            rec["v"][:, rec_pos] = last["V"]
            rec["q"][:, rec_pos] = q
            rec["k"][:, rec_pos] = _curvature(backend, coords, charts, coeffs["dH"])
            if track_F is not None:
                rec["f"][:, rec_pos] = last["F"]
                rec["vf"][:, rec_pos] = last["VF"]
            if coords_rec is not None:
                coords_rec[:, rec_pos] = coords
                charts_rec[:, rec_pos] = charts
            rec_pos += 1

    def freeze_rest():
        nonlocal rec_pos
        rec["k"][:, rec_pos:] = _curvature(backend, coords, charts, coeffs["dH"])[:, None]
        for name, key in (("h", "H"), ("v", "V"), ("f", "F"), ("vf", "VF")):
            if name in rec:
                rec[name][:, rec_pos:] = last[key][:, None]
        rec["q"][:, rec_pos:] = q[:, None]
        if coords_rec is not None:
            coords_rec[:, rec_pos:] = coords[:, None]
            charts_rec[:, rec_pos:] = charts[:, None]
        rec_pos = n_rec

    record(0)
    for k in range(n_steps):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            freeze_rest()
            break
        if noise is None and k - block_start >= block.shape[1]:
            block_start = k
            block = _draw_block(generators, min(config.NOISE_BLOCK, n_steps - k), sde.dt)
        dW = noise[:, k] if noise is not None else block[:, k - block_start]
        sub = {name: value[rows] for name, value in coeffs.items()}
        new, new_charts, bad, switched = _advance(backend, H, coords[rows], charts[rows], sde.dt, dW[rows],
                                                  sde.sigma, sde.scheme, sub)
        if np.any(bad):
            bad_rows = rows[bad]
            blown[bad_rows] = True
            active[bad_rows] = False
            outcome[bad_rows] = BLOWN_UP
            logger.warning("%d trajectories blew up at step %d", bad_rows.size, k + 1)
        good = rows[~bad]
        coords[good] = new[~bad]
        charts[good] = new_charts[~bad]
        switches[good] += switched[~bad]
        v_prev = last["V"][good].copy()
        if good.size:
            fresh = _coefficients(backend, H, coords[good], charts[good], sde.sigma)
            for name in coeffs:
                coeffs[name][good] = fresh[name]
            snapshot(fresh, good)
            q[good] += 0.5 * (v_prev ** 2 + last["V"][good] ** 2) * sde.dt
            below = last["V"][good] < epsilon
            hold[good] = np.where(below, hold[good] + 1, 0)
            done = good[hold[good] >= sde.collapse_hold_steps]
            done = done[collapse_step[done] < 0]
            if done.size:
                collapse_step[done] = k + 1
                labels = _labels(backend, H, spectrum, coords[done], charts[done])
                outcome[done] = labels
                terminal[done] = _level_values(spectrum, labels, last["H"][done])
                if sde.stop_on_collapse:
                    active[done] = False
        record(k + 1)

    return _BatchResult(
        h=rec["h"], v=rec["v"], q=rec["q"], f=rec.get("f"), vf=rec.get("vf"), k=rec["k"],
        outcome=outcome, terminal=terminal, collapse_step=collapse_step, switches=switches,
        coords=coords_rec, charts=charts_rec,
    )


def _prepare(backend: GeometryBackend, H: ObservableFunction, x0: ChartPoint,
             track_F: Optional[ObservableFunction]) -> ChartPoint:
    backend.validate(x0)
    if H.backend_id != backend.backend_id:
        raise SimulationConfigError(f"H lives on {H.backend_id}, not {backend.backend_id}")
    if track_F is not None and not track_F.commutes_with(H):
        raise SimulationConfigError(f"tracked observable {track_F.label!r} does not commute with H")
    start = preferred_chart(backend, x0)
    if start.chart != x0.chart:
        logger.info("initial state moved from chart %d to chart %d", x0.chart, start.chart)
    return start


def _spectrum_of(H: ObservableFunction) -> Optional[Spectrum]:
    return H.spectrum() if H.full_operator() is not None else None


def simulate_trajectory(backend: GeometryBackend, H: ObservableFunction, x0: ChartPoint, sde: SdeConfig,
                        noise: NoisePath, track_F: Optional[ObservableFunction] = None) -> Trajectory:
    """Single path recorded at every step; stops early on confirmed collapse when configured."""
    start = _prepare(backend, H, x0, track_F)
    n_steps = min(sde.n_steps, len(noise))
    if abs(noise.dt - sde.dt) > 1e-15 * max(1.0, sde.dt):
        raise SimulationConfigError(f"noise path step {noise.dt} differs from dt {sde.dt}")
    spectrum = _spectrum_of(H)
    v0 = float(_coefficients(backend, H, start.coords[None], np.array([start.chart]), sde.sigma)["V"][0])
    epsilon = collapse_epsilon(sde, v0, H.norm)
    result = _integrate_batch(backend, H, start.coords[None], np.array([start.chart]), sde, [0],
                              np.arange(n_steps + 1), epsilon, spectrum, track_F,
                              noise=noise.increments[None, :n_steps], record_coords=True)
    if result.outcome[0] == BLOWN_UP:
        # blown rows keep their last valid coordinates
        last = ChartPoint(backend.backend_id, int(result.charts[0, -1]), result.coords[0, -1])
        raise BlowUpError("trajectory left the coordinate domain", last_state=last)
    stop = int(result.collapse_step[0]) if (sde.stop_on_collapse and result.collapse_step[0] >= 0) else n_steps
    sl = slice(0, stop + 1)
    points = [ChartPoint(backend.backend_id, int(c), x) for c, x in zip(result.charts[0, sl], result.coords[0, sl])]
    outcome: Outcome = int(result.outcome[0]) if result.outcome[0] >= 0 else "unresolved"
    return Trajectory(
        times=np.arange(stop + 1) * sde.dt,
        points=points,
        h_series=result.h[0, sl],
        v_series=result.v[0, sl],
        q_series=result.q[0, sl],
        outcome=outcome,
        vf_series=None if result.vf is None else result.vf[0, sl],
        f_series=None if result.f is None else result.f[0, sl],
        collapse_time=None if result.collapse_step[0] < 0 else float(result.collapse_step[0] * sde.dt),
        chart_switches=int(result.switches[0]),
    )


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------

def _mean_se(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    n = x.shape[0]
    mean = np.mean(x, axis=0)
    se = np.std(x, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return mean, se


@dataclass
class EnsembleStats:
    times: np.ndarray
    sigma: float
    dt: float
    h0: float
    v0: float
    mean_H: np.ndarray
    se_H: np.ndarray
    mean_V: np.ndarray
    se_V: np.ndarray
    mean_Q: np.ndarray
    se_Q: np.ndarray
    mean_sq_dH: np.ndarray
    se_sq_dH: np.ndarray
    levels: np.ndarray
    counts: np.ndarray
    unresolved: int
    blown_up: int
    ensemble_size: int
    kappa: float
    lam: float
    tau: float
    eta: np.ndarray
    xi: np.ndarray
    terminal_sq_dev: float
    terminal_sq_se: float
    epsilon: float
    h_spread: float = 1.0
    f_spread: Optional[float] = None
    f0: Optional[float] = None
    vf0: Optional[float] = None
    mean_F: Optional[np.ndarray] = None
    se_F: Optional[np.ndarray] = None
    mean_VF: Optional[np.ndarray] = None
    se_VF: Optional[np.ndarray] = None
    paths: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.blown_up <= config.BLOWUP_FRACTION_LIMIT * self.ensemble_size

    @property
    def resolved(self) -> int:
        return int(np.sum(self.counts))

    @property
    def frequencies(self) -> np.ndarray:
        usable = self.ensemble_size - self.blown_up
        return self.counts / usable if usable else np.zeros_like(self.counts, dtype=float)

    @property
    def unresolved_fraction(self) -> float:
        usable = self.ensemble_size - self.blown_up
        return self.unresolved / usable if usable else 1.0

    @property
    def tracked(self) -> bool:
        return self.mean_F is not None

    def bound_V(self, kappa: Optional[float] = None) -> np.ndarray:
        k = self.kappa if kappa is None else kappa
        return self.v0 / (1.0 + k * self.sigma ** 2 * self.v0 * self.times)

    def rows(self) -> List[Dict[str, float]]:
        bound = self.bound_V() if self.kappa > 0 else np.full_like(self.times, np.nan)
        return [
            {"t": float(t), "mean_H": float(mh), "se_H": float(sh), "mean_V": float(mv), "se_V": float(sv),
             "mean_Q": float(mq), "bound_V": float(b)}
            for t, mh, sh, mv, sv, mq, b in zip(self.times, self.mean_H, self.se_H, self.mean_V, self.se_V,
                                                self.mean_Q, bound)
        ]

    def summary(self) -> Dict[str, Any]:
        return {
            "ensemble_size": self.ensemble_size,
            "sigma": self.sigma,
            "dt": self.dt,
            "H0": self.h0,
            "V0": self.v0,
            "kappa": self.kappa,
            "lambda": self.lam,
            "tau": self.tau if math.isfinite(self.tau) else None,
            "collapse_epsilon": self.epsilon,
            "outcomes": [{"level": float(lv), "count": int(c), "frequency": float(fq)}
                         for lv, c, fq in zip(self.levels, self.counts, self.frequencies)],
            "unresolved": self.unresolved,
            "blown_up": self.blown_up,
            "valid": self.valid,
            "terminal_variance": self.terminal_sq_dev,
            "terminal_variance_se": self.terminal_sq_se,
            "xi_final": float(self.xi[-1]) if self.xi.size else 0.0,
            "diagnostics": dict(self.diagnostics),
        }


def _eta(v: np.ndarray, k: np.ndarray, kappa: float) -> np.ndarray:
    """(Var V + kappa^-1 E[(K - kappa) V^2]) / mean(V)^2 per recorded time."""
    mean_v = np.mean(v, axis=0)
    excess = np.where(np.isfinite(k), k - kappa, 0.0) * v ** 2
    num = np.var(v, axis=0) + (np.mean(excess, axis=0) / kappa if kappa > 0 else 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        eta = np.where(mean_v ** 2 > 1e-300, num / mean_v ** 2, 0.0)
    return eta


def _chunks(count: int) -> List[Tuple[int, int]]:
    size = config.CHUNK_SIZE
    return [(start, min(start + size, count)) for start in range(0, count, size)]


def _require_ensemble_scheme(sde: SdeConfig) -> None:
    if sde.scheme not in ENSEMBLE_SCHEMES:
        raise SimulationConfigError(f"scheme {sde.scheme!r} is not an ensemble scheme, "
                                    f"expected one of {ENSEMBLE_SCHEMES}")


def run_ensemble(backend: GeometryBackend, H: ObservableFunction, x0: ChartPoint, sde: SdeConfig,
                 track_F: Optional[ObservableFunction] = None, kappa: Optional[float] = None,
                 lam: Optional[float] = None) -> EnsembleStats:
    """Seeded ensemble; chunk layout and thread count never change the numbers."""
    _require_ensemble_scheme(sde)
    start = _prepare(backend, H, x0, track_F)
    spectrum = _spectrum_of(H)
    c0 = _coefficients(backend, H, start.coords[None], np.array([start.chart]), sde.sigma)
    h0, v0 = float(c0["H"][0]), float(c0["V"][0])
    if kappa is None or lam is None:
        k_est, l_est = curvature_extremes(backend, H, config.CURVATURE_SAMPLES, seed=sde.master_seed)
        kappa = k_est if kappa is None else kappa
        lam = l_est if lam is None else lam
    tau = reduction_timescale(kappa, sde.sigma, v0)
    epsilon = collapse_epsilon(sde, v0, H.norm)
    if epsilon >= v0 > 0.0:
        logger.warning("collapse threshold %.3g is not below V0 %.3g", epsilon, v0)
    n_steps = sde.n_steps
    record_steps = np.unique(np.round(np.linspace(0, n_steps, sde.output_points + 1)).astype(int))
    count = sde.ensemble_size
    coords0 = np.repeat(start.coords[None], count, axis=0)
    charts0 = np.full(count, start.chart, dtype=int)

    def work(bounds: Tuple[int, int]) -> _BatchResult:
        lo, hi = bounds
        return _integrate_batch(backend, H, coords0[lo:hi], charts0[lo:hi], sde, range(lo, hi), record_steps,
                                epsilon, spectrum, track_F, record_coords=sde.record_coords)

    chunks = _chunks(count)
    logger.info("ensemble on %s: %d trajectories, %d steps, %d chunks, %d threads",
                backend.backend_id, count, n_steps, len(chunks), sde.threads)
    if sde.threads > 1:
        with ThreadPoolExecutor(max_workers=sde.threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(b) for b in chunks]

    def stack(name):
        values = [getattr(p, name) for p in parts]
        return None if values[0] is None else np.concatenate(values, axis=0)

    h, v, q, kk = stack("h"), stack("v"), stack("q"), stack("k")
    f, vf = stack("f"), stack("vf")
    outcome, terminal = stack("outcome"), stack("terminal")
    ok = outcome != BLOWN_UP
    blown = int(np.sum(~ok))
    if blown:
        logger.warning("%d of %d trajectories blew up", blown, count)
    times = record_steps * sde.dt

    resolved = outcome >= 0
    if spectrum is not None:
        levels = spectrum.eigenvalues
        counts = np.bincount(outcome[resolved], minlength=levels.shape[0])
    else:
        levels, idx = cluster_levels(terminal[resolved], max(abs(h0), v0, 1.0))
        counts = np.bincount(idx, minlength=levels.shape[0]) if idx.size else np.zeros(0, dtype=int)
    unresolved = int(np.sum(outcome == UNRESOLVED))

    hv, vv, qv = h[ok], v[ok], q[ok]
    mean_H, se_H = _mean_se(hv)
    mean_V, se_V = _mean_se(vv)
    mean_Q, se_Q = _mean_se(qv)
    mean_sq, se_sq = _mean_se((hv - h0) ** 2)
    sq_dev = (terminal[resolved] - h0) ** 2
    term_mean, term_se = (_mean_se(sq_dev) if sq_dev.size > 1 else (np.asarray(np.nan), np.asarray(np.nan)))
    eta = _eta(vv, kk[ok], kappa)
    xi = cumulative_trapezoid(eta, times, initial=0.0) if times.size > 1 else np.zeros_like(eta)

    stats = EnsembleStats(
        times=times, sigma=sde.sigma, dt=sde.dt, h0=h0, v0=v0,
        mean_H=mean_H, se_H=se_H, mean_V=mean_V, se_V=se_V, mean_Q=mean_Q, se_Q=se_Q,
        mean_sq_dH=mean_sq, se_sq_dH=se_sq,
        levels=np.asarray(levels, dtype=float), counts=np.asarray(counts, dtype=int),
        unresolved=unresolved, blown_up=blown, ensemble_size=count,
        kappa=float(kappa), lam=float(lam), tau=tau, eta=eta, xi=xi,
        terminal_sq_dev=float(term_mean), terminal_sq_se=float(term_se), epsilon=epsilon,
        h_spread=H.spread,
        paths={"h": hv, "v": vv, "q": qv, "outcome": outcome[ok], "terminal": terminal[ok]},
        diagnostics={
            "scheme": sde.scheme,
            "n_steps": n_steps,
            "chart_switches": int(np.sum(stack("switches"))),
            "collapse_rule": {"epsilon": epsilon, "hold_steps": sde.collapse_hold_steps},
        },
    )
    if f is not None:
        fv, vfv = f[ok], vf[ok]
        stats.f0, stats.vf0 = float(f[0, 0]), float(vf[0, 0])
        stats.f_spread = track_F.spread
        stats.mean_F, stats.se_F = _mean_se(fv)
        stats.mean_VF, stats.se_VF = _mean_se(vfv)
        stats.paths["f"], stats.paths["vf"] = fv, vfv
    if sde.record_coords:
        stats.paths["coords"] = stack("coords")[ok]
        stats.paths["charts"] = stack("charts")[ok]
    if not stats.valid:
        logger.warning("ensemble invalid: %d blow-ups exceed %.0f%% of %d", blown,
                       100 * config.BLOWUP_FRACTION_LIMIT, count)
    return stats


# ---------------------------------------------------------------------------
# Restart ensembles for the drift law
# ---------------------------------------------------------------------------

@dataclass
class RestartEnsemble:
    start: ChartPoint
    sigma: float
    dt: float
    horizons: Tuple[float, float]
    v0: float
    k_h: float
    dv: Dict[float, np.ndarray]
    vf0: Optional[float] = None
    k_fh: Optional[float] = None
    dvf: Optional[Dict[float, np.ndarray]] = None
    h_spread: float = 1.0

    @property
    def predicted_V(self) -> float:
        return -self.sigma ** 2 * self.k_h * self.v0 ** 2

    @property
    def predicted_VF(self) -> Optional[float]:
        if self.vf0 is None or self.k_fh is None:
            return None
        return -self.sigma ** 2 * self.k_fh * self.vf0 * self.v0


def run_restarts(backend: GeometryBackend, H: ObservableFunction, start: ChartPoint, sde: SdeConfig,
                 horizon: float, count: int, track_F: Optional[ObservableFunction] = None) -> RestartEnsemble:
    """Many short runs from one point, at horizons h and h/2, without early stop."""
    from geometry import bisectional_batch  # local: only the restart path needs it

    _require_ensemble_scheme(sde)
    start = _prepare(backend, H, start, track_F)
    coords, charts = start.coords[None], np.array([start.chart])
    c0 = _coefficients(backend, H, coords, charts, sde.sigma)
    v0 = float(c0["V"][0])
    g, _, J = backend.tensors(coords, charts)
    r = backend.riemann(coords, charts)
    k_h = float(bisectional_batch(r, g, J, c0["dH"], c0["dH"])[0])
    vf0 = k_fh = None
    if track_F is not None:
        dF = track_F.gradients(coords, charts)
        vf0 = float(dF[0] @ np.linalg.solve(g[0], dF[0]))
        k_fh = float(bisectional_batch(r, g, J, dF, c0["dH"])[0])
    dv: Dict[float, np.ndarray] = {}
    dvf: Dict[float, np.ndarray] = {}
    for h in (horizon, horizon / 2.0):
        run = sde.replace(horizon=h, ensemble_size=count, stop_on_collapse=False, output_points=1)
        steps = np.array([0, run.n_steps])
        coords0 = np.repeat(coords, count, axis=0)
        charts0 = np.full(count, start.chart, dtype=int)
        parts = [_integrate_batch(backend, H, coords0[lo:hi], charts0[lo:hi], run, range(lo, hi), steps,
                                  0.0, None, track_F) for lo, hi in _chunks(count)]
        v_end = np.concatenate([p.v[:, -1] for p in parts])
        ok = np.concatenate([p.outcome != BLOWN_UP for p in parts])
        dv[h] = v_end[ok] - v0
        if track_F is not None:
            vf_end = np.concatenate([p.vf[:, -1] for p in parts])
            dvf[h] = vf_end[ok] - vf0
    return RestartEnsemble(
        start=start, sigma=sde.sigma, dt=sde.dt, horizons=(horizon, horizon / 2.0), v0=v0,
        k_h=k_h if np.isfinite(k_h) else 0.0, dv=dv,
        vf0=vf0, k_fh=None if k_fh is None or not np.isfinite(k_fh) else k_fh,
        dvf=dvf if track_F is not None else None, h_spread=H.spread,
    )


def coupled_endpoints(backend: GeometryBackend, H: ObservableFunction, x0: ChartPoint, sde: SdeConfig,
                      refinements: Sequence[int] = (1, 2, 4)) -> Dict[int, Dict[str, np.ndarray]]:
    """Terminal H and V at dt / r for each r, driven by one fine Brownian path per trajectory."""
    start = _prepare(backend, H, x0, None)
    finest = max(refinements)
    fine_dt = sde.dt / finest
    n_fine = sde.n_steps * finest
    count = sde.ensemble_size
    fine = np.stack([NoisePath.generate(sde.master_seed, i, n_fine, fine_dt).increments for i in range(count)])
    coords0 = np.repeat(start.coords[None], count, axis=0)
    charts0 = np.full(count, start.chart, dtype=int)
    out: Dict[int, Dict[str, np.ndarray]] = {}
    for r in refinements:
        factor = finest // r
        noise = fine.reshape(count, -1, factor).sum(axis=2)
        run = sde.replace(dt=sde.dt / r, stop_on_collapse=False)
        steps = np.array([0, noise.shape[1]])
        parts = [_integrate_batch(backend, H, coords0[lo:hi], charts0[lo:hi], run, range(lo, hi), steps, 0.0,
                                  None, noise=noise[lo:hi]) for lo, hi in _chunks(count)]
        ok = np.concatenate([p.outcome != BLOWN_UP for p in parts])
        out[r] = {
            "H": np.concatenate([p.h[:, -1] for p in parts])[ok],
            "V": np.concatenate([p.v[:, -1] for p in parts])[ok],
        }
    return out
