"""
Scenario files: strict TOML parsing into a validated RunConfig.

Tables: [backend] [hamiltonian] [tracked] [initial] [sde] [output] [checks].
Complex matrix entries are written as [re, im] pairs. Unknown keys are fatal.
"""
from __future__ import annotations

import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from config import config
from dynamics import ENSEMBLE_SCHEMES, SdeConfig, SimulationConfigError, default_dt, reduction_timescale
from geometry import (ChartPoint, GeometryBackend, GeometryError, PotentialBackend, ProductBackend,
                      ProjectiveBackend, build_backend, curvature_extremes, point_from_homogeneous, preferred_chart)
from observables import (HermitianOperator, NonHermitianError, ObservableError, ObservableFunction, dispersion,
                         joint_state)

logger = logging.getLogger(__name__)

CONFIG_MISSING = "CONFIG_MISSING"
CONFIG_SYNTAX = "CONFIG_SYNTAX"
CONFIG_UNKNOWN_KEY = "CONFIG_UNKNOWN_KEY"
CONFIG_INVALID_VALUE = "CONFIG_INVALID_VALUE"
CONFIG_NOT_HERMITIAN = "CONFIG_NOT_HERMITIAN"
CONFIG_DIMENSION = "CONFIG_DIMENSION"

ALLOWED: Dict[str, set] = {
    "": {"backend", "hamiltonian", "tracked", "initial", "sde", "output", "checks", "name"},
    "backend": {"kind", "n", "factors", "potential", "scale", "epsilon"},
    "hamiltonian": {"matrix", "diagonal", "factors", "moment_weights", "offset", "label"},
    "tracked": {"matrix", "diagonal", "factors", "moment_weights", "offset", "label", "power_of_hamiltonian"},
    "initial": {"chart", "coords", "homogeneous"},
    "sde": {"sigma", "dt", "horizon", "horizon_tau", "scheme", "collapse_epsilon", "collapse_hold_steps",
            "master_seed", "ensemble_size", "output_points", "threads"},
    "output": {"directory", "formats"},
    "checks": {"geometry_points", "identity_points", "restart_points", "restart_count", "restart_horizon_tau",
               "weak_convergence", "oracle", "oracle_trajectories", "lindblad", "fokker_planck", "kappa", "lambda",
               "seed"},
}
FORMATS = {"csv", "json", "text"}

CHECK_DEFAULTS: Dict[str, Any] = {
    "geometry_points": 100,
    "identity_points": 100,
    "restart_points": 5,
    "restart_count": 2000,
    "restart_horizon_tau": 0.02,
    "weak_convergence": False,
    "oracle": False,
    "oracle_trajectories": 16,
    "lindblad": False,
    "fokker_planck": False,
    "seed": 0,
}


class ConfigError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message


@dataclass
class RunConfig:
    name: str
    backend: GeometryBackend
    hamiltonian: ObservableFunction
    initial: ChartPoint
    sde: Optional[SdeConfig]
    output_dir: Path
    formats: List[str]
    checks: Dict[str, Any]
    tracked: Optional[ObservableFunction] = None
    kappa: Optional[float] = None
    lam: Optional[float] = None
    source: Optional[Path] = None
    raw: Dict[str, Any] = field(default_factory=dict, repr=False)

    def curvature_bounds(self) -> Tuple[float, float]:
        """(kappa, lambda): [checks] values, else sampled once and cached."""
        if self.kappa is None or self.lam is None:
            k_est, l_est = curvature_extremes(self.backend, self.hamiltonian, config.CURVATURE_SAMPLES,
                                              seed=int(self.checks["seed"]))
            self.kappa = k_est if self.kappa is None else self.kappa
            self.lam = l_est if self.lam is None else self.lam
        return self.kappa, self.lam

    @property
    def psi0(self) -> Optional[np.ndarray]:
        """Initial vector in the full Hilbert space (matrix observables only)."""
        if isinstance(self.backend, (ProjectiveBackend, ProductBackend)):
            return joint_state(self.backend, self.initial.coords[None], np.array([self.initial.chart]))[0]
        return None


def _check_keys(table: Mapping[str, Any], section: str) -> None:
    allowed = ALLOWED[section]
    for key in table:
        if key not in allowed:
            path = f"{section}.{key}" if section else key
            raise ConfigError(CONFIG_UNKNOWN_KEY, f"unknown key '{path}'")


def _number(table: Mapping[str, Any], key: str, section: str, default=None, positive=False, integer=False):
    if key not in table:
        if default is None:
            return None
        return default
    value = table[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(CONFIG_INVALID_VALUE, f"'{section}.{key}' must be a number, got {value!r}")
    if integer and not isinstance(value, int):
        raise ConfigError(CONFIG_INVALID_VALUE, f"'{section}.{key}' must be an integer, got {value!r}")
    if not math.isfinite(float(value)):
        raise ConfigError(CONFIG_INVALID_VALUE, f"'{section}.{key}' must be finite")
    if positive and not value > 0:
        raise ConfigError(CONFIG_INVALID_VALUE, f"'{section}.{key}' must be > 0, got {value!r}")
    return int(value) if integer else float(value)


def _pairs(value: Any, where: str) -> np.ndarray:
    try:
        return np.array([complex(float(e[0]), float(e[1])) for e in value])
    except (TypeError, IndexError, ValueError) as exc:
        raise ConfigError(CONFIG_INVALID_VALUE, f"'{where}' must be a list of [re, im] pairs") from exc


def _operator(block: Mapping[str, Any], key: str, where: str) -> HermitianOperator:
    try:
        if key == "diagonal":
            return HermitianOperator.diagonal([float(v) for v in block])
        return HermitianOperator.from_pairs(block)
    except NonHermitianError as exc:
        raise ConfigError(CONFIG_NOT_HERMITIAN, f"'{where}': {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(CONFIG_INVALID_VALUE, f"'{where}': {exc}") from exc


def _observable(backend: GeometryBackend, table: Mapping[str, Any], section: str,
                hamiltonian: Optional[ObservableFunction] = None) -> ObservableFunction:
    _check_keys(table, section)
    label = str(table.get("label", section))
    forms = [k for k in ("matrix", "diagonal", "factors", "moment_weights", "power_of_hamiltonian") if k in table]
    if len(forms) != 1:
        raise ConfigError(CONFIG_INVALID_VALUE, f"[{section}] needs exactly one of matrix, diagonal, factors, "
                                                f"moment_weights, power_of_hamiltonian; got {forms or 'none'}")
    form = forms[0]
    try:
        if form == "power_of_hamiltonian":
            power = _number(table, form, section, integer=True, positive=True)
            op = hamiltonian.full_operator() if hamiltonian is not None else None
            if op is None or not isinstance(backend, ProjectiveBackend):
                raise ConfigError(CONFIG_INVALID_VALUE, f"'{section}.{form}' needs a matrix Hamiltonian on CP^n")
            return ObservableFunction.linear(backend, HermitianOperator(np.linalg.matrix_power(op.entries, power)),
                                             label=label)
        if form in ("matrix", "diagonal"):
            if not isinstance(backend, ProjectiveBackend):
                raise ConfigError(CONFIG_DIMENSION, f"'{section}.{form}' needs a cpn backend")
            return ObservableFunction.linear(backend, _operator(table[form], form, f"{section}.{form}"), label=label)
        if form == "factors":
            if not isinstance(backend, ProductBackend):
                raise ConfigError(CONFIG_DIMENSION, f"'{section}.factors' needs a product backend")
            ops = []
            for i, entry in enumerate(table["factors"]):
                where = f"{section}.factors[{i}]"
                if entry and isinstance(entry[0], (int, float)):
                    ops.append(_operator(entry, "diagonal", where))
                else:
                    ops.append(_operator(entry, "matrix", where))
            return ObservableFunction.separable_sum(backend, ops, label=label)
        if not isinstance(backend, PotentialBackend):
            raise ConfigError(CONFIG_DIMENSION, f"'{section}.moment_weights' needs a potential backend")
        weights = [float(w) for w in table["moment_weights"]]
        offset = _number(table, "offset", section, default=0.0)
        return ObservableFunction.moment_map(backend, weights, offset or 0.0, label=label)
    except ObservableError as exc:
        raise ConfigError(CONFIG_DIMENSION, f"[{section}]: {exc}") from exc


def _initial(backend: GeometryBackend, table: Mapping[str, Any]) -> ChartPoint:
    _check_keys(table, "initial")
    if ("coords" in table) == ("homogeneous" in table):
        raise ConfigError(CONFIG_INVALID_VALUE, "[initial] needs exactly one of coords, homogeneous")
    try:
        if "homogeneous" in table:
            raw = table["homogeneous"]
            if isinstance(backend, ProductBackend):
                psis = [_pairs(block, f"initial.homogeneous[{i}]") for i, block in enumerate(raw)]
            else:
                psis = [_pairs(raw, "initial.homogeneous")]
            dims = [n + 1 for n in backend.factor_dims]
            if [p.shape[0] for p in psis] != dims:
                raise ConfigError(CONFIG_DIMENSION, f"homogeneous vector sizes {[p.shape[0] for p in psis]} "
                                                    f"do not match {dims}")
            return point_from_homogeneous(backend, psis)
        coords = [float(c) for c in table["coords"]]
        chart = _number(table, "chart", "initial", default=0, integer=True)
        if len(coords) != backend.real_dimension:
            raise ConfigError(CONFIG_DIMENSION, f"initial.coords has {len(coords)} entries, "
                                                f"backend needs {backend.real_dimension}")
        p = backend.point(coords, int(chart))
    except GeometryError as exc:
        raise ConfigError(CONFIG_INVALID_VALUE, f"[initial]: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(CONFIG_INVALID_VALUE, f"[initial]: {exc}") from exc
    moved = preferred_chart(backend, p)
    if moved.chart != p.chart:
        logger.warning("initial coords moved from chart %d to preferred chart %d", p.chart, moved.chart)
    return moved


def _sde(table: Mapping[str, Any], H: ObservableFunction, x0: ChartPoint,
         curvature: Callable[[], Tuple[float, float]], overrides: Mapping[str, Any]) -> SdeConfig:
    _check_keys(table, "sde")
    sigma = _number(table, "sigma", "sde")
    if sigma is None:
        raise ConfigError(CONFIG_INVALID_VALUE, "'sde.sigma' is required")
    if sigma < 0.0:
        raise ConfigError(CONFIG_INVALID_VALUE, f"'sde.sigma' must be >= 0, got {sigma}")
    tau = math.inf
    if "dt" not in table or "horizon" not in table:
        try:
            kappa, _ = curvature()
        except GeometryError as exc:
            raise ConfigError(CONFIG_INVALID_VALUE, f"curvature extremes for the dt/horizon rule: {exc}") from exc
        tau = reduction_timescale(kappa, sigma, dispersion(H, x0))
    dt = _number(table, "dt", "sde", positive=True)
    if dt is None:
        dt = default_dt(H.norm, tau)
    horizon = _number(table, "horizon", "sde", positive=True)
    if horizon is None:
        multiple = _number(table, "horizon_tau", "sde", default=config.DEFAULT_HORIZON_TAU, positive=True)
        horizon = multiple * tau if math.isfinite(tau) else 1.0
    seed = overrides.get("seed")
    if seed is None:
        seed = _number(table, "master_seed", "sde", default=0, integer=True)
    threads = overrides.get("threads") or _number(table, "threads", "sde", default=config.DEFAULT_THREADS,
                                                   integer=True, positive=True)
    scheme = str(table.get("scheme", "euler_maruyama"))
    if scheme == "milstein":
        raise ConfigError(CONFIG_INVALID_VALUE, "'sde.scheme': milstein is reserved for the oracle comparison; "
                                                "ensembles use one of " + ", ".join(ENSEMBLE_SCHEMES))
    try:
        return SdeConfig(
            sigma=sigma,
            dt=dt,
            horizon=horizon,
            scheme=scheme,
            collapse_epsilon=_number(table, "collapse_epsilon", "sde", positive=True),
            collapse_hold_steps=_number(table, "collapse_hold_steps", "sde", default=config.COLLAPSE_HOLD_STEPS,
                                        integer=True, positive=True),
            master_seed=int(seed),
            ensemble_size=_number(table, "ensemble_size", "sde", default=1000, integer=True, positive=True),
            output_points=_number(table, "output_points", "sde", default=config.OUTPUT_POINTS, integer=True,
                                  positive=True),
            threads=int(threads),
        )
    except SimulationConfigError as exc:
        raise ConfigError(CONFIG_INVALID_VALUE, f"[sde]: {exc}") from exc


def load_toml(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise ConfigError(CONFIG_MISSING, f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(CONFIG_SYNTAX, f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(CONFIG_MISSING, f"cannot read {path}: {exc}") from exc


def parse_config(path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Fully validated RunConfig; overrides may carry seed, threads and out."""
    path = Path(path)
    raw = load_toml(path)
    return build_run_config(raw, overrides or {}, source=path)


def build_run_config(raw: Mapping[str, Any], overrides: Mapping[str, Any],
                     source: Optional[Path] = None) -> RunConfig:
    _check_keys(raw, "")
    for section in ("backend", "hamiltonian", "initial", "sde"):
        if section not in raw:
            raise ConfigError(CONFIG_INVALID_VALUE, f"missing [{section}] table")
        if not isinstance(raw[section], dict):
            raise ConfigError(CONFIG_INVALID_VALUE, f"[{section}] must be a table")
    _check_keys(raw["backend"], "backend")
    try:
        backend = build_backend(raw["backend"])
    except (GeometryError, TypeError, ValueError) as exc:
        raise ConfigError(CONFIG_INVALID_VALUE, f"[backend]: {exc}") from exc
    H = _observable(backend, raw["hamiltonian"], "hamiltonian")
    tracked = _observable(backend, raw["tracked"], "tracked", H) if "tracked" in raw else None
    x0 = _initial(backend, raw["initial"])

    checks = dict(CHECK_DEFAULTS)
    checks_table = raw.get("checks", {})
    _check_keys(checks_table, "checks")
    for key, value in checks_table.items():
        if key in ("kappa", "lambda"):
            continue
        default = CHECK_DEFAULTS[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(CONFIG_INVALID_VALUE, f"'checks.{key}' must be true or false")
            checks[key] = value
        else:
            checks[key] = _number(checks_table, key, "checks", positive=key != "seed",
                                  integer=isinstance(default, int))
    output = raw.get("output", {})
    _check_keys(output, "output")
    out_dir = Path(overrides.get("out") or output.get("directory") or config.RESULTS_DIR)
    formats = list(output.get("formats", sorted(FORMATS)))
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise ConfigError(CONFIG_INVALID_VALUE, f"unknown output formats {bad}; choose from {sorted(FORMATS)}")

    run = RunConfig(
        name=str(raw.get("name", source.stem if source else "scenario")),
        backend=backend, hamiltonian=H, initial=x0, sde=None, output_dir=out_dir, formats=formats,
        checks=checks, tracked=tracked, kappa=_number(checks_table, "kappa", "checks"),
        lam=_number(checks_table, "lambda", "checks"), source=source, raw=dict(raw),
    )
    run.sde = _sde(raw["sde"], H, x0, run.curvature_bounds, overrides)
    return run
