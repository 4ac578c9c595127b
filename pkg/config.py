# Configuration for the Kähler reduction simulator
import os
from dataclasses import dataclass, field
from typing import Dict, Tuple

# Lazy import so a missing python-dotenv only disables .env support
try:
    from dotenv import load_dotenv
except Exception:
    load_dotenv = None  # type: ignore


@dataclass
class SimulatorConfig:
    """Process-wide defaults shared by every module"""

    # Atlas and sampling
    CHART_SWITCH_RADIUS: float = 2.0  # switch chart when any affine |z_i| exceeds this
    SINGULAR_DENOMINATOR: float = 1e-9  # transition denominator below this is unreachable
    SAMPLING_RADIUS: float = 3.0  # uniform affine sampling box |z_i| <= R
    BLOWUP_RADIUS: float = 1e6  # reject steps moving any coordinate beyond this

    # Tolerances
    GRADIENT_FLOOR: float = 1e-12  # degenerate-plane threshold on |grad|
    HERMITIAN_ATOL: float = 1e-12
    DEGENERACY_RTOL: float = 1e-9  # eigenvalue merge gap relative to ||op||
    COMMUTATOR_ATOL: float = 1e-8  # [F, H] norm above this means non-commuting
    NORM_DRIFT_LIMIT: float = 1e-6  # lifted oracle renormalization check

    # Finite differences (Richardson pair) and third derivatives
    FD_STEPS: Tuple[float, float] = (1e-4, 5e-5)
    THIRD_DERIVATIVE_STEP: float = 1e-4

    # Collapse rule
    COLLAPSE_EPSILON_FACTOR: float = 1e-6  # epsilon = factor * V0
    COLLAPSE_HOLD_STEPS: int = 50
    COLLAPSE_FLOOR: float = 1e-7  # V0 floor relative to ||H||^2, so eigenstate starts resolve

    # Step size rule dt = min(DT_ROTATION / ||H||, tau / DT_TAU_DIVISOR)
    DT_ROTATION: float = 0.01
    DT_TAU_DIVISOR: float = 1e4
    DEFAULT_HORIZON_TAU: float = 5.0

    # Ensembles
    CHUNK_SIZE: int = 128  # trajectories per work unit, independent of thread count
    NOISE_BLOCK: int = 4096  # increments drawn per generator call
    OUTPUT_POINTS: int = 200
    DEFAULT_THREADS: int = 1
    BLOWUP_FRACTION_LIMIT: float = 0.10
    CURVATURE_SAMPLES: int = 20000

    # Verdicts
    SE_MULTIPLIER: float = 3.0
    MIN_MARTINGALE_ENSEMBLE: int = 100
    UNRESOLVED_LIMIT: float = 0.05
    FILTRATION_SUBGRID: int = 10
    LINDBLAD_RTOL: float = 0.05
    ORACLE_RATIO_TARGET: float = 2.0
    ORACLE_RATIO_TOLERANCE: float = 0.3

    # Fokker-Planck grid (latitude x longitude)
    FP_GRID: Tuple[int, int] = (128, 256)
    FP_TV_LIMIT: float = 0.05
    FP_CFL_SAFETY: float = 0.4
    FP_HISTOGRAM_COARSEN: Tuple[int, int] = (4, 8)

    # Identity-suite tolerances
    IDENTITY_TOLERANCES: Dict[str, float] = field(default_factory=lambda: {
        "killing": 1e-6,
        "adler_horwitz": 1e-5,
        "commuting_bracket": 1e-7,
        "third_derivative": 1e-5,
        "heisenberg": -1e-10,
        "jacobi": 1e-8,
        "drift_identity": 1e-5,
        "compatibility": 1e-10,
        "riemann_symmetry": 1e-8,
        "closed_form": 1e-6,
        "holomorphic_constant": 1e-8,
        "parallel_J": 1e-6,
        "chart_invariance": 1e-9,
    })

    # Logging and output
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "logs"
    RESULTS_DIR: str = "results"


# Configuration instance
config = SimulatorConfig()


def load_env() -> Dict[str, str]:
    """Load .env and apply the KAHLER_* overrides onto `config`."""
    if load_dotenv is not None:
        try:
            load_dotenv()
        except Exception:
            pass
    overrides = {
        "log_level": os.getenv("KAHLER_LOG_LEVEL", config.LOG_LEVEL),
        "results_dir": os.getenv("KAHLER_RESULTS_DIR", config.RESULTS_DIR),
        "log_dir": os.getenv("KAHLER_LOG_DIR", config.LOG_DIR),
        "threads": os.getenv("KAHLER_THREADS", str(config.DEFAULT_THREADS)),
    }
    config.LOG_LEVEL = overrides["log_level"].upper()
    config.RESULTS_DIR = overrides["results_dir"]
    config.LOG_DIR = overrides["log_dir"]
    try:
        config.DEFAULT_THREADS = max(1, int(overrides["threads"]))
    except ValueError:
        pass
    return overrides
