"""
Observables as expectation functions on the state manifold.

An observable is a real function whose Hamiltonian vector field
Z^a = omega^ab grad_b F is a Killing field. Linear observables on CP^n are
Rayleigh quotients of Hermitian matrices; products carry separable sums;
potential backends take JAX functions (moment maps of the torus action, or
user candidates validated by killing_residual).
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp

from config import config
from geometry import (ChartPoint, GeometryBackend, PotentialBackend, ProductBackend, ProjectiveBackend,
                      bisectional_batch, interleave)
from utils.numerics import jax, jnp, richardson_derivative

logger = logging.getLogger(__name__)


class ObservableError(Exception):
    """Base class for observable failures."""


class NonHermitianError(ObservableError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HermitianOperator:
    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise NonHermitianError(f"operator must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise NonHermitianError("operator has non-finite entries")
        gap = np.abs(a - a.conj().T)
        tol = config.HERMITIAN_ATOL * max(1.0, float(np.max(np.abs(a))))
        if np.max(gap) > tol:
            i, j = np.unravel_index(int(np.argmax(gap)), gap.shape)
            raise NonHermitianError(
                f"entries ({i},{j})={a[i, j]} and ({j},{i})={a[j, i]} are not conjugate")
        a = 0.5 * (a + a.conj().T)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @classmethod
    def from_pairs(cls, rows: Sequence[Sequence[Sequence[float]]]) -> "HermitianOperator":
        """Rows of [re, im] pairs, the config-file representation."""
        try:
            a = np.array([[complex(float(e[0]), float(e[1])) for e in row] for row in rows])
        except (TypeError, IndexError, ValueError) as exc:
            raise NonHermitianError(f"matrix entries must be [re, im] pairs: {exc}") from exc
        return cls(a)

    @classmethod
    def diagonal(cls, values: Sequence[float]) -> "HermitianOperator":
        return cls(np.diag(np.asarray(values, dtype=complex)))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(linalg.eigvalsh(self.entries)))) if self.dim else 0.0

    @property
    def spread(self) -> float:
        w = linalg.eigvalsh(self.entries)
        return float(w[-1] - w[0])

    def commutator_norm(self, other: "HermitianOperator") -> float:
        a, b = self.entries, other.entries
        return float(np.linalg.norm(a @ b - b @ a))

    def to_pairs(self) -> List[List[List[float]]]:
        return [[[float(e.real), float(e.imag)] for e in row] for row in self.entries]


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    projectors: Tuple[np.ndarray, ...]
    multiplicities: Tuple[int, ...]

    @property
    def degenerate(self) -> Tuple[bool, ...]:
        return tuple(m > 1 for m in self.multiplicities)

    def overlaps(self, psi: np.ndarray) -> np.ndarray:
        """Projector expectations <psi|P_i|psi>/<psi|psi>, rows of psi are states."""
        psi = np.atleast_2d(psi)
        norm = np.sum(np.abs(psi) ** 2, axis=1)
        return np.stack([np.real(np.einsum("ni,ij,nj->n", psi.conj(), P, psi)) for P in self.projectors],
                        axis=1) / norm[:, None]

    def label(self, psi: np.ndarray) -> np.ndarray:
        return np.argmax(self.overlaps(psi), axis=1)


def spectral_decomposition(op: HermitianOperator) -> Spectrum:
    """Ascending eigenvalues; gaps below DEGENERACY_RTOL * ||op|| are merged."""
    if not isinstance(op, HermitianOperator):
        op = HermitianOperator(op)
    w, v = linalg.eigh(op.entries)
    threshold = config.DEGENERACY_RTOL * max(float(np.max(np.abs(w))), 0.0)
    groups: List[List[int]] = [[0]]
    for k in range(1, len(w)):
        if w[k] - w[groups[-1][-1]] <= threshold:
            groups[-1].append(k)
        else:
            groups.append([k])
    values, projectors = [], []
    for idx in groups:
        vecs = v[:, idx]
        projectors.append(vecs @ vecs.conj().T)
        values.append(float(np.mean(w[idx])))
    return Spectrum(np.array(values), tuple(projectors), tuple(len(g) for g in groups))


# ---------------------------------------------------------------------------
# Rayleigh quotient on one projective factor
# ---------------------------------------------------------------------------

def _rayleigh(factor: ProjectiveBackend, A: np.ndarray, coords: np.ndarray, charts: np.ndarray,
              order: int = 1):
    """Value, gradient and (order 2) coordinate Hessian of psi^+ A psi / psi^+ psi."""
    psi = factor.homogeneous(coords, charts)[0]
    norm = np.sum(np.abs(psi) ** 2, axis=1)
    apsi = np.einsum("ij,nj->ni", A, psi)
    value = np.real(np.einsum("ni,ni->n", psi.conj(), apsi)) / norm
    idx = factor._others[np.asarray(charts, dtype=int).reshape(-1)]
    resid = apsi - value[:, None] * psi
    grad = interleave(2.0 * np.take_along_axis(resid, idx, axis=1) / norm[:, None])
    if order < 2:
        return value, grad, None
    n = factor.n
    sub = A[idx[:, :, None], idx[:, None, :]] - value[:, None, None] * np.eye(n)
    hess = np.empty((psi.shape[0], 2 * n, 2 * n))
    hess[:, 0::2, 0::2] = 2.0 * sub.real
    hess[:, 0::2, 1::2] = -2.0 * sub.imag
    hess[:, 1::2, 0::2] = 2.0 * sub.imag
    hess[:, 1::2, 1::2] = 2.0 * sub.real
    dnorm = interleave(2.0 * np.take_along_axis(psi, idx, axis=1))
    hess -= np.einsum("na,nb->nab", grad, dnorm) + np.einsum("na,nb->nab", dnorm, grad)
    return value, grad, hess / norm[:, None, None]


def kron_sum(ops: Sequence[np.ndarray]) -> np.ndarray:
    """sum_i 1 x ... x A_i x ... x 1 on the tensor product space."""
    dims = [a.shape[0] for a in ops]
    total = np.zeros((int(np.prod(dims)),) * 2, dtype=complex)
    for i, a in enumerate(ops):
        term = np.array([[1.0]], dtype=complex)
        for j, d in enumerate(dims):
            term = np.kron(term, a if i == j else np.eye(d))
        total += term
    return total


def joint_state(backend: GeometryBackend, coords: np.ndarray, charts: np.ndarray) -> np.ndarray:
    """Homogeneous lift into the full tensor-product Hilbert space (rows)."""
    psis = backend.homogeneous(coords, charts)
    out = psis[0]
    for psi in psis[1:]:
        out = np.einsum("ni,nj->nij", out, psi).reshape(out.shape[0], -1)
    return out


class ObservableFunction:
    """Expectation function F(x) on a backend with batched value/gradient/Hessian."""

    def __init__(self, backend: GeometryBackend, form: str, operators: Sequence[HermitianOperator] = (),
                 evaluator: Optional[Callable] = None, label: str = ""):
        self.backend = backend
        self.backend_id = backend.backend_id
        self.form = form
        self.operators = tuple(operators)
        self.label = label or form
        self._evaluator = evaluator
        if form == "custom":
            if evaluator is None:
                raise ObservableError("custom observable needs an evaluator")
            self._value = jax.jit(jax.vmap(evaluator))
            self._grad = jax.jit(jax.vmap(jax.grad(evaluator)))
            self._hess = jax.jit(jax.vmap(jax.jacfwd(jax.grad(evaluator))))

    # --- constructors ----------------------------------------------------
    @classmethod
    def linear(cls, backend: ProjectiveBackend, op: HermitianOperator, label: str = "") -> "ObservableFunction":
        if not isinstance(backend, ProjectiveBackend):
            raise ObservableError("linear observables live on CP^n backends")
        if op.dim != backend.n + 1:
            raise ObservableError(f"operator dimension {op.dim} does not match CP^{backend.n}")
        return cls(backend, "linear", [op], label=label or "linear")

    @classmethod
    def separable_sum(cls, backend: ProductBackend, ops: Sequence[HermitianOperator],
                      label: str = "") -> "ObservableFunction":
        if not isinstance(backend, ProductBackend):
            raise ObservableError("separable sums live on product backends")
        if len(ops) != len(backend.factors):
            raise ObservableError(f"need {len(backend.factors)} factor operators, got {len(ops)}")
        for f, op in zip(backend.factors, ops):
            if op.dim != f.n + 1:
                raise ObservableError(f"factor operator dimension {op.dim} does not match CP^{f.n}")
        return cls(backend, "separable_sum", ops, label=label or "separable_sum")

    @classmethod
    def custom(cls, backend: GeometryBackend, fn: Callable, label: str = "custom") -> "ObservableFunction":
        if backend.n_charts != 1:
            raise ObservableError("custom observables need a single-chart backend")
        return cls(backend, "custom", evaluator=fn, label=label)

    @classmethod
    def moment_map(cls, backend: PotentialBackend, weights: Sequence[float], offset: float = 0.0,
                   label: str = "moment_map") -> "ObservableFunction":
        """offset + sum_i a_i |z_i|^2 dK/d|z_i|^2, the Hamiltonian of the torus rotation with weights a."""
        if not isinstance(backend, PotentialBackend):
            raise ObservableError("moment maps need a potential backend")
        a = jnp.asarray(np.asarray(weights, dtype=float))
        if a.shape[0] != backend.complex_dimension:
            raise ObservableError(f"need {backend.complex_dimension} weights, got {a.shape[0]}")
        grad_k = jax.grad(backend.potential)

        def moment(x):
            gk = grad_k(x)
            return offset + jnp.dot(a, 0.5 * (x[0::2] * gk[0::2] + x[1::2] * gk[1::2]))

        return cls.custom(backend, moment, label=label)

    # --- algebra ---------------------------------------------------------
    def affine(self, scale: float, shift: float = 0.0) -> "ObservableFunction":
        """scale * F + shift."""
        if self.form == "custom":
            fn = self._evaluator
            return ObservableFunction.custom(self.backend, lambda x: scale * fn(x) + shift, self.label)
        ops = [HermitianOperator(scale * op.entries) for op in self.operators]
        ops[0] = HermitianOperator(ops[0].entries + shift * np.eye(ops[0].dim))
        return ObservableFunction(self.backend, self.form, ops, label=self.label)

    def full_operator(self) -> Optional[HermitianOperator]:
        if self.form == "linear":
            return self.operators[0]
        if self.form == "separable_sum":
            return HermitianOperator(kron_sum([op.entries for op in self.operators]))
        return None

    def spectrum(self) -> Spectrum:
        op = self.full_operator()
        if op is None:
            raise ObservableError("custom observables have no matrix spectrum")
        return spectral_decomposition(op)

    @property
    def spread(self) -> float:
        op = self.full_operator()
        return op.spread if op is not None else 1.0

    @property
    def norm(self) -> float:
        op = self.full_operator()
        return op.norm if op is not None else 1.0

    def commutes_with(self, other: "ObservableFunction", samples: int = 64) -> bool:
        a, b = self.full_operator(), other.full_operator()
        if a is not None and b is not None:
            return a.commutator_norm(b) <= config.COMMUTATOR_ATOL
        coords, charts = self.backend.sample(np.random.default_rng(7), samples)
        return float(np.max(np.abs(poisson_bracket_batch(self, other, coords, charts)))) <= config.COMMUTATOR_ATOL

    # --- evaluation ------------------------------------------------------
    def _parts(self, coords, charts, order):
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        charts = np.asarray(charts, dtype=int).reshape(-1)
        if self.form == "custom":
            x = jnp.asarray(coords)
            value = np.asarray(self._value(x))
            grad = np.asarray(self._grad(x))
            hess = np.asarray(self._hess(x)) if order > 1 else None
            return value, grad, hess
        if self.form == "linear":
            return _rayleigh(self.backend, self.operators[0].entries, coords, charts, order)
        backend: ProductBackend = self.backend
        d = backend.real_dimension
        value = np.zeros(coords.shape[0])
        grad = np.zeros((coords.shape[0], d))
        hess = np.zeros((coords.shape[0], d, d)) if order > 1 else None
        for f, sl, ch, op in zip(backend.factors, backend.slices, backend.decode_chart(charts), self.operators):
            v, gr, hs = _rayleigh(f, op.entries, coords[:, sl], ch, order)
            value += v
            grad[:, sl] = gr
            if hess is not None:
                hess[:, sl, sl] = hs
        return value, grad, hess

    def values(self, coords, charts) -> np.ndarray:
        return self._parts(coords, charts, 1)[0]

    def gradients(self, coords, charts) -> np.ndarray:
        return self._parts(coords, charts, 1)[1]

    def hessians(self, coords, charts) -> np.ndarray:
        """Coordinate second derivatives d_a d_b F."""
        return self._parts(coords, charts, 2)[2]

    def value_gradient_hessian(self, coords, charts):
        return self._parts(coords, charts, 2)

    def __repr__(self) -> str:
        return f"ObservableFunction({self.label!r} on {self.backend_id})"


def linear_observable(backend: GeometryBackend, ops) -> ObservableFunction:
    """Linear or separable observable from one operator or per-factor operators."""
    if isinstance(backend, ProductBackend):
        return ObservableFunction.separable_sum(backend, ops)
    op = ops[0] if isinstance(ops, (list, tuple)) else ops
    return ObservableFunction.linear(backend, op)


def random_hermitian(rng: np.random.Generator, dim: int) -> HermitianOperator:
    m = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return HermitianOperator(0.5 * (m + m.conj().T))


def random_observable(backend: GeometryBackend, rng: np.random.Generator, label: str = "") -> ObservableFunction:
    """Random Killing observable: Hermitian matrix, separable sum, or moment map with normal weights."""
    if isinstance(backend, ProjectiveBackend):
        return ObservableFunction.linear(backend, random_hermitian(rng, backend.n + 1), label=label)
    if isinstance(backend, ProductBackend):
        return ObservableFunction.separable_sum(backend, [random_hermitian(rng, f.n + 1) for f in backend.factors],
                                                label=label)
    if isinstance(backend, PotentialBackend):
        return ObservableFunction.moment_map(backend, rng.normal(size=backend.complex_dimension).tolist(),
                                             float(rng.normal()), label=label or "moment_map")
    raise ObservableError(f"no random observables for {backend.backend_id}")


# ---------------------------------------------------------------------------
# Batched kernels
# ---------------------------------------------------------------------------

def covariant_hessian_batch(obs: ObservableFunction, coords, charts, gamma=None) -> np.ndarray:
    """grad_a grad_b F = d_a d_b F - Gamma^c_ab d_c F."""
    _, grad, hess = obs.value_gradient_hessian(coords, charts)
    if gamma is None:
        gamma = obs.backend.christoffels(coords, charts)
    return hess - np.einsum("ncab,nc->nab", gamma, grad)


def dispersion_batch(obs: ObservableFunction, coords, charts, g=None) -> np.ndarray:
    if g is None:
        g = obs.backend.tensors(coords, charts)[0]
    grad = obs.gradients(coords, charts)
    return np.einsum("na,na->n", grad, np.linalg.solve(g, grad[..., None])[..., 0])


def poisson_bracket_batch(F: ObservableFunction, G: ObservableFunction, coords, charts) -> np.ndarray:
    g, omega, _ = F.backend.tensors(coords, charts)
    ginv = np.linalg.inv(g)
    omega_up = np.einsum("nac,ncd,ndb->nab", ginv, omega, ginv)
    return 2.0 * np.einsum("na,nab,nb->n", F.gradients(coords, charts), omega_up, G.gradients(coords, charts))


# ---------------------------------------------------------------------------
# Pointwise operations
# ---------------------------------------------------------------------------

def _at(obs: ObservableFunction, p: ChartPoint):
    obs.backend.validate(p)
    return p.coords[None, :], np.array([p.chart])


def expectation(obs: ObservableFunction, p: ChartPoint) -> float:
    return float(obs.values(*_at(obs, p))[0])


def gradient(obs: ObservableFunction, p: ChartPoint) -> np.ndarray:
    return obs.gradients(*_at(obs, p))[0]


def covariant_hessian(obs: ObservableFunction, p: ChartPoint) -> np.ndarray:
    return covariant_hessian_batch(obs, *_at(obs, p))[0]


def dispersion(obs: ObservableFunction, p: ChartPoint) -> float:
    return float(dispersion_batch(obs, *_at(obs, p))[0])


def poisson_bracket(F: ObservableFunction, G: ObservableFunction, p: ChartPoint) -> float:
    """2 omega^ab grad_a F grad_b G."""
    return float(poisson_bracket_batch(F, G, *_at(F, p))[0])


def _matrix_commutator_expectation(F: HermitianOperator, G: HermitianOperator, psi: np.ndarray) -> complex:
    c = F.entries @ G.entries - G.entries @ F.entries
    return complex(psi.conj() @ c @ psi / np.vdot(psi, psi))


@functools.lru_cache(maxsize=1)
def commutator_phase() -> complex:
    """Factor k with {F, G} = <k [F, G]>, fixed once at a random CP^2 configuration."""
    rng = np.random.default_rng(20240611)
    backend = ProjectiveBackend(2)
    F, G = random_hermitian(rng, 3), random_hermitian(rng, 3)
    coords = rng.uniform(-1.0, 1.0, size=4)
    p = backend.point(coords, 0)
    bracket = poisson_bracket(ObservableFunction.linear(backend, F), ObservableFunction.linear(backend, G), p)
    raw = _matrix_commutator_expectation(F, G, backend.homogeneous(p.coords[None], [0])[0][0])
    # <[F, G]> is purely imaginary, so the factor is +i or -i
    phase = 1j if np.real(1j * raw) * bracket > 0 else -1j
    logger.debug("commutator phase fixed to %s", phase)
    return phase


def commutator(F: ObservableFunction, G: ObservableFunction) -> ObservableFunction:
    """The observable whose expectation is the Poisson bracket {F, G}."""
    if F.form == "custom" or G.form == "custom":
        raise ObservableError("commutators are formed for matrix observables only")
    k = commutator_phase()
    ops = [HermitianOperator(k * (a.entries @ b.entries - b.entries @ a.entries))
           for a, b in zip(F.operators, G.operators)]
    return ObservableFunction(F.backend, F.form, ops, label=f"{{{F.label},{G.label}}}")


def killing_residual(obs: ObservableFunction, p: ChartPoint) -> float:
    """Frobenius norm of grad_(a Z_b) for Z^a = omega^ab grad_b F."""
    backend = obs.backend
    coords, charts = _at(obs, p)

    def z_lower(x):
        g, omega, _ = backend.tensors(x[None], charts)
        return (omega[0] @ np.linalg.solve(g[0], obs.gradients(x[None], charts)[0]))

    dz = richardson_derivative(z_lower, p.coords)  # dz[b, a] = d_a Z_b
    gamma = backend.christoffels(coords, charts)[0]
    cov = dz.T - np.einsum("cab,c->ab", gamma, z_lower(p.coords))
    return float(np.linalg.norm(0.5 * (cov + cov.T)))


def hamiltonian_flow(obs: ObservableFunction, p: ChartPoint, duration: float) -> ChartPoint:
    """Integrate dx/dt = 2 omega^ab grad_b F within the chart of p."""
    backend = obs.backend
    charts = np.array([p.chart])

    def rhs(_, x):
        g, omega, _ = backend.tensors(x[None], charts)
        ginv = np.linalg.inv(g[0])
        return 2.0 * ginv @ omega[0] @ ginv @ obs.gradients(x[None], charts)[0]

    sol = solve_ivp(rhs, (0.0, duration), np.array(p.coords), method="DOP853", rtol=1e-11, atol=1e-13)
    if not sol.success:
        raise ObservableError(f"Hamiltonian flow failed: {sol.message}")
    return ChartPoint(p.backend_id, p.chart, sol.y[:, -1])


@dataclass
class ResidualReport:
    adler_horwitz: float
    commuting_bracket: Optional[float]
    third_derivative: float
    heisenberg_slack: float
    applicable: Dict[str, bool] = field(default_factory=dict)

    def passed(self, tolerances: Optional[Dict[str, float]] = None) -> bool:
        tol = tolerances or config.IDENTITY_TOLERANCES
        ok = self.adler_horwitz < tol["adler_horwitz"] and self.third_derivative < tol["third_derivative"]
        ok = ok and self.heisenberg_slack >= tol["heisenberg"]
        if self.commuting_bracket is not None:
            ok = ok and self.commuting_bracket < tol["commuting_bracket"]
        return bool(ok)

    def to_dict(self) -> Dict[str, object]:
        return {"adler_horwitz": self.adler_horwitz, "commuting_bracket": self.commuting_bracket,
                "third_derivative": self.third_derivative, "heisenberg_slack": self.heisenberg_slack,
                "applicable": dict(self.applicable)}


def _third_covariant(obs: ObservableFunction, p: ChartPoint, gamma: np.ndarray) -> np.ndarray:
    """T[a, b, c] = grad_a grad_b grad_c F by differences of the covariant Hessian."""
    charts = np.array([p.chart])
    step = config.THIRD_DERIVATIVE_STEP
    m = covariant_hessian_batch(obs, p.coords[None], charts)[0]
    dm = richardson_derivative(lambda x: covariant_hessian_batch(obs, x[None], charts)[0], p.coords,
                               steps=(step, step / 2))
    return (np.einsum("bca->abc", dm)
            - np.einsum("eab,ec->abc", gamma, m)
            - np.einsum("eac,be->abc", gamma, m))


def _tensors_at(backend: GeometryBackend, p: ChartPoint):
    coords, charts = p.coords[None], np.array([p.chart])
    g, omega, J = backend.tensors(coords, charts)
    return g[0], omega[0], np.array(J[0]), backend.christoffels(coords, charts)[0], backend.riemann(coords, charts)[0]


def third_derivative_residual(obs: ObservableFunction, p: ChartPoint) -> float:
    """|| grad_a grad_b grad_f F + J_f^c R_bca^d J_d^e grad_e F ||, J_f^c = (g J g^-1)_fc."""
    g, _, J, gamma, r = _tensors_at(obs.backend, p)
    ginv = np.linalg.inv(g)
    jm = g @ J @ ginv
    third = _third_covariant(obs, p, gamma)
    curvature = np.einsum("fc,bcag,gd,de,e->abf", jm, r, ginv, jm, gradient(obs, p))
    return float(np.linalg.norm(third + curvature))


def identity_residuals(F: ObservableFunction, G: ObservableFunction, H: ObservableFunction,
                       p: ChartPoint) -> ResidualReport:
    backend = F.backend
    coords, charts = _at(F, p)
    g, omega, J, gamma, r = _tensors_at(backend, p)
    ginv = np.linalg.inv(g)
    omega_up = ginv @ omega @ ginv
    dF, dG, dH = gradient(F, p), gradient(G, p), gradient(H, p)
    mF = covariant_hessian_batch(F, coords, charts, gamma[None])[0]
    mG = covariant_hessian_batch(G, coords, charts, gamma[None])[0]

    # Adler-Horwitz: grad_b F grad^b grad^a G - grad_b G grad^b grad^a F = omega^ab grad_b P
    lhs = ginv @ mG @ ginv @ dF - ginv @ mF @ ginv @ dG

    def bracket_density(x):
        gx, ox, _ = backend.tensors(x[None], charts)
        gi = np.linalg.inv(gx[0])
        return np.atleast_1d(F.gradients(x[None], charts)[0] @ gi @ ox[0] @ gi @ G.gradients(x[None], charts)[0])

    rhs = omega_up @ richardson_derivative(bracket_density, p.coords)[0]
    diff = lhs - rhs
    adler_horwitz = float(np.sqrt(abs(diff @ g @ diff)))

    commuting = F.commutes_with(H)
    commuting_bracket = None
    if commuting:
        dvf = 2.0 * mF @ ginv @ dF
        commuting_bracket = float(abs(dH @ omega_up @ dvf))

    vf = float(dF @ ginv @ dF)
    vg = float(dG @ ginv @ dG)
    heisenberg = vf * vg - float(dF @ omega_up @ dG) ** 2

    return ResidualReport(
        adler_horwitz=adler_horwitz,
        commuting_bracket=commuting_bracket,
        third_derivative=third_derivative_residual(F, p),
        heisenberg_slack=heisenberg,
        applicable={"adler_horwitz": True, "commuting_bracket": commuting, "third_derivative": True,
                    "heisenberg": True},
    )


def jacobi_residual(F: ObservableFunction, G: ObservableFunction, H: ObservableFunction, p: ChartPoint) -> float:
    """|{F,{G,H}} + {G,{H,F}} + {H,{F,G}}| with brackets of matrix observables."""
    terms = (poisson_bracket(F, commutator(G, H), p)
             + poisson_bracket(G, commutator(H, F), p)
             + poisson_bracket(H, commutator(F, G), p))
    return float(abs(terms))


def drift_identity_residuals(H: ObservableFunction, p: ChartPoint,
                             F: Optional[ObservableFunction] = None) -> Dict[str, Optional[float]]:
    """Pointwise agreement of the dispersion drift forms (sigma = 1).

    energy_ito_vs_third:  -1/4 |grad V|^2 + 1/2 X^a X^b grad_a grad_b V  vs  X^a X^b X^c grad_abc H
    energy_third_vs_curvature:  X^a X^b X^c grad_abc H  vs  -K_H V^2
    tracked_ito_vs_curvature:  1/2 (X X grad grad V^F - grad^a grad^b H grad_a H grad_b V^F)  vs  -K_FH V^F V^H
    with X^a = grad^a H.
    """
    backend = H.backend
    coords, charts = _at(H, p)
    g, _, J, gamma, r = _tensors_at(backend, p)
    ginv = np.linalg.inv(g)
    dH = gradient(H, p)
    X = ginv @ dH
    V = float(dH @ X)
    mH = covariant_hessian_batch(H, coords, charts, gamma[None])[0]

    def dispersion_gradient(obs):
        def fn(x):
            d = obs.gradients(x[None], charts)[0]
            gx = backend.tensors(x[None], charts)[0][0]
            m = covariant_hessian_batch(obs, x[None], charts)[0]
            return 2.0 * m @ np.linalg.solve(gx, d)
        return fn

    dv_fn = dispersion_gradient(H)
    dV = dv_fn(p.coords)
    hess_v = richardson_derivative(dv_fn, p.coords).T - np.einsum("cab,c->ab", gamma, dV)
    ito = -0.25 * dV @ ginv @ dV + 0.5 * X @ hess_v @ X
    third = np.einsum("abc,a,b,c->", _third_covariant(H, p, gamma), X, X, X)
    kh = bisectional_batch(r[None], g[None], J[None], dH[None], dH[None])[0]
    out: Dict[str, Optional[float]] = {
        "energy_ito_vs_third": float(abs(ito - third)),
        "energy_third_vs_curvature": float(abs(third + kh * V ** 2)) if np.isfinite(kh) else 0.0,
        "tracked_ito_vs_curvature": None,
    }
    if F is not None and F.commutes_with(H):
        dF = gradient(F, p)
        VF = float(dF @ ginv @ dF)
        dvf_fn = dispersion_gradient(F)
        dVF = dvf_fn(p.coords)
        hess_vf = richardson_derivative(dvf_fn, p.coords).T - np.einsum("cab,c->ab", gamma, dVF)
        ito_f = 0.5 * (X @ hess_vf @ X - (ginv @ mH @ ginv @ dH) @ dVF)
        kfh = bisectional_batch(r[None], g[None], J[None], dF[None], dH[None])[0]
        if np.isfinite(kfh):
            out["tracked_ito_vs_curvature"] = float(abs(ito_f + kfh * VF * V))
    return out
