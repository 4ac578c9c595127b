"""
Kähler geometry of the state manifold.

Three backends evaluate the metric g, symplectic form omega, complex structure J,
Levi-Civita connection and Riemann tensor in interleaved real chart coordinates
(x_1, y_1, ..., x_n, y_n):

- ProjectiveBackend: CP^n with the Fubini-Study metric in its n+1 affine charts,
  normalized so that the holomorphic sectional curvature is 1 (on CP^1 the line
  element is 4|dz|^2/(1+|z|^2)^2).
- ProductBackend: finite products of CP^{n_i}, block-diagonal tensors.
- PotentialBackend: a single chart with a U(1)^n-invariant Kähler potential,
  differentiated with nested forward-mode JAX.

Riemann sign convention: grad_a grad_b A_c - grad_b grad_a A_c = -R_abc^d A_d,
so R = -R(MTW) and K_H = -R(X, JX, X, JX) / |X|^4 is +1 on CP^n.

All batched functions take coords of shape (N, 2n) and integer charts of shape (N,).
"""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import config
from utils.numerics import jax, jnp, richardson_derivative

logger = logging.getLogger(__name__)


class GeometryError(Exception):
    """Base class for geometry failures."""


class InvalidPointError(GeometryError, ValueError):
    pass


class DifferentiationError(GeometryError):
    pass


class DegeneratePlaneError(GeometryError):
    pass


class UnreachableChartError(GeometryError):
    pass


class EstimationError(GeometryError):
    pass


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChartPoint:
    """A state: backend id, chart index and 2n real affine coordinates."""

    backend_id: str
    chart: int
    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float).reshape(-1)
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "chart", int(self.chart))

    @property
    def z(self) -> np.ndarray:
        return self.coords[0::2] + 1j * self.coords[1::2]

    def to_dict(self) -> Dict[str, Any]:
        return {"backend_id": self.backend_id, "chart": self.chart, "coords": [float(c) for c in self.coords]}


@dataclass(frozen=True)
class MetricTensors:
    g: np.ndarray
    omega: np.ndarray
    J: np.ndarray


@dataclass(frozen=True)
class Connection:
    gamma: np.ndarray  # gamma[a, b, c] = Gamma^a_bc


@dataclass(frozen=True)
class Riemann:
    r: np.ndarray  # all indices lowered


# ---------------------------------------------------------------------------
# Tensor algebra shared by the backends
# ---------------------------------------------------------------------------

def complex_structure(n: int) -> np.ndarray:
    """Blockwise rotation; J(e_x) = -e_y, which makes 2 omega^ab grad_b H the Schrödinger flow."""
    J = np.zeros((2 * n, 2 * n))
    for i in range(n):
        J[2 * i, 2 * i + 1] = 1.0
        J[2 * i + 1, 2 * i] = -1.0
    return J


def split_complex(coords: np.ndarray) -> np.ndarray:
    return coords[..., 0::2] + 1j * coords[..., 1::2]


def interleave(z: np.ndarray) -> np.ndarray:
    out = np.empty(z.shape[:-1] + (2 * z.shape[-1],))
    out[..., 0::2] = z.real
    out[..., 1::2] = z.imag
    return out


def hermitian_to_real_metric(h: np.ndarray) -> np.ndarray:
    """g(X, Y) = 4 Re(h_ij X^i conj(Y^j)) written in interleaved real coordinates."""
    n = h.shape[-1]
    g = np.empty(h.shape[:-2] + (2 * n, 2 * n))
    g[..., 0::2, 0::2] = 4.0 * h.real
    g[..., 0::2, 1::2] = 4.0 * h.imag
    g[..., 1::2, 0::2] = -4.0 * h.imag
    g[..., 1::2, 1::2] = 4.0 * h.real
    return g


def holomorphic_christoffel_to_real(gc: np.ndarray) -> np.ndarray:
    """Real Christoffels from the holomorphic ones Gamma^i_jk (gc[..., i, j, k])."""
    n = gc.shape[-1]
    gamma = np.zeros(gc.shape[:-3] + (2 * n, 2 * n, 2 * n))
    factors = (1.0, 1j)
    for a in range(2):
        for b in range(2):
            w = gc * factors[a] * factors[b]
            gamma[..., 0::2, a::2, b::2] = w.real
            gamma[..., 1::2, a::2, b::2] = w.imag
    return gamma


def fubini_study_riemann(g: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """R_abcd = -1/4 (g_ac g_bd - g_bc g_ad + w_ac w_bd - w_bc w_ad + 2 w_ab w_cd)."""
    return -0.25 * (
        np.einsum("...ac,...bd->...abcd", g, g)
        - np.einsum("...bc,...ad->...abcd", g, g)
        + np.einsum("...ac,...bd->...abcd", omega, omega)
        - np.einsum("...bc,...ad->...abcd", omega, omega)
        + 2.0 * np.einsum("...ab,...cd->...abcd", omega, omega)
    )


def christoffels_from_metric_derivative(ginv, dg, xp=np):
    """dg[..., i, j, k] = d_k g_ij."""
    return 0.5 * (xp.einsum("...im,...mkl->...ikl", ginv, dg)
                  + xp.einsum("...im,...mlk->...ikl", ginv, dg)
                  - xp.einsum("...im,...klm->...ikl", ginv, dg))


def riemann_from_connection(g, gamma, dgamma, xp=np):
    """Lowered Riemann tensor from Gamma and dgamma[..., a, b, c, e] = d_e Gamma^a_bc."""
    rup = (xp.einsum("...adbc->...abcd", dgamma)
           - xp.einsum("...acbd->...abcd", dgamma)
           + xp.einsum("...ace,...edb->...abcd", gamma, gamma)
           - xp.einsum("...ade,...ecb->...abcd", gamma, gamma))
    return -xp.einsum("...ae,...ebcd->...abcd", g, rup)


def bisectional_batch(r: np.ndarray, g: np.ndarray, J: np.ndarray,
                      grad_f: np.ndarray, grad_h: np.ndarray) -> np.ndarray:
    """K_FH per point; NaN where either gradient norm is below GRADIENT_FLOOR."""
    ginv = np.linalg.inv(g)
    X = np.einsum("...ab,...b->...a", ginv, grad_f)
    Y = np.einsum("...ab,...b->...a", ginv, grad_h)
    JX = np.einsum("...ab,...b->...a", J, X)
    JY = np.einsum("...ab,...b->...a", J, Y)
    nx = np.einsum("...a,...a->...", grad_f, X)
    ny = np.einsum("...a,...a->...", grad_h, Y)
    num = np.einsum("...apbq,...a,...p,...b,...q->...", r, X, JX, Y, JY)
    floor = config.GRADIENT_FLOOR ** 2
    degenerate = (nx <= floor) | (ny <= floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = -num / (nx * ny)
    return np.where(degenerate, np.nan, k)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class GeometryBackend(ABC):
    """Immutable evaluator of Kähler tensors on one manifold."""

    kind: str = "abstract"

    def __init__(self, backend_id: str, factor_dims: Sequence[int]):
        self.backend_id = backend_id
        self.factor_dims = tuple(int(n) for n in factor_dims)
        self.complex_dimension = int(sum(self.factor_dims))
        self.real_dimension = 2 * self.complex_dimension
        self.J = complex_structure(self.complex_dimension)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.backend_id})"

    # --- atlas -----------------------------------------------------------
    @property
    @abstractmethod
    def n_charts(self) -> int:
        ...

    @property
    def is_projective(self) -> bool:
        return False

    @property
    def constant_holomorphic_curvature(self) -> Optional[float]:
        return None

    def needs_switch(self, coords: np.ndarray) -> np.ndarray:
        return np.zeros(coords.shape[0], dtype=bool)

    def preferred_chart(self, coords: np.ndarray, charts: np.ndarray) -> np.ndarray:
        return np.asarray(charts, dtype=int)

    @abstractmethod
    def transition(self, coords: np.ndarray, charts: np.ndarray, target: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def sample(self, rng: np.random.Generator, count: int) -> Tuple[np.ndarray, np.ndarray]:
        ...

    def homogeneous(self, coords: np.ndarray, charts: np.ndarray) -> List[np.ndarray]:
        raise GeometryError(f"{self.backend_id}: no homogeneous coordinates")

    def from_homogeneous(self, psis: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        raise GeometryError(f"{self.backend_id}: no homogeneous coordinates")

    def distance(self, coords_a, charts_a, coords_b, charts_b) -> np.ndarray:
        raise GeometryError(f"{self.backend_id}: no closed-form geodesic distance")

    # --- tensors ---------------------------------------------------------
    @abstractmethod
    def tensors(self, coords: np.ndarray, charts: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return batched (g, omega, J)."""

    @abstractmethod
    def christoffels(self, coords: np.ndarray, charts: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def riemann(self, coords: np.ndarray, charts: np.ndarray) -> np.ndarray:
        ...

    def validate(self, p: ChartPoint) -> None:
        if p.backend_id != self.backend_id:
            raise InvalidPointError(f"point belongs to backend {p.backend_id!r}, not {self.backend_id!r}")
        if p.coords.shape[0] != self.real_dimension:
            raise InvalidPointError(
                f"expected {self.real_dimension} coordinates, got {p.coords.shape[0]}")
        if not np.all(np.isfinite(p.coords)):
            raise InvalidPointError("non-finite coordinates")
        if not 0 <= p.chart < self.n_charts:
            raise InvalidPointError(f"chart {p.chart} outside atlas of {self.n_charts} charts")

    def point(self, coords: Sequence[float], chart: int = 0) -> ChartPoint:
        p = ChartPoint(self.backend_id, chart, np.asarray(coords, dtype=float))
        self.validate(p)
        return p


class ProjectiveBackend(GeometryBackend):
    """CP^n, Fubini-Study metric in affine charts z_i = psi_i / psi_k."""

    kind = "cpn"

    def __init__(self, n: int, backend_id: Optional[str] = None):
        if int(n) < 1:
            raise GeometryError("CP^n needs n >= 1")
        super().__init__(backend_id or f"cp{int(n)}", [int(n)])
        self.n = int(n)
        # affine slot -> homogeneous index, per chart
        self._others = np.array([[i for i in range(self.n + 1) if i != k] for k in range(self.n + 1)], dtype=int)

    @property
    def n_charts(self) -> int:
        return self.n + 1

    @property
    def is_projective(self) -> bool:
        return True

    @property
    def constant_holomorphic_curvature(self) -> Optional[float]:
        return 1.0

    def homogeneous(self, coords, charts):
        coords = np.atleast_2d(coords)
        charts = np.asarray(charts, dtype=int).reshape(-1)
        psi = np.zeros((coords.shape[0], self.n + 1), dtype=complex)
        rows = np.arange(coords.shape[0])
        psi[rows, charts] = 1.0
        np.put_along_axis(psi, self._others[charts], split_complex(coords), axis=1)
        return [psi]

    def from_homogeneous(self, psis):
        psi = np.atleast_2d(np.asarray(psis[0], dtype=complex))
        charts = np.argmax(np.abs(psi), axis=1)
        return self._project(psi, charts), charts

    def _project(self, psi: np.ndarray, charts: np.ndarray) -> np.ndarray:
        rows = np.arange(psi.shape[0])
        denom = psi[rows, charts]
        scale = np.linalg.norm(psi, axis=1)
        if np.any(np.abs(denom) < config.SINGULAR_DENOMINATOR * scale):
            raise UnreachableChartError("point not representable in target chart")
        z = np.take_along_axis(psi, self._others[charts], axis=1) / denom[:, None]
        return interleave(z)

    def transition(self, coords, charts, target):
        psi = self.homogeneous(coords, charts)[0]
        target = np.broadcast_to(np.asarray(target, dtype=int), (psi.shape[0],))
        return self._project(psi, target)

    def needs_switch(self, coords):
        return np.any(np.abs(split_complex(coords)) > config.CHART_SWITCH_RADIUS, axis=-1)

    def preferred_chart(self, coords, charts):
        psi = self.homogeneous(coords, charts)[0]
        return np.argmax(np.abs(psi), axis=1)

    def sample(self, rng, count):
        charts = rng.integers(0, self.n + 1, size=count)
        radius = config.SAMPLING_RADIUS * np.sqrt(rng.random((count, self.n)))
        angle = 2.0 * np.pi * rng.random((count, self.n))
        return interleave(radius * np.exp(1j * angle)), charts

    def distance(self, coords_a, charts_a, coords_b, charts_b):
        pa = self.homogeneous(coords_a, charts_a)[0]
        pb = self.homogeneous(coords_b, charts_b)[0]
        overlap = np.abs(np.einsum("ni,ni->n", pa.conj(), pb))
        overlap /= np.linalg.norm(pa, axis=1) * np.linalg.norm(pb, axis=1)
        return 2.0 * np.arccos(np.clip(overlap, 0.0, 1.0))

    def tensors(self, coords, charts):
        z = split_complex(np.atleast_2d(coords))
        s = np.sum(np.abs(z) ** 2, axis=-1)[:, None, None]
        eye = np.eye(self.n)
        h = ((1.0 + s) * eye - np.einsum("ni,nj->nij", z.conj(), z)) / (1.0 + s) ** 2
        g = hermitian_to_real_metric(h)
        J = np.broadcast_to(self.J, g.shape)
        omega = np.einsum("nac,ncb->nab", g, J)
        return g, omega, J

    def christoffels(self, coords, charts):
        z = split_complex(np.atleast_2d(coords))
        s = np.sum(np.abs(z) ** 2, axis=-1)[:, None, None, None]
        eye = np.eye(self.n)
        zb = z.conj()
        gc = -(np.einsum("ij,nk->nijk", eye, zb) + np.einsum("ik,nj->nijk", eye, zb)) / (1.0 + s)
        return holomorphic_christoffel_to_real(gc)

    def riemann(self, coords, charts):
        g, omega, _ = self.tensors(coords, charts)
        return fubini_study_riemann(g, omega)


class ProductBackend(GeometryBackend):
    """CP^{n_1} x ... x CP^{n_k}; charts encoded mixed-radix, first factor fastest."""

    kind = "product"

    def __init__(self, factors: Sequence[int], backend_id: Optional[str] = None):
        if len(factors) < 1:
            raise GeometryError("product backend needs at least one factor")
        self.factors = [ProjectiveBackend(n) for n in factors]
        label = "x".join(f"cp{int(n)}" for n in factors)
        super().__init__(backend_id or label, [f.n for f in self.factors])
        self._radices = [f.n + 1 for f in self.factors]
        self._strides = np.cumprod([1] + self._radices[:-1]).astype(int)
        offsets = np.cumsum([0] + [2 * f.n for f in self.factors])
        self._slices = [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(len(self.factors))]

    @property
    def n_charts(self) -> int:
        return int(np.prod(self._radices))

    @property
    def slices(self) -> List[slice]:
        return list(self._slices)

    def decode_chart(self, charts) -> List[np.ndarray]:
        charts = np.asarray(charts, dtype=int).reshape(-1)
        return [(charts // stride) % radix for stride, radix in zip(self._strides, self._radices)]

    def encode_chart(self, parts: Sequence[np.ndarray]) -> np.ndarray:
        return sum(np.asarray(c, dtype=int) * stride for c, stride in zip(parts, self._strides))

    def homogeneous(self, coords, charts):
        coords = np.atleast_2d(coords)
        parts = self.decode_chart(charts)
        return [f.homogeneous(coords[:, sl], c)[0] for f, sl, c in zip(self.factors, self._slices, parts)]

    def from_homogeneous(self, psis):
        coords, parts = [], []
        for f, psi in zip(self.factors, psis):
            c, ch = f.from_homogeneous([psi])
            coords.append(c)
            parts.append(ch)
        return np.concatenate(coords, axis=1), self.encode_chart(parts)

    def transition(self, coords, charts, target):
        coords = np.atleast_2d(coords)
        target = np.broadcast_to(np.asarray(target, dtype=int), (coords.shape[0],))
        parts = self.decode_chart(charts)
        targets = self.decode_chart(target)
        out = [f.transition(coords[:, sl], c, t) for f, sl, c, t in zip(self.factors, self._slices, parts, targets)]
        return np.concatenate(out, axis=1)

    def needs_switch(self, coords):
        coords = np.atleast_2d(coords)
        return np.any(np.stack([f.needs_switch(coords[:, sl]) for f, sl in zip(self.factors, self._slices)]), axis=0)

    def preferred_chart(self, coords, charts):
        coords = np.atleast_2d(coords)
        parts = self.decode_chart(charts)
        return self.encode_chart([f.preferred_chart(coords[:, sl], c)
                                  for f, sl, c in zip(self.factors, self._slices, parts)])

    def sample(self, rng, count):
        coords, parts = [], []
        for f in self.factors:
            c, ch = f.sample(rng, count)
            coords.append(c)
            parts.append(ch)
        return np.concatenate(coords, axis=1), self.encode_chart(parts)

    def distance(self, coords_a, charts_a, coords_b, charts_b):
        coords_a, coords_b = np.atleast_2d(coords_a), np.atleast_2d(coords_b)
        pa, pb = self.decode_chart(charts_a), self.decode_chart(charts_b)
        sq = sum(f.distance(coords_a[:, sl], ca, coords_b[:, sl], cb) ** 2
                 for f, sl, ca, cb in zip(self.factors, self._slices, pa, pb))
        return np.sqrt(sq)

    def _blocks(self, coords, rank: int, evaluate) -> np.ndarray:
        coords = np.atleast_2d(coords)
        d = self.real_dimension
        out = np.zeros((coords.shape[0],) + (d,) * rank)
        for f, sl in zip(self.factors, self._slices):
            block = evaluate(f, coords[:, sl])
            index = (slice(None),) + (sl,) * rank
            out[index] = block
        return out

    def tensors(self, coords, charts):
        g = self._blocks(coords, 2, lambda f, c: f.tensors(c, None)[0])
        J = np.broadcast_to(self.J, g.shape)
        omega = np.einsum("nac,ncb->nab", g, J)
        return g, omega, J

    def christoffels(self, coords, charts):
        return self._blocks(coords, 3, lambda f, c: f.christoffels(c, None))

    def riemann(self, coords, charts):
        return self._blocks(coords, 4, lambda f, c: f.riemann(c, None))


def _potential_family(name: str, params: Mapping[str, float]):
    scale = float(params.get("scale", 1.0))
    epsilon = float(params.get("epsilon", 0.1))

    def moduli(x):
        return x[0::2] ** 2 + x[1::2] ** 2

    families = {
        "flat": lambda x: jnp.sum(moduli(x)),
        "fubini_study": lambda x: scale * jnp.log1p(jnp.sum(moduli(x))),
        "product_fubini_study": lambda x: jnp.sum(jnp.log1p(moduli(x))),
        "quartic": lambda x: jnp.sum(moduli(x)) + epsilon * jnp.sum(moduli(x)) ** 2,
        "indefinite": lambda x: jnp.sum(moduli(x)) - epsilon * jnp.sum(moduli(x)) ** 2,
    }
    if name not in families:
        raise GeometryError(f"unknown potential {name!r}; choose from {sorted(families)}")
    return families[name]


class PotentialBackend(GeometryBackend):
    """Single chart C^n with metric g = Hess K + J^T Hess K J from a Kähler potential K."""

    kind = "potential"

    def __init__(self, n: int, potential: str = "flat", params: Optional[Mapping[str, float]] = None,
                 backend_id: Optional[str] = None):
        self.potential_name = potential
        self.params = dict(params or {})
        super().__init__(backend_id or f"potential-{potential}-{int(n)}", [int(n)])
        self.potential = _potential_family(potential, self.params)
        Jc = jnp.asarray(self.J)

        def metric(x):
            hess = jax.jacfwd(jax.jacfwd(self.potential))(x)
            g = hess + Jc.T @ hess @ Jc
            return 0.5 * (g + g.T)

        def gamma(x):
            return christoffels_from_metric_derivative(jnp.linalg.inv(metric(x)), jax.jacfwd(metric)(x), xp=jnp)

        def riemann(x):
            return riemann_from_connection(metric(x), gamma(x), jax.jacfwd(gamma)(x), xp=jnp)

        self._metric = jax.jit(jax.vmap(metric))
        self._gamma = jax.jit(jax.vmap(gamma))
        self._riemann = jax.jit(jax.vmap(riemann))

    @property
    def n_charts(self) -> int:
        return 1

    def transition(self, coords, charts, target):
        if np.any(np.asarray(target) != 0):
            raise UnreachableChartError(f"{self.backend_id} has a single chart")
        return np.array(np.atleast_2d(coords), dtype=float)

    def sample(self, rng, count):
        n = self.complex_dimension
        radius = config.SAMPLING_RADIUS * np.sqrt(rng.random((count, n)))
        angle = 2.0 * np.pi * rng.random((count, n))
        return interleave(radius * np.exp(1j * angle)), np.zeros(count, dtype=int)

    def _checked(self, fn, coords) -> np.ndarray:
        out = np.asarray(fn(jnp.asarray(np.atleast_2d(coords), dtype=jnp.float64)))
        if not np.all(np.isfinite(out)):
            raise DifferentiationError(f"{self.backend_id}: potential derivatives not finite")
        return out

    def tensors(self, coords, charts):
        g = self._checked(self._metric, coords)
        J = np.broadcast_to(self.J, g.shape)
        omega = np.einsum("nac,ncb->nab", g, J)
        return g, omega, J

    def christoffels(self, coords, charts):
        return self._checked(self._gamma, coords)

    def riemann(self, coords, charts):
        return self._checked(self._riemann, coords)


def build_backend(block: Mapping[str, Any]) -> GeometryBackend:
    """Backend from a declarative block such as {"kind": "cpn", "n": 2}."""
    kind = block.get("kind")
    if kind == "cpn":
        return ProjectiveBackend(int(block.get("n", 1)))
    if kind == "product":
        return ProductBackend([int(n) for n in block.get("factors", [])])
    if kind == "potential":
        params = {k: float(block[k]) for k in ("scale", "epsilon") if k in block}
        return PotentialBackend(int(block.get("n", 1)), str(block.get("potential", "flat")), params)
    raise GeometryError(f"unknown backend kind {kind!r}")


# ---------------------------------------------------------------------------
# Pointwise operations
# ---------------------------------------------------------------------------

def _single(backend: GeometryBackend, p: ChartPoint) -> Tuple[np.ndarray, np.ndarray]:
    backend.validate(p)
    return p.coords[None, :], np.array([p.chart])


def metric_at(backend: GeometryBackend, p: ChartPoint) -> MetricTensors:
    coords, charts = _single(backend, p)
    g, omega, J = backend.tensors(coords, charts)
    return MetricTensors(g=g[0], omega=omega[0], J=np.array(J[0]))


def christoffels_at(backend: GeometryBackend, p: ChartPoint) -> Connection:
    coords, charts = _single(backend, p)
    return Connection(gamma=backend.christoffels(coords, charts)[0])


def riemann_at(backend: GeometryBackend, p: ChartPoint) -> Riemann:
    coords, charts = _single(backend, p)
    return Riemann(r=backend.riemann(coords, charts)[0])


def bisectional_curvature_FH(backend: GeometryBackend, p: ChartPoint,
                             gradF: np.ndarray, gradH: np.ndarray) -> float:
    coords, charts = _single(backend, p)
    g, _, J = backend.tensors(coords, charts)
    r = backend.riemann(coords, charts)
    k = bisectional_batch(r, g, J, np.asarray(gradF, float)[None], np.asarray(gradH, float)[None])[0]
    if np.isnan(k):
        raise DegeneratePlaneError("gradient below degeneracy threshold")
    return float(k)


def sectional_curvature_H(backend: GeometryBackend, p: ChartPoint, gradH: np.ndarray) -> float:
    return bisectional_curvature_FH(backend, p, gradH, gradH)


def holomorphic_sectional_batch(backend: GeometryBackend, coords: np.ndarray, charts: np.ndarray,
                                grads: np.ndarray) -> np.ndarray:
    g, _, J = backend.tensors(coords, charts)
    r = backend.riemann(coords, charts)
    return bisectional_batch(r, g, J, grads, grads)


def chart_transition(backend: GeometryBackend, p: ChartPoint, target_chart: int) -> ChartPoint:
    coords, charts = _single(backend, p)
    if not 0 <= int(target_chart) < backend.n_charts:
        raise InvalidPointError(f"target chart {target_chart} outside atlas")
    moved = backend.transition(coords, charts, np.array([int(target_chart)]))
    return ChartPoint(backend.backend_id, int(target_chart), moved[0])


def preferred_chart(backend: GeometryBackend, p: ChartPoint) -> ChartPoint:
    coords, charts = _single(backend, p)
    target = int(backend.preferred_chart(coords, charts)[0])
    if target == p.chart:
        return p
    return chart_transition(backend, p, target)


def homogeneous_lift(backend: GeometryBackend, p: ChartPoint) -> List[np.ndarray]:
    coords, charts = _single(backend, p)
    return [psi[0] for psi in backend.homogeneous(coords, charts)]


def point_from_homogeneous(backend: GeometryBackend, psis: Sequence[np.ndarray]) -> ChartPoint:
    coords, charts = backend.from_homogeneous([np.atleast_2d(psi) for psi in psis])
    return ChartPoint(backend.backend_id, int(charts[0]), coords[0])


def fubini_study_distance(backend: GeometryBackend, p: ChartPoint, q: ChartPoint) -> float:
    ca, cha = _single(backend, p)
    cb, chb = _single(backend, q)
    return float(backend.distance(ca, cha, cb, chb)[0])


def sample_points(backend: GeometryBackend, count: int, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    return backend.sample(rng, int(count))


def curvature_extremes(backend: GeometryBackend, H, sample_count: int, seed: int = 0,
                       batch: int = 2048) -> Tuple[float, float]:
    """(inf, sup) of K_H at sampled points; exact on CP^n, where K_H is constant."""
    if sample_count < 1:
        raise EstimationError("sample_count must be >= 1")
    constant = backend.constant_holomorphic_curvature
    if constant is not None:
        return constant, constant
    coords, charts = sample_points(backend, sample_count, seed)
    values = []
    for start in range(0, sample_count, batch):
        c, ch = coords[start:start + batch], charts[start:start + batch]
        values.append(holomorphic_sectional_batch(backend, c, ch, H.gradients(c, ch)))
    k = np.concatenate(values)
    k = k[np.isfinite(k)]
    if k.size == 0:
        raise EstimationError("all sampled points are critical for H")
    logger.debug("curvature_extremes %s: %d usable samples", backend.backend_id, k.size)
    return float(np.min(k)), float(np.max(k))


# ---------------------------------------------------------------------------
# Invariant suite
# ---------------------------------------------------------------------------

def _normalized(residual: np.ndarray, reference: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(reference))), 1.0)
    value = float(np.max(np.abs(residual))) / scale
    return value if np.isfinite(value) else float("inf")


def _check(name: str, statistic: float, threshold: float, lower_is_better: bool = True) -> Dict[str, Any]:
    passed = statistic <= threshold if lower_is_better else statistic >= threshold
    return {"name": name, "statistic": float(statistic), "threshold": float(threshold), "passed": bool(passed)}


def connection_oracle(backend: GeometryBackend, coords: np.ndarray, chart: int) -> np.ndarray:
    """Derivative-computed Riemann from finite differences of the closed-form Christoffels."""
    charts = np.array([chart])
    g = backend.tensors(coords[None], charts)[0][0]
    gamma = backend.christoffels(coords[None], charts)[0]
    dgamma = richardson_derivative(lambda x: backend.christoffels(x[None], charts)[0], coords)
    return riemann_from_connection(g, gamma, dgamma)


def invariant_report(backend: GeometryBackend, count: int = 100, seed: int = 0, H=None) -> Dict[str, Any]:
    """Run the geometry invariant suite at sampled points; returns a JSON-ready dict."""
    tol = config.IDENTITY_TOLERANCES
    coords, charts = sample_points(backend, count, seed)
    g, omega, J = backend.tensors(coords, charts)
    eye = np.eye(backend.real_dimension)
    checks = []
    try:
        gamma = backend.christoffels(coords, charts)
        r = backend.riemann(coords, charts)
    except DifferentiationError as exc:
        logger.warning("%s: %s", backend.backend_id, exc)
        min_eig = float(np.min(np.linalg.eigvalsh(g)))
        checks.append(_check("metric_positive_definite", min_eig, 0.0, lower_is_better=False))
        checks.append({"name": "derivatives_finite", "statistic": float("inf"), "threshold": 0.0, "passed": False})
        return {"backend": backend.backend_id, "kind": backend.kind, "points": int(count),
                "max_abs_riemann": float("inf"), "checks": checks, "passed": False}

    checks.append(_check("metric_symmetric", _normalized(g - np.swapaxes(g, -1, -2), g), tol["compatibility"]))
    min_eig = float(np.min(np.linalg.eigvalsh(0.5 * (g + np.swapaxes(g, -1, -2)))))
    checks.append(_check("metric_positive_definite", min_eig, 0.0, lower_is_better=False))
    if min_eig <= 0.0:
        logger.warning("%s: metric not positive definite (min eigenvalue %.3e)", backend.backend_id, min_eig)
    checks.append(_check("J_squared", _normalized(np.einsum("nab,nbc->nac", J, J) + eye, eye), tol["compatibility"]))
    with np.errstate(all="ignore"):
        ginv_omega = np.linalg.solve(g, omega)
    checks.append(_check("ginv_omega_is_J", _normalized(ginv_omega - J, J), tol["compatibility"]))
    checks.append(_check("omega_antisymmetric", _normalized(omega + np.swapaxes(omega, -1, -2), omega),
                         tol["compatibility"]))
    checks.append(_check("christoffel_symmetric", _normalized(gamma - np.swapaxes(gamma, -1, -2), gamma), 1e-12))
    parallel_J = (np.einsum("nbad,ndc->nabc", gamma, J) - np.einsum("ndac,nbd->nabc", gamma, J))
    checks.append(_check("parallel_J", _normalized(parallel_J, eye), tol["parallel_J"]))

    checks.append(_check("riemann_antisymmetric_ab", _normalized(r + np.swapaxes(r, 1, 2), r),
                         tol["riemann_symmetry"]))
    checks.append(_check("riemann_antisymmetric_cd", _normalized(r + np.swapaxes(r, 3, 4), r),
                         tol["riemann_symmetry"]))
    checks.append(_check("riemann_pair_symmetry", _normalized(r - np.transpose(r, (0, 3, 4, 1, 2)), r),
                         tol["riemann_symmetry"]))
    bianchi = r + np.transpose(r, (0, 2, 3, 1, 4)) + np.transpose(r, (0, 3, 1, 2, 4))
    checks.append(_check("first_bianchi", _normalized(bianchi, r), tol["riemann_symmetry"]))

    # metric compatibility and closed form vs derivatives, on a handful of points
    subset = min(count, 10)
    compat, closed = [], []
    for k in range(subset):
        x, ch = coords[k], int(charts[k])
        dg = richardson_derivative(lambda y: backend.tensors(y[None], np.array([ch]))[0][0], x)
        compat.append(np.max(np.abs(dg - np.einsum("dba,dc->bca", gamma[k], g[k])
                                    - np.einsum("dca,bd->bca", gamma[k], g[k]))))
        if backend.is_projective:
            closed.append(_normalized(connection_oracle(backend, x, ch) - r[k], r[k]))
    checks.append(_check("metric_compatibility", float(np.max(compat)), tol["parallel_J"]))
    if closed:
        checks.append(_check("closed_form_riemann", float(np.max(closed)), tol["closed_form"]))

    if backend.n_charts > 1:
        targets = (charts + 1) % backend.n_charts
        try:
            there = backend.transition(coords, charts, targets)
            back = backend.transition(there, targets, charts)
            checks.append(_check("chart_round_trip", _normalized(back - coords, coords), 1e-12))
        except UnreachableChartError:
            logger.info("chart round trip skipped: sampled point on a singular locus")

    if H is not None:
        grads = H.gradients(coords, charts)
        k1 = bisectional_batch(r, g, J, grads, grads)
        homogeneity = [np.nanmax(np.abs(bisectional_batch(r, g, J, s * grads, s * grads) - k1))
                       for s in (1e-3, 1e3)]
        checks.append(_check("curvature_homogeneity", float(np.max(homogeneity)), 1e-10))
        if backend.n_charts > 1:
            checks.append(_check("chart_invariance", _chart_invariance(backend, H, coords, charts),
                                 tol["chart_invariance"]))

    return {
        "backend": backend.backend_id,
        "kind": backend.kind,
        "points": int(count),
        "max_abs_riemann": float(np.max(np.abs(r))) if np.all(np.isfinite(r)) else float("inf"),
        "checks": checks,
        "passed": all(c["passed"] for c in checks),
    }


def _chart_invariance(backend: GeometryBackend, H, coords: np.ndarray, charts: np.ndarray) -> float:
    """Largest change of H, V^H and K_H when each point moves to its preferred chart."""
    targets = backend.preferred_chart(coords, charts)
    moved = backend.transition(coords, charts, targets)
    worst = 0.0
    values = []
    for c, ch in ((coords, charts), (moved, targets)):
        g, _, J = backend.tensors(c, ch)
        grads = H.gradients(c, ch)
        v = np.einsum("na,na->n", grads, np.linalg.solve(g, grads[..., None])[..., 0])
        k = bisectional_batch(backend.riemann(c, ch), g, J, grads, grads)
        values.append((H.values(c, ch), v, k))
    for a, b in zip(values[0], values[1]):
        mask = np.isfinite(a) & np.isfinite(b)
        if np.any(mask):
            worst = max(worst, float(np.max(np.abs(a[mask] - b[mask]))))
    return worst
