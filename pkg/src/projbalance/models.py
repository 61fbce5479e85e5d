"""Explicit test geometries.

Two families are provided, both with closed-form reference metrics:

* ``p1-split``: ``E = O(a_1) + ... + O(a_r)`` over P^1 with the
  Fubini-Study metric ``g = 1/(1+|z|^2)`` on ``L = O(1)``.  Two charts are
  used, ``z`` on the northern hemisphere (chart 0) and ``u = 1/z`` on the
  southern one (chart 1).  A degree-``m`` monomial ``X_0^{m-j} X_1^j`` takes
  the value ``z^j`` in chart 0 and ``u^{m-j}`` in chart 1.
* ``torus-line``: a line bundle of degree ``d0`` over ``C/(Z + tau Z)`` with
  the Gaussian metric ``exp(-2 pi d0 y^2 / Im tau)``; sections of ``L^k``
  are theta functions with characteristics.

Kähler forms are normalised as ``omega = (i/2) ddbar phi`` for a weight
``phi = -log g``, so P^1 has area ``pi`` and a degree-one line bundle has
curvature integral ``pi``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .hermcore import multi_indices

THETA_TERM_BUDGET = 400


class MeshTooSmall(ValueError):
    pass


class ThetaTruncationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    degrees: tuple = (0,)
    k: int = 0
    d: int = 1
    tau: complex = 1j
    d0: int = 1
    mesh_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("p1-split", "torus-line"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.k < 0:
            raise ValueError("k must be nonnegative")
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.kind == "torus-line":
            if complex(self.tau).imag <= 0:
                raise ValueError("Im tau must be positive")
            object.__setattr__(self, "degrees", (0,))
        if len(self.degrees) < 1:
            raise ValueError("need at least one summand")
        object.__setattr__(self, "degrees", tuple(int(a) for a in self.degrees))

    @property
    def r(self):
        return len(self.degrees)

    @property
    def slope(self):
        if self.kind == "torus-line":
            return 0.0
        return sum(self.degrees) / self.r

    @property
    def hermitian_einstein(self):
        """Whether the reference metric solves ``iF = mu omega I``."""
        return self.r == 1 or len(set(self.degrees)) == 1

    def with_k(self, k):
        return ModelSpec(self.kind, self.degrees, k, self.d, self.tau, self.d0, self.mesh_size)

    def with_d(self, d):
        return ModelSpec(self.kind, self.degrees, self.k, d, self.tau, self.d0, self.mesh_size)


@dataclass(eq=False)
class BaseMesh:
    """Quadrature on the base curve.

    ``weights`` integrate against ``omega_inf``; ``density`` is
    ``omega_inf`` divided by Lebesgue measure in the chart coordinate.
    """

    points: np.ndarray
    charts: np.ndarray
    weights: np.ndarray
    density: np.ndarray
    kind: str = "external"
    meta: dict = field(default_factory=dict)

    @property
    def total_volume(self):
        return float(np.sum(self.weights))

    def __len__(self):
        return len(self.weights)


@dataclass(eq=False)
class SectionSample:
    """Section values ``values[i, p, a]`` in the local frame at each mesh point."""

    values: np.ndarray
    k: int
    d: int
    bundle: str
    evaluator: Callable | None = None
    labels: list | None = None

    @property
    def N(self):
        return self.values.shape[0]

    @property
    def fiber_rank(self):
        return self.values.shape[2]

    def matrices(self):
        """Per-point ``R x N`` evaluation matrices ``S(p)``."""
        return np.transpose(self.values, (1, 2, 0))


@dataclass(eq=False)
class MetricField:
    """Hermitian metric matrices ``values[p]`` (package convention)."""

    values: np.ndarray
    evaluator: Callable | None = None

    def __len__(self):
        return len(self.values)


@dataclass(eq=False)
class Model:
    spec: ModelSpec
    mesh: BaseMesh
    sample: SectionSample
    metric: MetricField
    e_metric: Callable  # (chart, z) -> (P, r, r) reference metric on E
    line_metric: Callable  # (chart, z) -> (P,) metric g on L
    base_density: Callable  # (chart, z) -> (P,) omega_inf density

    def __iter__(self):
        return iter((self.mesh, self.sample, self.metric))

    @property
    def he_flag(self):
        return self.spec.hermitian_einstein


def riemann_roch(spec):
    """Predicted ``dim H^0`` of ``Sym^d E (x) L^k`` for the model."""
    if spec.kind == "torus-line":
        n = spec.k * spec.d0
        return n if n >= 1 else 0
    return sum(max(sum(a * i for a, i in zip(spec.degrees, I.parts)) + spec.k + 1, 0)
               for I in multi_indices(spec.r, spec.d))


# --------------------------------------------------------------------------
# P^1


def p1_mesh(mesh_size):
    """Gauss-Legendre in ``cos(theta)`` times ``2 mesh_size`` uniform angles.

    Exact for ``|z|^{2j} / (1+|z|^2)^m`` times ``exp(i q phi)`` whenever
    ``m <= 2 mesh_size - 1`` and ``|q| < 2 mesh_size``.
    """
    c, wc = np.polynomial.legendre.leggauss(mesh_size)
    m = 2 * mesh_size
    phi = 2 * np.pi * (np.arange(m) + 0.5) / m
    C, PHI = np.meshgrid(c, phi, indexing="ij")
    W = np.outer(wc, np.full(m, 2 * np.pi / m)) / 4.0
    theta = np.arccos(C)
    north = C >= 0
    pts = np.where(north, np.tan(theta / 2) * np.exp(1j * PHI),
                   np.exp(-1j * PHI) / np.tan(theta / 2))
    charts = np.where(north, 0, 1)
    pts, charts, W = pts.ravel(), charts.ravel(), W.ravel()
    dens = 1.0 / (1 + np.abs(pts) ** 2) ** 2
    return BaseMesh(pts, charts, W, dens, kind="p1", meta={"mesh_size": mesh_size})


def required_p1_mesh_size(max_degree):
    return max(1, math.ceil((max_degree + 1) / 2))


class _P1Split:
    def __init__(self, degrees, k, d):
        self.a = np.array(degrees, dtype=int)
        self.r = len(degrees)
        self.k = k
        self.d = d
        self.idx = multi_indices(self.r, d)
        self.parts = np.array([I.parts for I in self.idx])
        self.fact = np.array([I.factorial for I in self.idx], dtype=float) / math.factorial(d)
        self.m = self.parts @ self.a + k  # summand degrees of Sym^d E (x) L^k
        self.labels = [(i, j) for i, m in enumerate(self.m) for j in range(m + 1)]
        self.comp = np.array([i for i, _ in self.labels], dtype=int)
        self.expo = np.array([j for _, j in self.labels], dtype=int)

    def values(self, charts, z):
        charts = np.broadcast_to(charts, np.shape(z))
        z = np.asarray(z, dtype=complex)
        N, R = len(self.labels), len(self.idx)
        out = np.zeros((N, z.size, R), dtype=complex)
        e = np.where(charts[None, :] == 0, self.expo[:, None], self.m[self.comp][:, None] - self.expo[:, None])
        out[np.arange(N), :, self.comp] = z[None, :] ** e
        return out

    def metric(self, charts, z):
        z = np.asarray(z, dtype=complex)
        g = 1.0 / (1 + np.abs(z) ** 2)
        diag = g[:, None] ** self.m[None, :] * self.fact[None, :]
        out = np.zeros((z.size, len(self.idx), len(self.idx)), dtype=complex)
        out[:, np.arange(len(self.idx)), np.arange(len(self.idx))] = diag
        return out

    def e_metric(self, charts, z):
        z = np.asarray(z, dtype=complex)
        g = 1.0 / (1 + np.abs(z) ** 2)
        out = np.zeros((z.size, self.r, self.r), dtype=complex)
        out[:, np.arange(self.r), np.arange(self.r)] = g[:, None] ** self.a[None, :]
        return out


def _p1_model(spec):
    if spec.kind != "p1-split":
        raise ValueError("expected a p1-split model spec")
    b = _P1Split(spec.degrees, spec.k, spec.d)
    if np.any(b.m < 0):
        raise ValueError(f"summand degrees {b.m.tolist()} leave a summand without sections")
    need = required_p1_mesh_size(int(b.m.max()))
    size = spec.mesh_size if spec.mesh_size is not None else need + 4
    if size < need:
        raise MeshTooSmall(f"mesh_size {size} too small for degree {int(b.m.max())}; need at least {need}")
    mesh = p1_mesh(size)
    bundle = "E(x)L^k" if spec.d == 1 else "Sym^dE(x)L^k"
    sample = SectionSample(b.values(mesh.charts, mesh.points), spec.k, spec.d, bundle,
                           evaluator=b.values, labels=b.labels)
    metric = MetricField(b.metric(mesh.charts, mesh.points), evaluator=b.metric)
    return Model(spec, mesh, sample, metric, b.e_metric,
                 lambda c, z: 1.0 / (1 + np.abs(np.asarray(z)) ** 2),
                 lambda c, z: 1.0 / (1 + np.abs(np.asarray(z)) ** 2) ** 2)


def gen_p1_bundle(spec):
    """Split bundle ``E (x) L^k`` over P^1 with its reference metric ``h_inf (x) g^k``."""
    return _p1_model(spec.with_d(1))


def sym_sections(model, d):
    """``Sym^d E (x) L^k`` for a split model, sections are monomials per summand."""
    if d == 1:
        return model
    return _p1_model(model.spec.with_d(d))


def p1_gram_oracle(m, j):
    """``int |z|^{2j} (1+|z|^2)^{-m} omega_FS = pi j! (m-j)! / (m+1)!``."""
    return math.pi * math.factorial(j) * math.factorial(m - j) / math.factorial(m + 1)


# --------------------------------------------------------------------------
# flat torus


def theta_sections(z, n, tau):
    """Theta functions with characteristics ``j/n``, shape (n, len(z)).

    ``theta_j(z) = sum_m exp(pi i n tau (m + j/n)^2 + 2 pi i n (m + j/n) z)``,
    a basis of sections of a degree-``n`` line bundle in the frame where the
    metric is ``exp(-2 pi n y^2 / Im tau)``.
    """
    z = np.asarray(z, dtype=complex).ravel()
    tau = complex(tau)
    # terms fall off like exp(-pi n Im(tau) (m - m*)^2) around m* = -j/n - y/Im(tau)
    width = math.ceil(math.sqrt(40.0 / (math.pi * n * tau.imag))) + 1
    y = z.imag
    out = np.empty((n, z.size), dtype=complex)
    for j in range(n):
        center = np.round(-j / n - y / tau.imag).astype(int)
        lo, hi = center.min() - width, center.max() + width
        if hi - lo > THETA_TERM_BUDGET:
            raise ThetaTruncationError(f"theta series needs {hi - lo} terms (budget {THETA_TERM_BUDGET})")
        mm = np.arange(lo, hi + 1)[:, None] + j / n
        terms = np.exp(1j * math.pi * n * tau * mm**2 + 2j * math.pi * n * mm * z[None, :])
        total = terms.sum(axis=0)
        edge = np.maximum(np.abs(terms[0]), np.abs(terms[-1]))
        if np.any(edge > 1e-16 * np.abs(total)):
            raise ThetaTruncationError("theta series truncation did not reach 1e-16 relative size")
        out[j] = total
    return out


def torus_mesh(mesh_size, tau, d0):
    tau = complex(tau)
    s = np.arange(mesh_size) / mesh_size
    t = np.arange(mesh_size) / mesh_size - 0.5
    S, T = np.meshgrid(s, t, indexing="ij")
    pts = (S + T * tau).ravel()
    w = np.full(pts.size, math.pi * d0 / mesh_size**2)
    dens = np.full(pts.size, math.pi * d0 / tau.imag)
    return BaseMesh(pts, np.zeros(pts.size, dtype=int), w, dens, kind="torus",
                    meta={"mesh_size": mesh_size, "tau": [tau.real, tau.imag], "d0": d0})


def gen_torus_line(spec):
    """``L^k`` over the flat torus with theta-function sections and Gaussian metric."""
    if spec.kind != "torus-line":
        raise ValueError("expected a torus-line model spec")
    n = spec.k * spec.d0
    if n < 1:
        raise ValueError("torus-line needs k * d0 >= 1")
    tau = complex(spec.tau)
    size = spec.mesh_size if spec.mesh_size is not None else max(32, 4 * n + 8)

    def values(charts, z):
        return theta_sections(z, n, tau)[:, :, None]

    def metric(charts, z):
        z = np.asarray(z, dtype=complex).ravel()
        return np.exp(-2 * math.pi * n * z.imag**2 / tau.imag)[:, None, None].astype(complex)

    mesh = torus_mesh(size, tau, spec.d0)
    sample = SectionSample(values(mesh.charts, mesh.points), spec.k, spec.d, "L^k", evaluator=values,
                           labels=list(range(n)))
    mfield = MetricField(metric(mesh.charts, mesh.points), evaluator=metric)
    return Model(spec, mesh, sample, mfield,
                 lambda c, z: np.ones((np.size(z), 1, 1), dtype=complex),
                 lambda c, z: np.exp(-2 * math.pi * spec.d0 * np.asarray(z).imag**2 / tau.imag),
                 lambda c, z: np.full(np.shape(z), math.pi * spec.d0 / tau.imag))


def generate(spec):
    if spec.kind == "torus-line":
        return gen_torus_line(spec)
    return _p1_model(spec)


# --------------------------------------------------------------------------
# checks


def chern_curvature_density(metric_eval, charts, z, step=1e-3):
    """``-d/dzbar (A^{-1} dA/dz)`` by centred differences (one Richardson step).

    For the Fubini-Study power ``(1+|z|^2)^{-a}`` this is ``a/(1+|z|^2)^2``,
    i.e. ``a`` times the density of ``omega_inf``.
    """
    z = np.asarray(z, dtype=complex).ravel()
    charts = np.broadcast_to(charts, z.shape)

    def derivs(h):
        A = metric_eval(charts, z)
        ax = (metric_eval(charts, z + h) - metric_eval(charts, z - h)) / (2 * h)
        ay = (metric_eval(charts, z + 1j * h) - metric_eval(charts, z - 1j * h)) / (2 * h)
        lap = (metric_eval(charts, z + h) + metric_eval(charts, z - h) + metric_eval(charts, z + 1j * h)
               + metric_eval(charts, z - 1j * h) - 4 * A) / h**2
        return A, ax, ay, lap

    A, ax1, ay1, lap1 = derivs(step)
    _, ax2, ay2, lap2 = derivs(2 * step)
    ax = (4 * ax1 - ax2) / 3
    ay = (4 * ay1 - ay2) / 3
    lap = (4 * lap1 - lap2) / 3
    dz = (ax - 1j * ay) / 2
    dzb = (ax + 1j * ay) / 2
    Ainv = np.linalg.inv(A)
    return Ainv @ dzb @ Ainv @ dz - Ainv @ lap / 4


def he_residual(model, step=1e-3):
    """``max_p || kappa(p) - mu rho(p) I || / (mu rho)`` for the reference metric on E."""
    mesh = model.mesh
    kappa = chern_curvature_density(model.e_metric, mesh.charts, mesh.points, step)
    mu = model.spec.slope
    rho = model.base_density(mesh.charts, mesh.points)
    r = kappa.shape[-1]
    target = mu * rho[:, None, None] * np.eye(r)[None]
    scale = np.maximum(np.abs(mu), 1.0) * rho
    return float(np.max(np.linalg.norm(kappa - target, ord=2, axis=(1, 2)) / scale))


def base_point_free(sample):
    """True when the sections span the fiber at every mesh point."""
    S = sample.matrices()
    rank = np.linalg.matrix_rank(S)
    return bool(np.all(rank == sample.fiber_rank))
