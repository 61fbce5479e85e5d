"""The ruled manifold PE*: hat sections, combined quadrature, induced volumes
and almost-balanced diagnostics.

A node of the ruled mesh is a base point ``p`` together with a fiber point
``[g]`` given in an ``h_inf(p)``-orthonormal frame; its covector coordinates
in the holomorphic frame of ``E`` are ``f = g T_p^{-1}`` with
``T_p = h_inf(p)^{-1/2}``.  A section ``s`` of ``Sym^d E (x) L^k`` gives the
section ``s^(p, f) = sum_I s_I(p) f^I`` of ``O(d) (x) L^k``, and a metric
``H`` on ``Sym^d E (x) L^k`` induces ``|s^|^2 = |s^|^2 / q`` with
``q = phi^T H^{-1} conj(phi)``, ``phi = (f^I)_I``.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .balance import (BalanceReport, NotConverged, _gram_of, balance_iterate, balanced_basis,
                      frame_from_gram, l2_gram, sliding_slopes)
from .fiber import c_closed_form, fiber_volume, fs_quadrature
from .hermcore import herm_inv, herm_power, hermitize, orthonormal_sym_basis
from .models import generate

logger = logging.getLogger(__name__)

MAX_SECTIONS = 400
MAX_NODES = 5_000_000
FD_STEP = 1e-4


class CurvatureError(RuntimeError):
    pass


class FrameMismatch(ValueError):
    pass


class SizeCapExceeded(ValueError):
    pass


@dataclass(eq=False)
class RuledMesh:
    base: object  # BaseMesh
    rule: object  # QuadratureRule in the orthonormal frame
    frames_inv: np.ndarray  # (P, r, r), T_p^{-1} = h_inf(p)^{1/2}
    base_index: np.ndarray  # (n,)
    fiber_index: np.ndarray  # (n,)
    weights: np.ndarray  # (n,) w_p v_q
    r: int
    slope: float
    hermitian_einstein: bool

    @property
    def size(self):
        return len(self.weights)

    @property
    def total_mass(self):
        return float(self.weights.sum())

    @property
    def g(self):
        return self.rule.points[self.fiber_index]

    @property
    def f(self):
        """Covector coordinates of every node in the holomorphic frame."""
        return np.einsum("na,nab->nb", self.g, self.frames_inv[self.base_index])


def make_ruled_mesh(model, level=6, kind="product", seed=None):
    """Combined base x fiber quadrature for ``omega_FS^{r-1}/(r-1)! ^ omega_inf``."""
    mesh = model.mesh
    r = model.spec.r
    rule = fs_quadrature(r, level, seed=seed, kind=kind)
    n = len(mesh.weights) * len(rule.weights)
    if n > MAX_NODES:
        raise SizeCapExceeded(f"ruled mesh would have {n} nodes (cap {MAX_NODES})")
    h = model.e_metric(mesh.charts, mesh.points)
    frames_inv = herm_power(h, 0.5)
    P, Q = len(mesh.weights), len(rule.weights)
    bi = np.repeat(np.arange(P), Q)
    fi = np.tile(np.arange(Q), P)
    w = mesh.weights[bi] * rule.weights[fi]
    return RuledMesh(mesh, rule, frames_inv, bi, fi, w, r, model.spec.slope,
                     model.spec.hermitian_einstein)


def _monomial_jacobian(f, parts):
    """``d f^I / d f_b`` with shape (n, R, r)."""
    n, r = f.shape
    out = np.zeros((n, parts.shape[0], r), dtype=complex)
    for b in range(r):
        e = parts.copy()
        e[:, b] -= 1
        has = parts[:, b] > 0
        val = parts[has, b] * np.prod(f[:, None, :] ** np.clip(e[has], 0, None)[None], axis=-1)
        out[:, has, b] = val
    return out


@dataclass(eq=False)
class HatSections:
    """Values of the hat sections at every node, shape (N, n).

    ``coeffs`` maps the sample basis to the hat basis, so ``s^_j`` comes
    from the section ``sum_i coeffs[i, j] s_i``.
    """

    phi: np.ndarray  # (n, R) monomials of the node covectors
    sample: object
    coeffs: np.ndarray
    d: int
    ruled: RuledMesh
    _values: np.ndarray | None = None

    @property
    def N(self):
        return self.coeffs.shape[1]

    @property
    def values(self):
        if self._values is None:
            S = self.base_matrices()
            self._values = np.einsum("na,nai->in", self.phi, S[self.ruled.base_index], optimize=True)
        return self._values

    def base_matrices(self):
        """``S(p)`` of the hat basis at base points, shape (P, R, N)."""
        return self.sample.matrices() @ self.coeffs

    def evaluate_base(self, charts, z):
        if self.sample.evaluator is None:
            raise ValueError("section sample has no off-mesh evaluator")
        S = np.transpose(self.sample.evaluator(charts, z), (1, 2, 0))
        return S @ self.coeffs


def hat_sections(sym_sample, ruled, coeffs=None):
    """Evaluate ``s^_i`` at every node of the ruled mesh.

    Parameters
    ----------
    sym_sample : SectionSample
        Sections of ``Sym^d E (x) L^k`` on the base mesh of ``ruled``.
    ruled : RuledMesh
    coeffs : array, optional
        Change of basis applied before evaluation (for instance an
        orthonormalising matrix).
    """
    N, P, R = sym_sample.values.shape
    if P != len(ruled.base.weights):
        raise FrameMismatch(f"sample has {P} base points, ruled mesh has {len(ruled.base.weights)}")
    d = sym_sample.d
    basis = orthonormal_sym_basis(ruled.r, d)
    if basis.size != R:
        raise FrameMismatch(f"sample fiber rank {R} is not Sym^{d} of rank {ruled.r}")
    if N > MAX_SECTIONS:
        raise SizeCapExceeded(f"{N} sections exceed the cap of {MAX_SECTIONS}")
    coeffs = np.eye(N, dtype=complex) if coeffs is None else np.asarray(coeffs, dtype=complex)
    phi = np.prod(ruled.f[:, None, :] ** basis.parts_array()[None], axis=-1)
    return HatSections(phi, sym_sample, coeffs, d, ruled)


def _dual_q(phi, A, base_index):
    return np.einsum("na,nab,nb->n", phi, A[base_index], phi.conj(), optimize=True).real


def fiber_sup_ratio(hats, metric):
    """``sup_fiber |s^|^2 / |s(p)|^2_H`` per section and base point.

    Equal to one exactly when ``s(p)`` is a pure power ``v^d`` (always for
    ``d = 1``); at most one otherwise.
    """
    H = np.asarray(metric.values)
    A = herm_inv(H)
    ruled = hats.ruled
    q = _dual_q(hats.phi, A, ruled.base_index)
    pointwise = np.abs(hats.values) ** 2 / q[None, :]
    P = len(ruled.base.weights)
    sup = np.zeros((hats.N, P))
    np.maximum.at(sup.T, ruled.base_index, pointwise.T)
    S = hats.base_matrices()
    norms = np.einsum("pai,pab,pbi->ip", S.conj(), H, S).real
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(norms > 0, sup / norms, 0.0)


# --------------------------------------------------------------------------
# induced volume forms


def _base_derivatives(A_eval, charts, z, step):
    """``A``, ``d_z A`` and ``d_z d_zbar A`` by centred differences with one
    Richardson step."""
    A0 = A_eval(charts, z)

    def stencil(h):
        ap = A_eval(charts, z + h)
        am = A_eval(charts, z - h)
        bp = A_eval(charts, z + 1j * h)
        bm = A_eval(charts, z - 1j * h)
        dx = (ap - am) / (2 * h)
        dy = (bp - bm) / (2 * h)
        lap = (ap + am + bp + bm - 4 * A0) / h**2
        return 0.5 * (dx - 1j * dy), 0.25 * lap

    dz1, l1 = stencil(step)
    dz2, l2 = stencil(step / 2)
    return A0, (4 * dz2 - dz1) / 3, hermitize((4 * l2 - l1) / 3)


def induced_density_ratio(A_eval, ruled, d, step=FD_STEP, A_base=None):
    """``det(d dbar log q) / rho_prod`` at every node.

    ``q(z, w) = phi(f)^T A(z) conj(phi(f))`` is the inverse of the induced
    metric in the chart ``w = g_{!=a} / g_a`` with ``a`` the largest
    component of the node; ``rho_prod`` is the density of the product
    measure ``rho_inf(z) (1 + |w|^2)^{-r}``.  Base derivatives of ``A`` come
    from finite differences, fiber derivatives are exact.
    """
    base = ruled.base
    r = ruled.r
    A0, Az, Azz = _base_derivatives(A_eval, base.charts, base.points, step)
    if A_base is not None:
        A0 = np.asarray(A_base)
    bi = ruled.base_index
    g = ruled.g
    alpha = np.argmax(np.abs(g), axis=1)
    n = len(g)
    gt = g / g[np.arange(n), alpha][:, None]
    Tinv = ruled.frames_inv[bi]
    f = np.einsum("na,nab->nb", gt, Tinv)
    parts = orthonormal_sym_basis(r, d).parts_array()
    phi = np.prod(f[:, None, :] ** parts[None], axis=-1)
    Ab, Azb, Azzb = A0[bi], Az[bi], Azz[bi]

    q = np.einsum("na,nab,nb->n", phi, Ab, phi.conj()).real
    if np.any(q <= 0):
        raise CurvatureError("induced metric is degenerate at a node")
    # first derivatives and the Hessian of q in the coordinates (z, w_1..w_{r-1})
    dq = np.zeros((n, r), dtype=complex)
    hess = np.zeros((n, r, r), dtype=complex)
    dq[:, 0] = np.einsum("na,nab,nb->n", phi, Azb, phi.conj())
    hess[:, 0, 0] = np.einsum("na,nab,nb->n", phi, Azzb, phi.conj())
    if r > 1:
        cols = np.array([[c for c in range(r) if c != a] for a in range(r)])[alpha]  # (n, r-1)
        dfdw = np.take_along_axis(Tinv, cols[:, :, None], axis=1)  # (n, r-1, r)
        jac = _monomial_jacobian(f, parts)  # (n, R, r)
        phiw = np.einsum("nab,njb->nja", jac, dfdw)  # (n, r-1, R)
        dq[:, 1:] = np.einsum("nja,nab,nb->nj", phiw, Ab, phi.conj())
        hess[:, 0, 1:] = np.einsum("na,nab,njb->nj", phi, Azb, phiw.conj())
        hess[:, 1:, 0] = hess[:, 0, 1:].conj()
        hess[:, 1:, 1:] = np.einsum("nia,nab,njb->nij", phiw, Ab, phiw.conj())
        wnorm = np.sum(np.abs(gt) ** 2, axis=1) - 1.0
    else:
        wnorm = np.zeros(n)
    psi = hess / q[:, None, None] - dq[:, :, None] * dq[:, None, :].conj() / q[:, None, None] ** 2
    psi = hermitize(psi)
    low = np.linalg.eigvalsh(psi)[:, 0]
    if np.any(low <= 0):
        bad = int(np.argmin(low))
        raise CurvatureError(f"induced curvature form is not positive at node {bad}")
    det = np.linalg.det(psi).real
    rho = base.density[bi] * (1 + wnorm) ** (-r)
    return det / rho


def _product_factor(ruled, d, k):
    if not ruled.hermitian_einstein:
        raise ValueError("identity requires Hermitian-Einstein input")
    return d ** (ruled.r - 1) * (d * ruled.slope + k)


@dataclass
class VolumeIdentityReport:
    product_mass: float
    induced_mass: float
    discrepancy: float


def volume_identity_check(ruled, sym_model, step=FD_STEP):
    """Total mass of ``omega_k^r / r!`` by the product formula and by direct
    evaluation of the induced curvature of ``Sym^d h_inf (x) g^k``."""
    d, k = sym_model.spec.d, sym_model.spec.k
    a = _product_factor(ruled, d, k) * ruled.weights.sum()
    ev = sym_model.metric.evaluator
    ratio = induced_density_ratio(lambda c, z: herm_inv(ev(c, z)), ruled, d, step)
    b = float(np.sum(ruled.weights * ratio))
    return VolumeIdentityReport(float(a), b, abs(b - a) / abs(a))


def _metric_inverse_eval(metric):
    ev = metric.evaluator
    if ev is None:
        raise ValueError("induced volume needs a metric that can be evaluated off the mesh")
    inv = getattr(ev, "inverse", None)
    if inv is not None:
        return inv
    return lambda c, z: herm_inv(ev(c, z))


def node_weights(hats, metric, volume_mode, step=FD_STEP):
    """Volume weights ``dvol`` at the nodes for the given volume mode."""
    ruled, d, k = hats.ruled, hats.d, hats.sample.k
    if volume_mode == "product":
        return ruled.weights * _product_factor(ruled, d, k)
    if volume_mode == "induced":
        ratio = induced_density_ratio(_metric_inverse_eval(metric), ruled, d, step,
                                      A_base=herm_inv(np.asarray(metric.values)))
        return ruled.weights * ratio
    raise ValueError(f"unknown volume mode {volume_mode!r}")


def pe_gram(hats, metric, volume_mode="product", step=FD_STEP):
    """``int <s^_j, s^_i>_{H^} dvol`` over PE* (package convention).

    Parameters
    ----------
    hats : HatSections
    metric : MetricField
        Metric ``H`` on ``Sym^d E (x) L^k`` at the base points, with an
        evaluator when ``volume_mode="induced"``.
    volume_mode : {"product", "induced"}
        ``product`` uses ``d^{r-1} (d mu + k) omega_FS^{r-1}/(r-1)! ^ omega_inf``
        and needs a Hermitian-Einstein model; ``induced`` uses the volume
        form of the curvature of ``H^``.
    """
    ruled = hats.ruled
    A = herm_inv(np.asarray(metric.values))
    q = _dual_q(hats.phi, A, ruled.base_index)
    w = node_weights(hats, metric, volume_mode, step)
    # fiber moments F_p = sum over the fiber of p of (w / q) conj(phi) phi^T
    phi = hats.phi
    P, R = len(ruled.base.weights), phi.shape[1]
    Q = len(ruled.rule.weights)
    # nodes are stored base point by base point
    F = np.einsum("pq,pqa,pqb->pab", (w / q).reshape(P, Q), phi.conj().reshape(P, Q, R),
                  phi.reshape(P, Q, R), optimize=True)
    S = hats.base_matrices()
    G = np.einsum("pai,pab,pbj->ij", S.conj(), F, S, optimize=True)
    return hermitize(G)


@dataclass
class AlmostBalancedReport:
    k: int
    gram: np.ndarray
    D: float
    M: np.ndarray
    opNormM: float
    Dnormalized: float
    cTarget: float
    target_gap: float

    @property
    def relative_defect(self):
        return self.opNormM / self.D


def almost_balanced_report(gram, r, d, mu, k):
    gram = hermitize(np.asarray(gram))
    N = gram.shape[0]
    D = float(np.trace(gram).real / N)
    M = gram - D * np.eye(N)
    op = float(np.max(np.abs(np.linalg.eigvalsh(M))))
    scale = d * mu + k
    c = c_closed_form(r, d)
    return AlmostBalancedReport(k, gram, D, M, op, D / scale, c, abs(D - c * scale))


# --------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineRun:
    """Balanced metric on ``Sym^d E (x) L^k`` pushed to PE*."""

    k: int
    model: object
    balance: object  # BalanceResult
    converged: bool
    hats: HatSections
    report: AlmostBalancedReport


def almost_balanced_run(spec, d, k, tol=1e-10, max_iter=200, level=None, volume_mode="induced",
                        start="reference", step=FD_STEP):
    """Balance ``Sym^d E (x) L^k`` and evaluate its hat metric on PE*.

    ``start="reference"`` seeds the T-map with the L^2 Gram of
    ``Sym^d h_inf (x) g^k``; for bundles with automorphisms this selects the
    balanced metric that converges to ``Sym^d h_inf``.  An array is used as
    the starting Gram, ``None`` starts from the identity.
    """
    model = generate(spec.with_k(k).with_d(d))
    mesh, sample, ref = model
    if isinstance(start, str):
        if start != "reference":
            raise ValueError(f"unknown start {start!r}")
        G0 = l2_gram(sample, ref, mesh)
    else:
        G0 = start
    try:
        res = balance_iterate(sample, mesh, tol=tol, max_iter=max_iter, start=G0)
        ok = True
    except NotConverged as exc:
        res, ok = exc.result, False
    ruled = make_ruled_mesh(model, level=level if level is not None else d + 4)
    C = balanced_basis(res, sample, mesh)
    hats = hat_sections(sample, ruled, coeffs=C)
    gram = pe_gram(hats, res.metric, volume_mode, step)
    rep = almost_balanced_report(gram, spec.r, d, spec.slope, k)
    return PipelineRun(k, model, res, ok, hats, rep)


@dataclass
class DecayTable:
    rows: list
    slopes: list
    strictly_decreasing: bool
    top_slope: float
    passed: bool
    flagged: list = field(default_factory=list)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "N", "D", "Dnorm", "opNormM", "slope"])
        for row, s in zip(self.rows, self.slopes):
            w.writerow([row["k"], row["N"]] + [f"{row[c]:.17g}" for c in ("D", "Dnorm", "opNormM")]
                       + [f"{s:.17g}"])
        return buf.getvalue()


def decay_probe(spec, d, k_range, tol=1e-10, max_iter=200, level=None, volume_mode="induced",
                step=FD_STEP, window=3, starts=None):
    """Almost-balanced defect ``||M^(k)|| / D^(k)`` over a range of ``k``.

    Rows whose balancing did not converge are flagged and left out of the
    slope fit.  ``passed`` records whether the relative defect is strictly
    decreasing over the top half of the converged rows and the top
    sliding-window log-log slope is at most -1.  ``starts`` maps ``k`` to a
    starting Gram (for instance from an earlier balancing run).
    """
    ks = sorted(set(int(k) for k in k_range))
    if len(ks) < window:
        raise ValueError(f"need at least {window} values of k")
    rows, flagged = [], []
    for k in ks:
        start = (starts or {}).get(k, "reference")
        run = almost_balanced_run(spec, d, k, tol, max_iter, level, volume_mode, start=start, step=step)
        rep = run.report
        rows.append({"k": k, "N": run.hats.N, "D": rep.D, "Dnorm": rep.Dnormalized,
                     "opNormM": rep.opNormM, "rel": rep.relative_defect, "converged": run.converged})
        if not run.converged:
            flagged.append(k)
        logger.info("decay k=%d N=%d opNormM/D=%.3e", k, run.hats.N, rep.relative_defect)
    good = [row for row in rows if row["converged"]]
    slopes = [float("nan")] * len(rows)
    if len(good) >= window:
        s = sliding_slopes([row["k"] for row in good], [row["rel"] for row in good], window)
        pos = {row["k"]: i for i, row in enumerate(rows)}
        for j, row in enumerate(good):
            slopes[pos[row["k"]]] = float(s[j])
    top = good[len(good) // 2:]
    rel = [row["rel"] for row in top]
    dec = len(rel) >= 2 and all(b < a for a, b in zip(rel, rel[1:]))
    finite = [s for s in slopes if np.isfinite(s)]
    top_slope = finite[-1] if finite else float("nan")
    return DecayTable(rows, slopes, dec, top_slope, bool(dec and top_slope <= -1.0), flagged)


# --------------------------------------------------------------------------
# direct balancing on PE*


@dataclass(eq=False)
class PEBalanceResult:
    gram: np.ndarray
    node_metric: np.ndarray  # induced metric 1/Q at the nodes
    weights: np.ndarray
    report: BalanceReport
    definition_error: float  # max deviation from (V/N) I of the balanced-basis Gram, absolute


def pe_balance_iterate(hats, ruled=None, tol=1e-8, max_iter=200, volume_mode="product",
                       start=None, step=FD_STEP, raise_on_fail=True):
    """T-map for the line bundle ``O(d) (x) L^k`` on the ruled mesh.

    ``volume_mode="product"`` freezes the volume form at the reference
    product form; ``"induced"`` recomputes the volume form of the current
    Fubini-Study metric every iteration.  The residual is the balancing
    condition itself: for the basis ``t`` orthonormal for the current Gram,
    ``|| (N/V) int <t_i, t_j> dvol - I ||_op``.
    """
    ruled = hats.ruled if ruled is None else ruled
    if ruled is not hats.ruled:
        raise FrameMismatch("hat sections were evaluated on a different ruled mesh")
    if volume_mode not in ("product", "induced"):
        raise ValueError(f"unknown volume mode {volume_mode!r}")
    t0 = time.perf_counter()
    v = hats.values
    N = hats.N
    L = np.eye(N, dtype=complex) if start is None else frame_from_gram(start)
    report = BalanceReport(tol=tol, N=N, rank=1)
    S = hats.base_matrices()

    def weights_for(L):
        if volume_mode == "product":
            return node_weights(hats, None, "product")

        def A_eval(charts, z):
            T = hats.evaluate_base(charts, z) @ L
            return hermitize(T @ np.conj(np.swapaxes(T, -1, -2)))

        T = S @ L
        A0 = hermitize(T @ np.conj(np.swapaxes(T, -1, -2)))
        return ruled.weights * induced_density_ratio(A_eval, ruled, hats.d, step, A_base=A0)

    it = 0
    while True:
        w = weights_for(L)
        V = float(w.sum())
        t = L.T @ v
        Q = np.sum(np.abs(t) ** 2, axis=0)
        if np.any(Q <= 0):
            raise NotConverged("hat sections have a common zero on the ruled mesh",
                               PEBalanceResult(_gram_of(L), None, w, report, float("nan")))
        gamma = hermitize((t.conj() * (w / Q)[None, :]) @ t.T)
        res = float(np.max(np.abs(np.linalg.eigvalsh((N / V) * gamma - np.eye(N)))))
        report.residual_history.append(res)
        report.condition_numbers.append(float(np.linalg.cond(gamma)))
        report.volume = V
        if res <= tol:
            report.converged = True
            break
        if it >= max_iter:
            break
        L = L @ herm_power((N / V) * gamma, -0.5)
        it += 1
    report.iterations = it
    report.wall_time = time.perf_counter() - t0
    out = PEBalanceResult(_gram_of(L), 1.0 / Q, w, report, res * V / N)
    if not report.converged and raise_on_fail:
        raise NotConverged(f"PE T-map did not reach tol {tol:g} in {max_iter} iterations "
                           f"(residual {report.final_residual:.3e})", out)
    return out


def hat_metric_at_nodes(hats, metric):
    """The metric ``H^`` evaluated on the unit covectors of every node."""
    A = herm_inv(np.asarray(metric.values))
    return 1.0 / _dual_q(hats.phi, A, hats.ruled.base_index)


def node_metric_distance(h1, h2):
    """Sup relative difference of two line-bundle metrics after the best rescaling."""
    ratio = np.asarray(h1) / np.asarray(h2)
    lo, hi = float(ratio.min()), float(ratio.max())
    return (hi - lo) / (hi + lo)


# --------------------------------------------------------------------------
# perturbation harness


def random_direction(R, rng):
    """Hermitian ``R x R`` matrix with operator norm one."""
    z = rng.standard_normal((R, R)) + 1j * rng.standard_normal((R, R))
    P = hermitize(z)
    return P / np.max(np.abs(np.linalg.eigvalsh(P)))


def perturbed_metric(metric, direction, eps):
    """``H_eps = H^{1/2} (I + eps P) H^{1/2}``, at distance ``eps`` from ``H`` pointwise."""
    P = np.asarray(direction)
    R = P.shape[0]

    def perturb(H):
        root = herm_power(H, 0.5)
        return hermitize(root @ (np.eye(R) + eps * P) @ root)

    ev = metric.evaluator
    evaluator = None if ev is None else (lambda c, z: perturb(ev(c, z)))
    return type(metric)(perturb(np.asarray(metric.values)), evaluator=evaluator)


@dataclass
class PerturbationDefect:
    k: int
    epsilon: float
    defect: float  # max_ij |G_ij - C (d mu + k) delta_ij| / (d mu + k)
    metric_distance: float


def perturbation_defect(spec, d, k, eps, direction, level=None, volume_mode="induced", step=FD_STEP):
    """Gram defect of the hat metric of ``(Sym^d h_inf)_eps (x) g^k`` on PE*.

    The sections are orthonormalised in ``L^2(H_eps (x) g^k, omega_inf)``
    first, so the unperturbed Gram is ``C_{r,d} (d mu + k) I``.
    """
    model = generate(spec.with_k(k).with_d(d))
    mesh, sample, ref = model
    H = perturbed_metric(ref, direction, eps)
    s = herm_power(np.asarray(ref.values), -0.5)
    dist = float(np.max(np.abs(np.linalg.eigvalsh(hermitize(s @ H.values @ s)) - 1.0)))
    ruled = make_ruled_mesh(model, level=level if level is not None else d + 4)
    C = frame_from_gram(l2_gram(sample, H, mesh))
    hats = hat_sections(sample, ruled, coeffs=C)
    G = pe_gram(hats, H, volume_mode, step)
    scale = d * spec.slope + k
    target = c_closed_form(spec.r, d) * scale
    defect = float(np.max(np.abs(G - target * np.eye(hats.N)))) / scale
    return PerturbationDefect(k, eps, defect, dist)
