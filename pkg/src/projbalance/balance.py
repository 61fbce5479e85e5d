"""L^2 structures, Bergman kernels and the T-map fixed-point iteration.

Gram matrices follow the package convention ``G = sum_p w_p S(p)^H H(p) S(p)``
where ``S(p)`` is the ``R x N`` matrix of section values at mesh point
``p``; entry ``G[i, j]`` is ``<s_j, s_i>``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .hermcore import condition_number, herm_eig, herm_inv, herm_power, hermitize
from .models import MetricField, generate

logger = logging.getLogger(__name__)


class SingularMetric(ValueError):
    pass


class BasePointError(ValueError):
    pass


class RankDeficientGram(ValueError):
    pass


@dataclass
class BalanceReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0
    condition_numbers: list = field(default_factory=list)
    tol: float = 0.0
    N: int = 0
    rank: int = 0
    volume: float = 0.0

    @property
    def final_residual(self):
        return self.residual_history[-1] if self.residual_history else float("nan")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


class NotConverged(RuntimeError):
    def __init__(self, message, result):
        super().__init__(message)
        self.result = result
        self.report = result.report


@dataclass(eq=False)
class BalanceResult:
    gram: np.ndarray
    metric: MetricField
    report: BalanceReport
    frame: np.ndarray | None = None

    def __iter__(self):
        return iter((self.gram, self.metric, self.report))


def _metric_values(metric):
    return np.asarray(metric.values if isinstance(metric, MetricField) else metric)


def l2_gram(sample, metric, mesh):
    """``G = sum_p w_p S(p)^H H(p) S(p)``."""
    H = _metric_values(metric)
    if len(H) != len(mesh.weights) or sample.values.shape[1] != len(mesh.weights):
        raise ValueError("sample, metric and mesh are not aligned")
    low = np.linalg.eigvalsh(hermitize(H))[:, 0]
    bad = np.nonzero(low <= 0)[0]
    if bad.size:
        raise SingularMetric(f"metric is not positive definite at mesh point {int(bad[0])}")
    S = sample.matrices()
    G = np.einsum("p,pai,pab,pbj->ij", mesh.weights, S.conj(), H, S, optimize=True)
    return hermitize(G)


def bergman_kernel(sample, metric, mesh):
    """Bergman endomorphisms ``B(p) = S(p) G^{-1} S(p)^H H(p)``."""
    H = _metric_values(metric)
    G = l2_gram(sample, H, mesh)
    w = np.linalg.eigvalsh(G)
    if w[0] <= 1e-13 * w[-1]:
        raise RankDeficientGram("sections are linearly dependent in L^2")
    S = sample.matrices()
    P = np.einsum("pai,ij,pbj->pab", S, herm_inv(G), S.conj(), optimize=True)
    return P @ H


def bergman_hermitian(sample, metric, mesh):
    """``H^{1/2} B H^{-1/2}``: the Bergman kernel in an orthonormal frame."""
    H = _metric_values(metric)
    B = bergman_kernel(sample, H, mesh)
    Hs = herm_power(H, 0.5)
    Hsi = herm_power(H, -0.5)
    return hermitize(Hs @ B @ Hsi)


def _q_matrices(Ginv, S):
    return hermitize(np.einsum("pai,ij,pbj->pab", S, Ginv, S.conj(), optimize=True))


def _outer(S):
    return hermitize(S @ np.conj(np.swapaxes(S, -1, -2)))


def _fs_field(frame, sample):
    """FS metric of the sections ``S @ frame`` taken as an orthonormal basis."""
    Q = _outer(sample.matrices() @ frame)
    low = np.linalg.eigvalsh(Q)[:, 0]
    scale = np.max(np.abs(Q), axis=(1, 2))
    bad = np.nonzero(low <= 1e-14 * scale)[0]
    if bad.size:
        raise BasePointError(f"sections have a base point at mesh point {int(bad[0])}")
    evaluator = None
    if sample.evaluator is not None:
        ev = sample.evaluator

        def inverse(charts, z):
            return _outer(np.transpose(ev(charts, z), (1, 2, 0)) @ frame)

        def evaluator(charts, z):
            return herm_inv(inverse(charts, z))

        evaluator.inverse = inverse
    return MetricField(herm_inv(Q), evaluator=evaluator)


def frame_from_gram(G):
    """``L`` with ``L L^H = G^{-1}``, computed after diagonal rescaling.

    Gram matrices of monomial bases are badly scaled rather than badly
    conditioned, so factoring out ``diag(G)`` keeps the root accurate.
    """
    G = hermitize(np.asarray(G, dtype=complex))
    dg = np.sqrt(np.diag(G).real)
    if np.any(dg <= 0):
        raise RankDeficientGram("Gram matrix has a non-positive diagonal entry")
    D = 1.0 / dg
    return D[:, None] * herm_power(D[:, None] * G * D[None, :], -0.5)


def fs_metric_from_gram(G, sample, mesh=None):
    """Pointwise metric ``H_G(p) = (S(p) G^{-1} S(p)^H)^{-1}``.

    This is the pull-back of the Fubini-Study metric under the embedding
    given by the sections with Gram ``G``.
    """
    return _fs_field(frame_from_gram(G), sample)


def t_map(G, sample, mesh):
    """``T(G) = N/(R V) * l2_gram(sample, H_G)``; fixed points are balanced."""
    R, N, V = sample.fiber_rank, sample.N, mesh.total_volume
    return (N / (R * V)) * l2_gram(sample, fs_metric_from_gram(G, sample), mesh)


def bergman_residual(gamma, H, sample, mesh):
    """``sup_p || B(p) - N/(R V) I ||`` in the operator norm of ``H(p)``."""
    return _residual(sample.matrices() @ herm_power(gamma, -0.5), _metric_values(H),
                     sample.N / (sample.fiber_rank * mesh.total_volume))


def _residual(S_orth, H, level):
    Hs = herm_power(H, 0.5)
    B = hermitize(Hs @ _outer(S_orth) @ Hs)
    dev = np.linalg.eigvalsh(B - level * np.eye(H.shape[-1])[None])
    return float(np.max(np.abs(dev)))


def _herm_log(a):
    w, v = herm_eig(a)
    return hermitize((v * np.log(w)[None, :]) @ v.conj().T)


def _herm_exp(x, scale=1.0):
    w, v = np.linalg.eigh(hermitize(x))
    with np.errstate(over="raise", invalid="raise"):
        return (v * np.exp(scale * w)[None, :]) @ v.conj().T


class _Anderson:
    """Type-II Anderson mixing for a fixed-point map on Hermitian matrices."""

    def __init__(self, memory):
        self.memory = memory
        self.xs, self.fs = [], []

    def reset(self):
        self.xs, self.fs = [], []

    def step(self, x, fx):
        f = fx - x
        vec = lambda a: np.concatenate([a.real.ravel(), a.imag.ravel()])
        self.xs.append(vec(x))
        self.fs.append(vec(f))
        if len(self.xs) > self.memory + 1:
            self.xs.pop(0)
            self.fs.pop(0)
        if len(self.xs) == 1:
            return fx
        dX = np.diff(np.array(self.xs), axis=0).T
        dF = np.diff(np.array(self.fs), axis=0).T
        gam, *_ = np.linalg.lstsq(dF, self.fs[-1], rcond=1e-12)
        new = self.xs[-1] + self.fs[-1] - (dX + dF) @ gam
        n = x.size
        return hermitize((new[:n] + 1j * new[n:]).reshape(x.shape))


def balance_iterate(sample, mesh, tol=1e-10, max_iter=200, start=None, damping=0.0,
                    callback=None, raise_on_fail=True, accelerate="anderson", memory=6):
    """Iterate the T-map until the Bergman kernel is constant.

    The iteration carries a frame ``L`` with ``L L^H = G^{-1}``, so the
    sections ``S L`` are orthonormal for the current Gram and no
    ill-conditioned inverse is ever formed.

    Parameters
    ----------
    sample, mesh : SectionSample, BaseMesh
    tol : float
        Stop when ``sup_p ||B(p) - N/(R V) I|| <= tol``.
    max_iter : int
    start : array, optional
        Initial Gram matrix; defaults to the identity.
    damping : float
        Relaxation ``G <- G^{1/2} (G^{-1/2} T(G) G^{-1/2})^damping G^{1/2}``
        for ``damping`` in ``(0, 2)``, a step of the given length along the
        geodesic from ``G`` to ``T(G)``; plain T-map iteration otherwise.
    accelerate : {"anderson", None}
        ``"anderson"`` applies Anderson mixing with the given ``memory`` to
        ``X`` where ``G = L_ref^{-H} e^X L_ref^{-1}``; the anchor ``L_ref``
        moves to the current frame whenever the residual rises.  Mixing
        starts once the residual is below a tenth of ``N/(RV)``.  Fixed
        points are unchanged.
    callback : callable, optional
        Called as ``callback(iteration, residual)`` from the loop.

    Returns
    -------
    BalanceResult
        ``(gram, metric, report)``.  On convergence ``metric`` is the
        balanced metric and ``l2_gram(sample, metric, mesh)`` equals
        ``(R V / N) gram``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    t0 = time.perf_counter()
    N, R, V = sample.N, sample.fiber_rank, mesh.total_volume
    level = N / (R * V)
    alpha = damping if 0 < damping < 2 else 1.0
    L = np.eye(N, dtype=complex) if start is None else frame_from_gram(start)
    if accelerate not in (None, "anderson"):
        raise ValueError(f"unknown acceleration {accelerate!r}")
    if accelerate:
        # X is anchored at a frame L_ref: G = L_ref^{-H} e^X L_ref^{-1}
        L_ref, X = L, np.zeros((N, N), dtype=complex)
        mixer = _Anderson(memory)
        best = math.inf
    report = BalanceReport(tol=tol, N=N, rank=R, volume=V)
    it = 0
    H = None
    while True:
        try:
            H = _fs_field(L, sample)
            S = sample.matrices() @ L
            gamma = l2_gram_values(S, H.values, mesh.weights)
            root = herm_power(gamma, -0.5)
            res = _residual(S @ root, H.values, level)
        except (BasePointError, SingularMetric, np.linalg.LinAlgError, ValueError) as exc:
            # unstable bundles drive the Gram towards the boundary of the cone
            report.iterations = it
            report.wall_time = time.perf_counter() - t0
            raise NotConverged(f"iteration degenerated after {it} steps: {exc}",
                               BalanceResult(_gram_of(L), H, report, L)) from exc
        report.residual_history.append(res)
        report.condition_numbers.append(condition_number(gamma) if it else condition_number(L @ L.conj().T))
        if callback is not None:
            callback(it, res)
        if res <= tol:
            report.converged = True
            break
        if it >= max_iter:
            break
        try:
            if accelerate:
                if res > best or res > 0.1 * level:
                    # mixing only in the near-linear regime; a step that increased
                    # the residual restarts it, re-anchored at the current frame
                    mixer.reset()
                    L_ref, X = L, np.zeros((N, N), dtype=complex)
                best = res
                # L_ref^H T(G) L_ref = level * e^{X/2} gamma e^{X/2}
                half = _herm_exp(X, 0.5)
                FX = _herm_log(level * half @ gamma @ half)
                target = X + alpha * (FX - X)
                X = mixer.step(X, target) if res <= 0.1 * level else target
                L_new = L_ref @ _herm_exp(X, -0.5)
            else:
                # in the current orthonormal coordinates G = I and T(G) = level * gamma;
                # move along the geodesic of the symmetric space of Gram matrices
                L_new = L @ herm_power(level * gamma, -0.5 * alpha)
            if not np.all(np.isfinite(L_new)):
                raise FloatingPointError("frame overflowed")
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
            report.iterations = it
            report.wall_time = time.perf_counter() - t0
            raise NotConverged(f"iteration degenerated after {it} steps: {exc}",
                               BalanceResult(_gram_of(L), H, report, L)) from exc
        L = L_new
        it += 1
    report.iterations = it
    report.wall_time = time.perf_counter() - t0
    logger.info("balance: %d iterations, residual %.3e", it, report.final_residual)
    result = BalanceResult(_gram_of(L), H, report, L)
    if not report.converged and raise_on_fail:
        raise NotConverged(f"T-map did not reach tol {tol:g} in {max_iter} iterations "
                           f"(residual {report.final_residual:.3e})", result)
    return result


def l2_gram_values(S, H, weights):
    return hermitize(np.einsum("p,pai,pab,pbj->ij", weights, S.conj(), H, S, optimize=True))


def _gram_of(L):
    Li = np.linalg.inv(L)
    return hermitize(Li.conj().T @ Li)


def balanced_basis(result, sample, mesh):
    """Coefficients ``C`` such that the sections ``S C`` are L^2-orthonormal
    for the balanced metric."""
    L = result.frame if result.frame is not None else frame_from_gram(result.gram)
    gamma = l2_gram_values(sample.matrices() @ L, result.metric.values, mesh.weights)
    return L @ herm_power(gamma, -0.5)


# --------------------------------------------------------------------------
# probes


def sliding_slopes(ks, values, window=3):
    """Least-squares slopes of ``log values`` against ``log ks`` over sliding windows."""
    ks = np.asarray(ks, dtype=float)
    v = np.asarray(values, dtype=float)
    out = np.full(len(ks), np.nan)
    for end in range(window, len(ks) + 1):
        x, y = np.log(ks[end - window:end]), np.log(v[end - window:end])
        if np.all(np.isfinite(y)):
            out[end - 1] = np.polyfit(x, y, 1)[0]
    return out


@dataclass
class ExpansionFit:
    ks: list
    mean_bergman: list
    constancy: list
    leading: float
    A1: float
    fit_residual: float
    trace_error: list


def degree_of_polarization(spec):
    return spec.d0 if spec.kind == "torus-line" else 1


def bergman_expansion_probe(spec, k_range):
    """Spatial constancy and two-term fit of the Bergman kernel of ``h_inf (x) g^k``.

    The fitted density is ``B * V / deg(L)``: the Bergman kernel taken with
    respect to ``omega_inf`` rescaled to total mass ``deg L``, the
    normalisation in which the expansion starts with ``k^n``.
    """
    ks = sorted(set(int(k) for k in k_range))
    if len(ks) < 3:
        raise ValueError("need at least three values of k for a two-parameter fit")
    if not spec.hermitian_einstein:
        raise ValueError("expansion probe needs a constant-curvature model")
    means, const, trace_err = [], [], []
    for k in ks:
        model = generate(spec.with_k(k))
        mesh, sample, metric = model
        B = bergman_hermitian(sample, metric, mesh)
        R = sample.fiber_rank
        Bbar = np.einsum("p,pab->ab", mesh.weights, B) / mesh.total_volume
        nb = np.linalg.norm(Bbar, 2)
        const.append(float(np.max(np.linalg.norm(B - Bbar[None], ord=2, axis=(1, 2))) / nb))
        scale = mesh.total_volume / degree_of_polarization(spec)
        means.append(float(np.trace(Bbar).real / R) * scale)
        tr = float(np.einsum("p,paa->", mesh.weights, B).real)
        trace_err.append(abs(tr - sample.N))
    A = np.vstack([ks, np.ones(len(ks))]).T
    coef, *_ = np.linalg.lstsq(A, np.array(means), rcond=None)
    fit = A @ coef
    resid = float(np.sqrt(np.mean((fit - means) ** 2)))
    return ExpansionFit(ks, means, const, float(coef[0]), float(coef[1]), resid, trace_err)


def scale_free_distance(H, H0):
    """Sup over points of ``|| c^{-1} H0^{-1/2} H H0^{-1/2} - I ||`` with the best constant ``c``.

    Balanced metrics are determined up to a constant factor, so they are
    compared with the reference after the optimal rescaling.
    """
    H, H0 = np.asarray(H), np.asarray(H0)
    s = herm_power(H0, -0.5)
    lam = np.linalg.eigvalsh(hermitize(s @ H @ s))
    lo, hi = float(lam.min()), float(lam.max())
    return (hi - lo) / (hi + lo)


@dataclass
class DecayReport:
    ks: list
    delta: list
    iterations: list
    converged: list
    slopes: list


def convergence_rate_probe(spec, k_range, tol=1e-10, max_iter=200, start="identity"):
    """Distance between the balanced metric (untwisted by ``g^k``) and ``h_inf``."""
    ks, delta, iters, conv = [], [], [], []
    for k in sorted(set(int(k) for k in k_range)):
        model = generate(spec.with_k(k))
        mesh, sample, ref = model
        G0 = None
        if start == "reference":
            G0 = l2_gram(sample, ref, mesh)
        try:
            res = balance_iterate(sample, mesh, tol=tol, max_iter=max_iter, start=G0)
            ok = True
        except NotConverged as exc:
            res, ok = exc.result, False
        ks.append(k)
        delta.append(scale_free_distance(res.metric.values, ref.values))
        iters.append(res.report.iterations)
        conv.append(ok)
    good = [i for i, c in enumerate(conv) if c]
    slopes = [float("nan")] * len(ks)
    if len(good) >= 3:
        s = sliding_slopes([ks[i] for i in good], [delta[i] for i in good])
        for j, i in enumerate(good):
            slopes[i] = float(s[j])
    return DecayReport(ks, delta, iters, conv, slopes)
