"""Geometry of one fiber P(V*) = P^{r-1}.

Points of the fiber are covectors ``f`` given by their values ``f(e_a)`` on
a basis of ``V``.  Forms are normalised so that ``P^{r-1}`` has
Fubini-Study volume ``pi^{r-1} / (r-1)!``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_sh_jacobi

from .hermcore import (
    HermMetric,
    herm_inv,
    herm_power,
    metric_distance,
    monomials,
    orthonormal_sym_basis,
    sym_power_map,
    sym_power_metric,
)


class QuadratureUnderResolved(RuntimeError):
    pass


class PerturbationTooLarge(ValueError):
    pass


def fiber_volume(r):
    return math.pi ** (r - 1) / math.factorial(r - 1)


def moment_oracle(I, J):
    """Exact ``int z^I conj(z^J) |z|^{-2d}`` over P^{r-1}."""
    I, J = tuple(I), tuple(J)
    if I != J:
        return 0.0
    r, d = len(I), sum(I)
    return math.pi ** (r - 1) * math.prod(math.factorial(i) for i in I) / math.factorial(d + r - 1)


def c_closed_form(r, d):
    """The fiber-integral constant ``C_{r,d} = d^{r-1} pi^{r-1} d! / (d+r-1)!``."""
    return d ** (r - 1) * math.pi ** (r - 1) * math.factorial(d) / math.factorial(d + r - 1)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Weighted points on P^{r-1}; ``points`` are unit covectors, shape (n, r)."""

    points: np.ndarray
    weights: np.ndarray
    r: int
    level: int
    target_degree: int
    kind: str = "product"
    seed: int | None = None
    tolerance: float = 1e-13

    @property
    def total_mass(self):
        return float(np.sum(self.weights))

    def __len__(self):
        return len(self.weights)


def _simplex_rule(r, n):
    """Conical product rule for the uniform probability measure on the (r-1)-simplex."""
    if r == 1:
        return np.ones((1, 1)), np.ones(1)
    nodes, weights = [], []
    for j in range(r - 1):
        alpha = r - 2 - j
        x, w = roots_sh_jacobi(n, alpha + 1.0, 1.0)
        nodes.append(x)
        weights.append(w / w.sum())
    grids = np.meshgrid(*nodes, indexing="ij")
    wgrids = np.meshgrid(*weights, indexing="ij")
    xs = np.stack([g.ravel() for g in grids], axis=1)
    ws = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    t = np.empty((len(ws), r))
    rest = np.ones(len(ws))
    for j in range(r - 1):
        t[:, j] = xs[:, j] * rest
        rest = rest * (1.0 - xs[:, j])
    t[:, r - 1] = rest
    return t, ws


def fs_quadrature(r, level, seed=None, kind="product"):
    """Quadrature rule for the Fubini-Study measure on P^{r-1}.

    ``kind="product"`` is a deterministic rule: Gauss-Jacobi points for
    ``(|f_1|^2, ..., |f_r|^2)`` on the simplex times uniform phase grids.
    It integrates every moment ``f^I conj(f^J) / |f|^{2d}`` with
    ``d <= level`` exactly.  ``kind="montecarlo"`` draws ``2**(level + 6)``
    uniform points on the sphere and needs ``seed``.
    """
    if r < 1:
        raise ValueError("r must be positive")
    if level < 1:
        raise ValueError("level must be positive")
    mass = fiber_volume(r)
    if r == 1:
        return QuadratureRule(np.ones((1, 1), dtype=complex), np.ones(1), 1, level,
                              target_degree=10**9, kind=kind, seed=seed)
    if kind == "product":
        t, wt = _simplex_rule(r, level)
        m = level + 1
        theta = 2 * np.pi * np.arange(m) / m
        ph = np.stack([g.ravel() for g in np.meshgrid(*([theta] * (r - 1)), indexing="ij")], axis=1)
        phase = np.concatenate([np.zeros((len(ph), 1)), ph], axis=1)
        pts = np.sqrt(t)[:, None, :] * np.exp(1j * phase)[None, :, :]
        pts = pts.reshape(-1, r)
        w = (wt[:, None] * np.full(len(ph), 1.0 / len(ph))[None, :]).ravel() * mass
        return QuadratureRule(pts, w, r, level, target_degree=level, kind=kind, seed=seed)
    if kind == "montecarlo":
        if seed is None:
            raise ValueError("Monte Carlo quadrature needs a seed")
        rng = np.random.default_rng(seed)
        n = 2 ** (level + 6)
        z = rng.standard_normal((n, r)) + 1j * rng.standard_normal((n, r))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        w = np.full(n, mass / n)
        return QuadratureRule(z, w, r, level, target_degree=-1, kind=kind, seed=seed,
                              tolerance=5.0 / math.sqrt(n))
    raise ValueError(f"unknown quadrature kind {kind!r}")


def moment_error(rule, degree):
    """Largest deviation of the rule's moments from the exact ones up to ``degree``."""
    worst = abs(rule.total_mass - fiber_volume(rule.r))
    for d in range(1, degree + 1):
        idx = orthonormal_sym_basis(rule.r, d).indices
        phi = monomials(rule.points, rule.r, d)
        norm = np.sum(np.abs(rule.points) ** 2, axis=1) ** d
        m = (phi.conj().T * (rule.weights / norm)) @ phi
        exact = np.diag([moment_oracle(I.parts, I.parts) for I in idx])
        worst = max(worst, float(np.max(np.abs(m - exact))))
    return worst


# --------------------------------------------------------------------------
# sections and induced metrics on O(d)


def _check_dims(s, r, d):
    R = math.comb(d + r - 1, r - 1)
    if np.shape(s)[-1] != R:
        raise ValueError(f"section has {np.shape(s)[-1]} coefficients, Sym^{d} of rank {r} needs {R}")


def eval_section(s, f, d):
    """Value ``f^{(x)d}(s) = sum_I s_I f^I`` of the section ``s^`` in the frame of ``f``."""
    f = np.asarray(f, dtype=complex)
    r = f.shape[-1]
    _check_dims(s, r, d)
    return monomials(f, r, d) @ np.asarray(s, dtype=complex)


def dual_power_norm2(H, f, d):
    """``|f^d|^2`` in the metric dual to ``H`` on Sym^d V; ``f`` may be a stack."""
    f = np.asarray(f, dtype=complex)
    phi = monomials(f, f.shape[-1], d)
    Hinv = herm_inv(np.asarray(H))
    return np.einsum("...i,ij,...j->...", phi, Hinv, phi.conj()).real


def eval_induced_metric(H, s, t, f, d):
    """``<s^, t^>`` in the metric induced by ``H`` on O(d), evaluated at ``[f]``."""
    H = np.asarray(H)
    f = np.asarray(f, dtype=complex)
    _check_dims(s, f.shape[-1], d)
    if H.shape[0] != np.shape(s)[-1]:
        raise ValueError("metric and section dimensions differ")
    return eval_section(s, f, d) * np.conj(eval_section(t, f, d)) / dual_power_norm2(H, f, d)


def orthonormal_frame(h):
    """``T`` with ``T^H h T = I``."""
    return herm_power(np.asarray(h), -0.5)


def transported_points(h, rule):
    """Covectors of ``rule`` expressed in the original frame of ``h``.

    The rule lives in an ``h``-orthonormal frame ``T``; a covector with
    values ``g`` on that frame has values ``f = T^{-T} g`` on the original
    basis.
    """
    T = orthonormal_frame(h)
    return rule.points @ np.linalg.inv(T)


def fiber_gram(h, d, rule):
    """``d^{r-1} int <e^J^, e^I^> omega_FS^{r-1}/(r-1)!`` for the metric ``Sym^d h``.

    Returns the matrix in the package convention (entry ``[I, J]`` pairs
    ``e^J`` with ``e^I``).  It equals ``C_{r,d} Sym^d h`` when the rule is
    exact to degree ``d``.
    """
    h = np.asarray(h.entries if isinstance(h, HermMetric) else h)
    r = h.shape[0]
    f = transported_points(h, rule)
    phi = monomials(f, r, d)
    g2 = np.sum(np.abs(rule.points) ** 2, axis=1) ** d
    F = d ** (r - 1) * (phi.conj().T * (rule.weights / g2)) @ phi
    return HermMetric(F, basis=f"Sym{d}(std)" if d > 1 else "std")


def fiber_gram_of(H, h, d, rule):
    """Fiber integral of the metric induced by a general ``H`` on Sym^d V,
    against the Fubini-Study measure of ``h``."""
    h = np.asarray(h.entries if isinstance(h, HermMetric) else h)
    r = h.shape[0]
    f = transported_points(h, rule)
    phi = monomials(f, r, d)
    q = dual_power_norm2(np.asarray(H), f, d)
    return d ** (r - 1) * (phi.conj().T * (rule.weights / q)) @ phi


def c_constant(r, d, rule):
    """Empirical fiber constant: ratio of :func:`fiber_gram` to ``Sym^d I``.

    Raises :class:`QuadratureUnderResolved` when the ratio is not the same
    for every basis pair within ten times the rule's tolerance.
    """
    if rule.r != r:
        raise ValueError("rule has the wrong fiber dimension")
    F = fiber_gram_of(np.asarray(sym_power_metric(np.eye(r), d).entries), np.eye(r), d, rule)
    S = np.asarray(sym_power_metric(np.eye(r), d).entries)
    ratios = np.diag(F).real / np.diag(S).real
    c = float(np.mean(ratios))
    spread = float(np.max(np.abs(ratios - c)) / c)
    off = float(np.max(np.abs(F - np.diag(np.diag(F))), initial=0.0) / c)
    if max(spread, off) > 10 * rule.tolerance:
        raise QuadratureUnderResolved(
            f"quadrature under-resolved for r={r}, d={d}: level {rule.level} "
            f"(ratio spread {spread:.2e}, off-diagonal {off:.2e})")
    return c


@dataclass(frozen=True)
class PerturbationReport:
    epsilon: float
    worst_ratio: float
    max_lhs: float


def perturbation_check(h, H, rule, d):
    """Measure the fiber-integral defect of a metric ``H`` near ``Sym^d h``.

    For each pair of an orthonormal basis of ``(Sym^d V, Sym^d h)`` the
    defect is ``d^{r-1} int <v^, w^>_{H^} - C_{r,d} <v, w>_H`` and the
    reported ratio divides it by ``eps |v|_H |w|_H``.
    """
    h = np.asarray(h.entries if isinstance(h, HermMetric) else h)
    r = h.shape[0]
    S = sym_power_metric(h, d)
    Hm = H if isinstance(H, HermMetric) else HermMetric(H, basis=S.basis)
    eps = metric_distance(Hm, S)
    if eps >= 0.5:
        raise PerturbationTooLarge(f"perturbation too large: distance {eps:.3g} >= 1/2")
    Hm_arr = np.asarray(Hm.entries)
    lhs = fiber_gram_of(Hm_arr, h, d, rule) - c_closed_form(r, d) * Hm_arr
    T = orthonormal_frame(h)
    basis = sym_power_map(T, d) * orthonormal_sym_basis(r, d).norm_constants[None, :]
    pair = basis.conj().T @ lhs @ basis
    norms = np.sqrt(np.einsum("ji,jk,ki->i", basis.conj(), Hm_arr, basis).real)
    max_lhs = float(np.max(np.abs(pair)))
    if eps == 0.0:
        return PerturbationReport(0.0, 0.0, max_lhs)
    ratio = np.abs(pair) / (eps * np.outer(norms, norms))
    return PerturbationReport(eps, float(np.max(ratio)), max_lhs)


# --------------------------------------------------------------------------
# text serialisation of rules


def save_rule(rule, path):
    lines = [f"# r={rule.r} level={rule.level} seed={rule.seed} targetDegree={rule.target_degree} "
             f"kind={rule.kind} tolerance={rule.tolerance!r}"]
    for w, p in zip(rule.weights, rule.points):
        cols = [f"{w:.17g}"]
        for z in p:
            cols += [f"{z.real:.17g}", f"{z.imag:.17g}"]
        lines.append(" ".join(cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_rule(path):
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError("missing quadrature header")
        meta = dict(tok.split("=", 1) for tok in header[1:].split())
        data = np.loadtxt(fh, ndmin=2)
    r = int(meta["r"])
    pts = data[:, 1::2][:, :r] + 1j * data[:, 2::2][:, :r]
    seed = None if meta["seed"] == "None" else int(meta["seed"])
    return QuadratureRule(pts, data[:, 0].copy(), r, int(meta["level"]), int(meta["targetDegree"]),
                          kind=meta["kind"], seed=seed, tolerance=float(meta["tolerance"]))
