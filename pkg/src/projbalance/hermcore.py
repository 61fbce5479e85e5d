"""Finite-dimensional Hermitian algebra.

Matrix convention used throughout the package: a Hermitian matrix ``A``
represents the inner product ``<u, v> = v^H A u`` on coefficient columns,
linear in the first slot and conjugate-linear in the second.  Hence
``A[a, b] = <e_b, e_a>``.  Gram matrices of section bases follow the same
rule, ``G = S^H A S``.

Symmetric powers are expressed in the monomial basis ``e^I = e_1^{i_1} ...
e_r^{i_r}`` with multi-indices in graded-lexicographic (descending) order.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

MAX_SYM_DEGREE = 6
HERMITIAN_TOL = 1e-14
EIGEN_FLOOR = 1e-300


class NotPositiveDefinite(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HermMetric:
    """Positive-definite Hermitian matrix in a labelled basis."""

    entries: np.ndarray
    basis: str = "std"
    dim: int = field(init=False)

    def __post_init__(self):
        a = np.array(self.entries, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"metric must be square, got shape {a.shape}")
        scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
        if np.max(np.abs(a - a.conj().T), initial=0.0) > HERMITIAN_TOL * scale:
            raise ValueError("metric is not Hermitian")
        a = 0.5 * (a + a.conj().T)
        w = np.linalg.eigvalsh(a)
        if w.size == 0 or w[0] <= 0:
            raise NotPositiveDefinite(f"metric has non-positive eigenvalue {w[0] if w.size else None}")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)
        object.__setattr__(self, "dim", a.shape[0])

    def inner(self, u, v):
        """``<u, v>`` for coefficient vectors (conjugate-linear in ``v``)."""
        return np.conj(v) @ self.entries @ u

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u).real, 0.0)))

    def scaled(self, c):
        return HermMetric(c * self.entries, self.basis)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.entries, dtype=dtype)


# --------------------------------------------------------------------------
# Hermitian matrix functions


def hermitize(a):
    a = np.asarray(a)
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def herm_eig(a, floor=EIGEN_FLOOR):
    """Eigendecomposition of a (stack of) Hermitian PD matrices with floored spectrum."""
    w, v = np.linalg.eigh(hermitize(a))
    if np.any(w <= 0):
        raise NotPositiveDefinite("matrix is not positive definite")
    return np.maximum(w, floor), v


def herm_power(a, p):
    w, v = herm_eig(a)
    return (v * w[..., None, :] ** p) @ np.conj(np.swapaxes(v, -1, -2))


def herm_inv(a):
    return herm_power(a, -1.0)


def condition_number(a):
    w = np.linalg.eigvalsh(hermitize(a))
    return float(w[-1] / w[0]) if w[0] > 0 else math.inf


def op_norm_herm(a):
    """Spectral norm of a Hermitian matrix (or the max over a stack)."""
    w = np.linalg.eigvalsh(hermitize(a))
    return float(np.max(np.abs(w)))


# --------------------------------------------------------------------------
# multi-indices


@dataclass(frozen=True)
class MultiIndex:
    parts: tuple

    @property
    def degree(self):
        return sum(self.parts)

    @property
    def factorial(self):
        return math.prod(math.factorial(i) for i in self.parts)

    def as_list(self):
        """Expand into the sorted list of ``d`` variable indices."""
        return [a for a, i in enumerate(self.parts) for _ in range(i)]


@lru_cache(maxsize=None)
def multi_indices(r, d):
    """All multi-indices of degree ``d`` in ``r`` parts, descending lex order."""
    if r < 1 or d < 0:
        raise ValueError(f"need r >= 1 and d >= 0, got r={r}, d={d}")
    out = []

    def rec(prefix, remaining, slots):
        if slots == 1:
            out.append(MultiIndex(tuple(prefix + [remaining])))
            return
        for i in range(remaining, -1, -1):
            rec(prefix + [i], remaining - i, slots - 1)

    rec([], d, r)
    return tuple(out)


def sym_rank(r, d):
    return math.comb(d + r - 1, r - 1)


@dataclass(frozen=True)
class SymBasisMap:
    r: int
    d: int
    indices: tuple
    norm_constants: np.ndarray

    @property
    def size(self):
        return len(self.indices)

    def parts_array(self):
        return np.array([I.parts for I in self.indices], dtype=int)

    def index_lists(self):
        return np.array([I.as_list() for I in self.indices], dtype=int)


def orthonormal_sym_basis(r, d):
    """Monomial basis of Sym^d with the scalings that make it orthonormal.

    For an orthonormal basis ``e_1..e_r`` of ``(V, h)`` the vectors
    ``sqrt(d!/I!) e^I`` are orthonormal for ``Sym^d h``.
    """
    if r < 1 or d < 1:
        raise ValueError(f"need r >= 1 and d >= 1, got r={r}, d={d}")
    idx = multi_indices(r, d)
    c = np.array([math.sqrt(math.factorial(d) / I.factorial) for I in idx])
    c.setflags(write=False)
    return SymBasisMap(r, d, idx, c)


# --------------------------------------------------------------------------
# permanents


@lru_cache(maxsize=None)
def _perm_table(d):
    return np.array(list(itertools.permutations(range(d))), dtype=int)


def permanent_naive(m):
    """Permanent by the explicit sum over all permutations."""
    m = np.asarray(m)
    d = m.shape[0]
    total = 0j
    for sigma in itertools.permutations(range(d)):
        prod = 1 + 0j
        for a in range(d):
            prod *= m[a, sigma[a]]
        total += prod
    return total


def _block_permanents(mat, rows, cols):
    """``perm(mat[rows[I]][:, cols[J]])`` for every pair ``(I, J)``.

    ``rows`` is (R1, d) and ``cols`` is (R2, d); the permutation sum is
    vectorised over all pairs at once.
    """
    d = rows.shape[1]
    if d > MAX_SYM_DEGREE:
        raise ValueError(f"symmetric degree {d} exceeds supported maximum {MAX_SYM_DEGREE}")
    perms = _perm_table(d)
    # blocks[I, J, a, b] = mat[rows[I, a], cols[J, b]]
    blocks = mat[rows[:, None, :, None], cols[None, :, None, :]]
    out = np.zeros(blocks.shape[:2], dtype=complex)
    ar = np.arange(d)
    for sigma in perms:
        out += np.prod(blocks[:, :, ar, sigma], axis=-1)
    return out


def sym_power_metric(h, d):
    """Induced inner product ``Sym^d h`` in the monomial basis.

    Entry ``(I, J)`` is ``perm(h[I][:, J]) / d!`` where ``I`` and ``J`` are
    expanded into their lists of variable indices.
    """
    if d < 1:
        raise ValueError("degree must be positive")
    hm = h if isinstance(h, HermMetric) else HermMetric(h)
    if d == 1:
        return hm
    lists = orthonormal_sym_basis(hm.dim, d).index_lists()
    g = _block_permanents(np.asarray(hm.entries), lists, lists) / math.factorial(d)
    return HermMetric(hermitize(g), basis=f"Sym{d}({hm.basis})")


def sym_power_metric_naive(h, d):
    """Reference implementation of :func:`sym_power_metric`, one permanent at a time."""
    h = np.asarray(h.entries if isinstance(h, HermMetric) else h)
    lists = orthonormal_sym_basis(h.shape[0], d).index_lists()
    R = len(lists)
    g = np.empty((R, R), dtype=complex)
    for i in range(R):
        for j in range(R):
            g[i, j] = permanent_naive(h[np.ix_(lists[i], lists[j])]) / math.factorial(d)
    return g


def sym_power_map(u, d):
    """Matrix of the map induced by ``u`` on Sym^d V (monomial coefficients).

    Entry ``(I, J)`` is ``perm(u[I][:, J]) / I!``.
    """
    u = np.asarray(u, dtype=complex)
    r = u.shape[0]
    basis = orthonormal_sym_basis(r, d)
    lists = basis.index_lists()
    fact = np.array([I.factorial for I in basis.indices], dtype=float)
    return _block_permanents(u, lists, lists) / fact[:, None]


def sym_product(vectors):
    """Monomial coefficients of the symmetric product ``v_1 v_2 ... v_d``."""
    v = np.asarray(vectors, dtype=complex)
    d, r = v.shape
    basis = orthonormal_sym_basis(r, d)
    lists = basis.index_lists()
    fact = np.array([I.factorial for I in basis.indices], dtype=float)
    cols = np.arange(d)[None, :]
    # treat the vectors as the columns of an r x d matrix
    return _block_permanents(v.T, lists, cols)[:, 0] / fact


def monomials(f, r, d):
    """``f^I`` for every multi-index; ``f`` has shape (..., r)."""
    parts = orthonormal_sym_basis(r, d).parts_array()
    f = np.asarray(f, dtype=complex)
    return np.prod(f[..., None, :] ** parts, axis=-1)


# --------------------------------------------------------------------------


def metric_distance(H, H0):
    """Relative operator norm ``|| H0^{-1/2} (H - H0) H0^{-1/2} ||``."""
    a = H if isinstance(H, HermMetric) else HermMetric(H)
    b = H0 if isinstance(H0, HermMetric) else HermMetric(H0)
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    if a.basis != b.basis:
        raise ValueError(f"basis mismatch: {a.basis!r} vs {b.basis!r}")
    s = herm_power(b.entries, -0.5)
    return op_norm_herm(s @ (a.entries - b.entries) @ s)


def random_pd(r, rng, cond=10.0, scale=1.0):
    """Random Hermitian PD matrix with condition number ``cond``."""
    z = rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r))
    q, _ = np.linalg.qr(z)
    w = np.exp(np.linspace(0.0, np.log(cond), r)) if r > 1 else np.ones(1)
    rng.shuffle(w)
    return scale * hermitize((q * w) @ q.conj().T)


def random_unitary_wrt(h, rng):
    """A matrix ``U`` with ``U^H h U = h``."""
    h = np.asarray(h)
    r = h.shape[0]
    z = rng.standard_normal((r, r)) + 1j * rng.standard_normal((r, r))
    q, _ = np.linalg.qr(z)
    s = herm_power(h, 0.5)
    return herm_power(h, -0.5) @ q @ s
