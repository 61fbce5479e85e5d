"""Balanced metrics on vector bundles and on the projectivized dual bundle.

Modules
-------
hermcore
    Hermitian metrics on V and their symmetric powers.
fiber
    Fubini-Study quadrature on P^{r-1} and fiber integrals over O(d).
models
    Test geometries: split bundles over P^1 and line bundles on a torus.
balance
    L^2 Grams, the T-map iteration and asymptotic probes.
projective
    Sections of O_PE*(d) (x) L^k, the PE* Gram and the almost-balanced defect.
storage
    Text persistence for matrices and sampled models.
cli
    The ``projbalance`` command.
"""
__version__ = "0.1.0"
