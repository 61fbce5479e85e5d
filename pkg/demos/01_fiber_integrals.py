"""Fiber integrals over P^{r-1}.

Integrating the metric induced on O(d) by Sym^d h over the fibers of PE*
gives back Sym^d h up to the constant C_{r,d}.  This demo checks that on a
few random metrics and shows the constants.
"""
import numpy as np

from projbalance.fiber import c_closed_form, c_constant, fiber_gram, fs_quadrature
from projbalance.hermcore import random_pd, sym_power_metric

rng = np.random.default_rng(0)

print(" r  d   C (quadrature)      C (closed form)   max rel. error on random h")
for r in (1, 2, 3):
    for d in (1, 2, 3):
        rule = fs_quadrature(r, d)  # exact for degree-d moments
        c = c_constant(r, d, rule)
        worst = 0.0
        for _ in range(5):
            h = random_pd(r, rng, cond=10.0)
            F = np.asarray(fiber_gram(h, d, rule).entries)
            S = np.asarray(sym_power_metric(h, d).entries)
            worst = max(worst, np.linalg.norm(F - c * S, 2) / (c * np.linalg.norm(S, 2)))
        print(f"{r:2d} {d:2d}  {c:.15f}  {c_closed_form(r, d):.15f}  {worst:.1e}")

# a rule that is too coarse for the degree is refused rather than trusted
try:
    c_constant(3, 3, fs_quadrature(3, 1))
except Exception as exc:
    print("coarse rule:", exc)
