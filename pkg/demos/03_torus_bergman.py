"""Bergman kernel and balanced metrics for a line bundle on a flat torus.

The theta-function basis is balanced already, the Bergman density is
constant up to exponentially small terms and its mean grows like k.  The
distance between the balanced metric and the flat metric falls faster than
any power of k.
"""
from projbalance.balance import bergman_expansion_probe, convergence_rate_probe
from projbalance.models import ModelSpec

spec = ModelSpec("torus-line", tau=1.5j, d0=1)

fit = bergman_expansion_probe(spec, range(10, 25, 2))
print(" k   mean density   spatial variation   |int tr B - N|")
for k, m, c, t in zip(fit.ks, fit.mean_bergman, fit.constancy, fit.trace_error):
    print(f"{k:3d}   {m:12.8f}   {c:.2e}            {t:.1e}")
print(f"fit: density = {fit.leading:.6f} k + {fit.A1:.2e}")

rep = convergence_rate_probe(spec, range(6, 25, 2))
print("\n k   distance to flat metric   local slope")
for k, d, s in zip(rep.ks, rep.delta, rep.slopes):
    print(f"{k:3d}   {d:.3e}                 {s:7.2f}")
