"""Balanced metrics on split bundles over P^1.

For O(a)^r (x) O(k) the T-map converges from any start; two random starts
give metrics that differ by a constant automorphism of the bundle.  For the
unstable bundle O (+) O(2) there is no balanced metric and the iteration
reports failure.
"""
import numpy as np

from projbalance.balance import NotConverged, balance_iterate, bergman_hermitian
from projbalance.hermcore import herm_inv, random_pd
from projbalance.models import ModelSpec, generate

rng = np.random.default_rng(1)

mesh, sample, _ = generate(ModelSpec("p1-split", (1, 1), 12))
print(f"O(1)^2 (x) O(12): N = {sample.N} sections")
metrics = []
for trial in range(2):
    res = balance_iterate(sample, mesh, tol=1e-10, start=random_pd(sample.N, rng, cond=10.0))
    rep = res.report
    print(f"  start {trial}: {rep.iterations} iterations, residual {rep.final_residual:.1e}")
    metrics.append(np.asarray(res.metric.values))

# H1^{-1} H2 is the same matrix at every point
C = np.einsum("pab,pbc->pac", herm_inv(metrics[0]), metrics[1])
print("  spread of H1^-1 H2 over the mesh:", f"{np.max(np.abs(C - C.mean(axis=0))):.1e}")

B = bergman_hermitian(sample, res.metric, mesh)
level = sample.N / (sample.fiber_rank * mesh.total_volume)
print(f"  Bergman kernel / (N / rV) in [{np.linalg.eigvalsh(B).min() / level:.12f}, "
      f"{np.linalg.eigvalsh(B).max() / level:.12f}]")

mesh, sample, _ = generate(ModelSpec("p1-split", (0, 2), 6))
try:
    balance_iterate(sample, mesh, max_iter=100)
except NotConverged as exc:
    print("O + O(2):", exc)
