"""From balanced metrics on Sym^d E (x) L^k to metrics on O_PE*(d) (x) L^k.

The balanced basis of Sym^d E (x) L^k, read as sections over PE*, has an
almost diagonal Gram matrix.  On the homogeneous model O(1)^2 the defect is
zero up to quadrature noise.  A perturbation of the reference metric of size
eps produces a defect of size eps, with a k-independent constant.
"""
import numpy as np

from projbalance.fiber import c_closed_form
from projbalance.models import ModelSpec, generate
from projbalance.projective import (almost_balanced_run, make_ruled_mesh, perturbation_defect,
                                    random_direction, volume_identity_check)

spec = ModelSpec("p1-split", (1, 1))

for d in (1, 2):
    model = generate(spec.with_k(8).with_d(d))
    rep = volume_identity_check(make_ruled_mesh(model, level=d + 4), model)
    print(f"d={d}: volume by product formula {rep.product_mass:.10f}, "
          f"by induced curvature {rep.induced_mass:.10f}")

print("\n d   k    D/(d mu + k)     C_{2,d}          opNormM/D")
for d in (1, 2):
    for k in (4, 8, 16):
        run = almost_balanced_run(spec, d, k)
        r = run.report
        print(f"{d:2d} {k:3d}  {r.Dnormalized:.12f}  {c_closed_form(2, d):.12f}  {r.relative_defect:.1e}")

rng = np.random.default_rng(2)
P = random_direction(3, rng)
print("\nperturbed Sym^2 reference metric, defect / eps:")
for k in (4, 8, 16):
    ratios = [perturbation_defect(spec, 2, k, eps, P, volume_mode="product").defect / eps
              for eps in (1e-1, 1e-2, 1e-3)]
    print(f"  k={k:2d}: " + "  ".join(f"{x:.4f}" for x in ratios))
