"""Balancing directly on PE*.

Starting from the raw monomial sections, the T-map for O_PE*(1) (x) L^12
converges to the metric obtained by pushing the balanced metric of
E (x) L^12 to PE*.
"""
from projbalance.models import ModelSpec
from projbalance.projective import (almost_balanced_run, hat_metric_at_nodes, hat_sections,
                                    node_metric_distance, pe_balance_iterate)

run = almost_balanced_run(ModelSpec("p1-split", (1, 1)), 1, 12)
print(f"almost-balanced metric: N = {run.hats.N}, opNormM/D = {run.report.relative_defect:.2e}")

cold = hat_sections(run.hats.sample, run.hats.ruled)
for tol in (1e-6, 1e-8, 1e-10):
    res = pe_balance_iterate(cold, tol=tol)
    dist = node_metric_distance(res.node_metric, hat_metric_at_nodes(run.hats, run.balance.metric))
    print(f"tol {tol:.0e}: {res.report.iterations:3d} iterations, residual {res.report.final_residual:.1e}, "
          f"distance to almost-balanced {dist:.1e}")
