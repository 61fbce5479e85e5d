import math

import numpy as np
import pytest

import projbalance.projective as projective
from projbalance.balance import NotConverged, balance_iterate, balanced_basis, l2_gram
from projbalance.fiber import c_closed_form
from projbalance.models import ModelSpec, SectionSample, generate
from projbalance.projective import (FrameMismatch, SizeCapExceeded, almost_balanced_report, almost_balanced_run,
                                    decay_probe, fiber_sup_ratio, hat_metric_at_nodes, hat_sections,
                                    induced_density_ratio, make_ruled_mesh, node_metric_distance,
                                    node_weights, pe_balance_iterate, pe_gram, perturbation_defect,
                                    perturbed_metric, random_direction, volume_identity_check)


@pytest.fixture(scope="module")
def sym2():
    model = generate(ModelSpec("p1-split", (1, 1), 3, 2))
    return model, make_ruled_mesh(model, level=6)


def test_ruled_mesh_mass(sym2):
    model, ruled = sym2
    assert math.isclose(ruled.total_mass, math.pi * math.pi, rel_tol=1e-13)
    assert ruled.size == len(model.mesh.weights) * len(ruled.rule.weights)


def test_hat_sections_shape_and_values(sym2):
    model, ruled = sym2
    hats = hat_sections(model.sample, ruled)
    assert hats.values.shape == (model.sample.N, ruled.size)
    # first node: s^ = sum_I s_I f^I
    f = ruled.f[0]
    S = model.sample.values[:, 0, :]
    expected = S @ np.array([f[0] ** 2, f[0] * f[1], f[1] ** 2])
    assert np.allclose(hats.values[:, 0], expected)


def test_hat_sections_frame_checks(sym2):
    model, ruled = sym2
    other = generate(ModelSpec("p1-split", (1, 1), 3, 2, mesh_size=9))
    with pytest.raises(FrameMismatch):
        hat_sections(other.sample, ruled)
    d1 = generate(ModelSpec("p1-split", (1, 1), 3, 1, mesh_size=ruled.base.meta["mesh_size"]))
    with pytest.raises(FrameMismatch, match="rank"):
        hat_sections(SectionSample(d1.sample.values, 3, 2, "x"), ruled)


def test_size_caps(sym2, monkeypatch):
    model, ruled = sym2
    monkeypatch.setattr(projective, "MAX_SECTIONS", 5)
    with pytest.raises(SizeCapExceeded):
        hat_sections(model.sample, ruled)
    monkeypatch.setattr(projective, "MAX_NODES", 10)
    with pytest.raises(SizeCapExceeded):
        make_ruled_mesh(model)


def test_fiber_sup_ratio(sym2):
    model, ruled = sym2
    hats = hat_sections(model.sample, ruled)
    ratio = fiber_sup_ratio(hats, model.metric)
    # monomial sections z^j e_1^2 are pure powers; e_1 e_2 sections are not
    assert ratio.max() <= 1 + 1e-12
    pure = [i for i, (c, _) in enumerate(model.sample.labels) if c != 1]
    mixed = [i for i, (c, _) in enumerate(model.sample.labels) if c == 1]
    # the rule has no node at the maximum, so the pure-power sup is approached from below
    assert ratio[pure].max(axis=1).min() > 0.9
    assert ratio[mixed].max() <= 0.5 + 1e-12


def test_reference_gram_is_constant_times_identity(sym2):
    model, ruled = sym2
    mesh, sample, metric = model
    res = balance_iterate(sample, mesh, tol=1e-12, start=l2_gram(sample, metric, mesh))
    hats = hat_sections(sample, ruled, coeffs=balanced_basis(res, sample, mesh))
    G = pe_gram(hats, res.metric, "product")
    rep = almost_balanced_report(G, 2, 2, 1.0, 3)
    assert rep.relative_defect < 1e-10
    assert rep.Dnormalized == pytest.approx(c_closed_form(2, 2), rel=1e-10)


def test_induced_density_matches_product_for_einstein(sym2):
    model, ruled = sym2
    ev = model.metric.evaluator
    ratio = induced_density_ratio(lambda c, z: np.linalg.inv(ev(c, z)), ruled, 2)
    assert np.allclose(ratio, 2 * (2 + 3), rtol=1e-6)


def test_volume_identity(sym2):
    model, ruled = sym2
    assert volume_identity_check(ruled, model).discrepancy < 1e-6


def test_product_mode_requires_einstein():
    model = generate(ModelSpec("p1-split", (0, 1), 3))
    ruled = make_ruled_mesh(model, level=3)
    hats = hat_sections(model.sample, ruled)
    with pytest.raises(ValueError, match="Hermitian-Einstein"):
        node_weights(hats, model.metric, "product")
    with pytest.raises(ValueError, match="volume mode"):
        node_weights(hats, model.metric, "uniform")


def test_unstable_model_is_flagged():
    # O (+) O(1) is unstable: no balanced metric, but the induced Gram is still evaluated
    run = almost_balanced_run(ModelSpec("p1-split", (0, 1)), 1, 6, level=4)
    assert not run.converged
    assert np.all(np.linalg.eigvalsh(run.report.gram) > 0)


def test_perturbation_defect_is_linear():
    rng = np.random.default_rng(1)
    P = random_direction(2, rng)
    spec = ModelSpec("p1-split", (1, 1))
    a = perturbation_defect(spec, 1, 4, 1e-2, P, volume_mode="product")
    b = perturbation_defect(spec, 1, 4, 1e-3, P, volume_mode="product")
    assert a.metric_distance == pytest.approx(1e-2, rel=1e-10)
    assert a.defect / b.defect == pytest.approx(10, rel=0.05)


def test_perturbed_metric_keeps_evaluator(rng):
    model = generate(ModelSpec("p1-split", (1, 1), 2))
    P = random_direction(2, rng)
    H = perturbed_metric(model.metric, P, 0.1)
    z = np.array([0.3 + 0.1j])
    assert np.allclose(H.evaluator(np.zeros(1, int), z), perturbed_metric(
        type(model.metric)(model.metric.evaluator(np.zeros(1, int), z)), P, 0.1).values)


def test_pe_balance_from_cold_start():
    run = almost_balanced_run(ModelSpec("p1-split", (1, 1)), 1, 4, volume_mode="product")
    cold = hat_sections(run.hats.sample, run.hats.ruled)
    res = pe_balance_iterate(cold, tol=1e-10)
    assert res.report.converged and res.definition_error <= 1e-10 * res.report.volume
    ref = hat_metric_at_nodes(run.hats, run.balance.metric)
    assert node_metric_distance(res.node_metric, ref) < 1e-8


def test_pe_balance_ruled_mismatch(sym2):
    model, ruled = sym2
    hats = hat_sections(model.sample, ruled)
    with pytest.raises(FrameMismatch):
        pe_balance_iterate(hats, ruled=make_ruled_mesh(model, level=3))
    with pytest.raises(NotConverged):
        pe_balance_iterate(hats, tol=1e-14, max_iter=1)


def test_node_metric_distance_is_scale_free():
    h = np.array([1.0, 2.0, 3.0])
    assert node_metric_distance(5 * h, h) == 0.0
    assert node_metric_distance(h * [1, 1, 3], h) == pytest.approx(0.5)


def test_decay_probe_table():
    table = decay_probe(ModelSpec("p1-split", (1,)), 1, [2, 3, 4], volume_mode="product")
    text = table.to_csv()
    assert text.splitlines()[0] == "k,N,D,Dnorm,opNormM,slope"
    assert len(text.splitlines()) == 4
    with pytest.raises(ValueError, match="at least"):
        decay_probe(ModelSpec("p1-split", (1,)), 1, [2, 3])
