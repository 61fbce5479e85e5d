import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from projbalance.fiber import (PerturbationTooLarge, QuadratureUnderResolved, c_closed_form, c_constant,
                               eval_induced_metric, eval_section, fiber_gram, fiber_volume,
                               fs_quadrature, load_rule, moment_error, moment_oracle, perturbation_check,
                               save_rule)
from projbalance.hermcore import random_pd, sym_power_metric


def test_closed_form_values():
    assert c_closed_form(1, 4) == 1.0
    assert math.isclose(c_closed_form(2, 1), math.pi / 2)
    assert math.isclose(c_closed_form(2, 2), 2 * math.pi / 3)
    assert math.isclose(fiber_volume(3), math.pi ** 2 / 2)


def test_moment_oracle_orthogonality():
    assert moment_oracle((1, 0), (0, 1)) == 0.0
    assert math.isclose(moment_oracle((1, 1), (1, 1)), math.pi / 6)


@pytest.mark.parametrize("r,level", [(2, 3), (3, 2), (4, 2)])
def test_product_rule_is_exact(r, level):
    rule = fs_quadrature(r, level)
    assert moment_error(rule, level) < 1e-13
    assert math.isclose(rule.total_mass, fiber_volume(r))


def test_montecarlo_needs_seed():
    with pytest.raises(ValueError, match="seed"):
        fs_quadrature(2, 3, kind="montecarlo")


def test_montecarlo_is_reproducible():
    a, b = fs_quadrature(2, 2, seed=7, kind="montecarlo"), fs_quadrature(2, 2, seed=7, kind="montecarlo")
    assert np.array_equal(a.points, b.points)


def test_under_resolved_rule_is_reported():
    with pytest.raises(QuadratureUnderResolved, match="level 1"):
        c_constant(3, 3, fs_quadrature(3, 1))


def test_bad_levels():
    with pytest.raises(ValueError):
        fs_quadrature(2, 0)
    with pytest.raises(ValueError):
        fs_quadrature(0, 2)


def test_section_dimension_check():
    with pytest.raises(ValueError, match="coefficients"):
        eval_section(np.ones(2), np.ones(2), 2)


def test_induced_metric_is_scale_invariant_in_f(rng):
    h = random_pd(2, rng)
    s = rng.standard_normal(3) + 0j
    f = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    H = np.asarray(sym_power_metric(h, 2).entries)
    assert np.isclose(eval_induced_metric(H, s, s, f, 2), eval_induced_metric(H, s, s, (2 - 3j) * f, 2))


def test_perturbation_check_is_linear(rng):
    h = random_pd(2, rng)
    S = np.asarray(sym_power_metric(h, 2).entries)
    P = random_pd(3, rng) - 1.5 * np.eye(3)
    rule = fs_quadrature(2, 6)
    ratios = []
    for eps in (1e-2, 1e-3, 1e-4):
        s = np.linalg.cholesky(S)
        H = S + eps * s @ P @ s.conj().T / np.linalg.norm(P, 2)
        ratios.append(perturbation_check(h, H, rule, 2).worst_ratio)
    assert max(ratios) / min(ratios) < 1.1
    assert perturbation_check(h, S, rule, 2).max_lhs < 1e-12


def test_perturbation_check_rejects_large(rng):
    h = np.eye(2)
    with pytest.raises(PerturbationTooLarge):
        perturbation_check(h, 3 * np.eye(2), fs_quadrature(2, 3), 1)


def test_rule_round_trip(tmp_path):
    rule = fs_quadrature(3, 2)
    save_rule(rule, tmp_path / "rule.txt")
    back = load_rule(tmp_path / "rule.txt")
    assert np.array_equal(back.points, rule.points) and np.array_equal(back.weights, rule.weights)
    assert back.level == rule.level and back.r == rule.r


@settings(max_examples=30, deadline=None)
@given(r=st.integers(1, 3), d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_fiber_gram_equals_constant_times_sym_power(r, d, seed):
    rng = np.random.default_rng(seed)
    h = random_pd(r, rng, cond=10.0)
    F = np.asarray(fiber_gram(h, d, fs_quadrature(r, d)).entries)
    S = np.asarray(sym_power_metric(h, d).entries)
    assert np.linalg.norm(F - c_closed_form(r, d) * S, 2) <= 1e-10 * np.linalg.norm(S, 2)
