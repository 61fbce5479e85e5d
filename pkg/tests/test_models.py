import math

import numpy as np
import pytest

from projbalance.balance import l2_gram
from projbalance.models import (MeshTooSmall, ModelSpec, _P1Split, base_point_free, generate, he_residual,
                                p1_gram_oracle, p1_mesh, riemann_roch, sym_sections, theta_sections)


def test_spec_validation():
    with pytest.raises(ValueError, match="unknown"):
        ModelSpec("sphere")
    with pytest.raises(ValueError):
        ModelSpec("p1-split", (1,), k=-1)
    with pytest.raises(ValueError, match="Im tau"):
        ModelSpec("torus-line", tau=1.0)


def test_spec_properties():
    s = ModelSpec("p1-split", (1, 3))
    assert s.r == 2 and s.slope == 2.0 and not s.hermitian_einstein
    assert ModelSpec("p1-split", (2, 2)).hermitian_einstein


def test_p1_mesh_integrates_fs_moments():
    mesh = p1_mesh(8)
    assert math.isclose(mesh.total_volume, math.pi, rel_tol=1e-14)
    for m, j in [(3, 1), (6, 2), (10, 5)]:
        f = np.where(mesh.charts == 0, np.abs(mesh.points) ** (2 * j),
                     np.abs(mesh.points) ** (2 * (m - j))) / (1 + np.abs(mesh.points) ** 2) ** m
        assert math.isclose(np.sum(mesh.weights * f), p1_gram_oracle(m, j), rel_tol=1e-12)


@pytest.mark.parametrize("degrees,k,d", [((1, 1), 3, 1), ((0, 2), 2, 2), ((1, 1, 1), 1, 2)])
def test_p1_gram_is_diagonal_oracle(degrees, k, d):
    model = generate(ModelSpec("p1-split", degrees, k, d))
    mesh, sample, metric = model
    assert sample.N == riemann_roch(model.spec)
    G = l2_gram(sample, metric, mesh)
    b = _P1Split(degrees, k, d)
    expected = [b.fact[i] * p1_gram_oracle(int(b.m[i]), j) for i, j in sample.labels]
    assert np.allclose(G, np.diag(expected), atol=1e-14)


def test_mesh_too_small():
    with pytest.raises(MeshTooSmall):
        generate(ModelSpec("p1-split", (1, 1), 20, mesh_size=3))


def test_he_residual_detects_non_einstein():
    assert he_residual(generate(ModelSpec("p1-split", (1, 1), 2))) < 1e-5
    assert he_residual(generate(ModelSpec("p1-split", (0, 2), 2))) > 0.5


def test_base_point_freeness():
    assert base_point_free(generate(ModelSpec("p1-split", (1, 2), 0)).sample)
    assert base_point_free(generate(ModelSpec("torus-line", tau=1.5j, k=4)).sample)


def test_sym_sections_rank():
    model = generate(ModelSpec("p1-split", (1, 1), 2))
    s2 = sym_sections(model, 2)
    assert s2.sample.fiber_rank == 3 and s2.sample.N == 3 * 5


def test_theta_quasi_periodicity():
    tau, n = 1.5j, 3
    z = np.array([0.1 + 0.2j, -0.3 + 0.4j])
    th = theta_sections(z, n, tau)
    assert np.allclose(theta_sections(z + 1, n, tau), th)
    factor = np.exp(-1j * math.pi * n * tau - 2j * math.pi * n * z)
    assert np.allclose(theta_sections(z + tau, n, tau), th * factor[None, :])


def test_torus_l2_gram_is_scalar():
    model = generate(ModelSpec("torus-line", tau=1.5j, k=5))
    G = l2_gram(model.sample, model.metric, model.mesh)
    assert np.allclose(G, G[0, 0] * np.eye(5), atol=1e-12 * abs(G[0, 0]))
