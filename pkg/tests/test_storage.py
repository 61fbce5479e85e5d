import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from projbalance.models import ModelSpec, generate
from projbalance.storage import (atomic_write, file_hash, format_matrix, git_hash, load_sample, parse_matrix,
                                 save_sample)


def test_git_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_matrix_header_required():
    with pytest.raises(ValueError, match="shape"):
        parse_matrix("1 0\n")
    with pytest.raises(ValueError, match="entries"):
        parse_matrix("# shape=2x2\n1 0 2 0\n")


@settings(max_examples=50, deadline=None)
@given(arrays(np.complex128, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)),
              elements=st.complex_numbers(allow_nan=False, allow_infinity=False, max_magnitude=1e300)))
def test_matrix_round_trip_is_exact(a):
    assert np.array_equal(parse_matrix(format_matrix(a)), a)


def test_atomic_write_leaves_no_temp(tmp_path):
    path = tmp_path / "sub" / "x.txt"
    atomic_write(path, "abc")
    assert path.read_text() == "abc"
    assert [p.name for p in path.parent.iterdir()] == ["x.txt"]


def test_sample_round_trip(tmp_path):
    model = generate(ModelSpec("p1-split", (1, 2), 2, 2))
    man = save_sample(model, tmp_path)
    assert man["N"] == model.sample.N and man["rank"] == 3
    back, mesh, sample, metric = load_sample(tmp_path)
    assert np.array_equal(sample.values, model.sample.values)
    assert np.array_equal(mesh.weights, model.mesh.weights)
    assert np.array_equal(metric.values, model.metric.values)
    assert [tuple(x) for x in back["labels"]] == model.sample.labels


def test_sample_hash_mismatch(tmp_path):
    model = generate(ModelSpec("torus-line", tau=1.5j, k=3))
    save_sample(model, tmp_path)
    with open(tmp_path / "weights.txt", "a") as fh:
        fh.write("0 0\n")
    with pytest.raises(ValueError, match="hash mismatch"):
        load_sample(tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["files"]["sections.txt"] == file_hash(tmp_path / "sections.txt")
