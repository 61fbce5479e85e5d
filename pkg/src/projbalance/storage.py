"""Text and JSON persistence.

Matrix text format
------------------
A header line ``# shape=<d0>x<d1>[x<d2>...]`` followed by one line per row of
the array reshaped to ``(-1, last_dim)``.  Each entry is written as a
``re im`` pair with 17 significant digits, so complex data round-trips
exactly.

Sample bundles
--------------
``save_sample`` writes a directory with ``manifest.json`` (model spec, r, d,
k, N, mesh size, frame conventions, payload hashes) and matrix payloads
``points.txt``, ``charts.txt``, ``weights.txt``, ``density.txt``,
``sections.txt`` (shape N x P x R) and ``metric.txt`` (P x R x R).
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile

import numpy as np

from .models import BaseMesh, MetricField, SectionSample

FORMAT_VERSION = 1
FRAME_CONVENTION = ("metric[a, b] = <e_b, e_a>; gram = sum_p w_p S^H H S; "
                    "p1 chart 0 is z with |z| <= 1, chart 1 is u = 1/z")


def git_hash(data: bytes) -> str:
    """SHA-1 of the bytes framed as a git blob."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return git_hash(fh.read())


def atomic_write(path, text):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_matrix(a) -> str:
    a = np.asarray(a, dtype=complex)
    shape = a.shape if a.ndim else (1,)
    rows = a.reshape(-1, shape[-1]) if a.ndim else a.reshape(1, 1)
    lines = ["# shape=" + "x".join(str(s) for s in shape)]
    for row in rows:
        lines.append(" ".join(f"{z.real:.17g} {z.imag:.17g}" for z in row))
    return "\n".join(lines) + "\n"


def parse_matrix(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# shape="):
        raise ValueError("matrix file lacks a '# shape=' header")
    shape = tuple(int(s) for s in lines[0][len("# shape="):].split("x"))
    vals = np.array([float(x) for ln in lines[1:] if ln.strip() for x in ln.split()])
    n = int(np.prod(shape))
    if vals.size != 2 * n:
        raise ValueError(f"matrix payload has {vals.size // 2} entries, header says {n}")
    return (vals[0::2] + 1j * vals[1::2]).reshape(shape)


def save_matrix(a, path):
    atomic_write(path, format_matrix(a))


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return parse_matrix(fh.read())


def save_sample(model, directory):
    """Write mesh, sections and reference metric of a model to ``directory``."""
    os.makedirs(directory, exist_ok=True)
    mesh, sample, metric = model
    payloads = {
        "points": mesh.points, "charts": mesh.charts, "weights": mesh.weights,
        "density": mesh.density, "sections": sample.values, "metric": metric.values,
    }
    hashes = {}
    for name, arr in payloads.items():
        path = os.path.join(directory, f"{name}.txt")
        save_matrix(arr, path)
        hashes[f"{name}.txt"] = file_hash(path)
    spec = dataclasses.asdict(model.spec)
    spec["tau"] = [complex(spec["tau"]).real, complex(spec["tau"]).imag] if spec.get("tau") is not None else None
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": spec, "r": model.spec.r, "d": sample.d, "k": sample.k, "N": sample.N,
        "rank": sample.fiber_rank, "meshSize": mesh.meta.get("mesh_size"), "mesh_kind": mesh.kind,
        "bundle": sample.bundle, "frame_convention": FRAME_CONVENTION,
        "labels": [list(map(int, lab)) if isinstance(lab, tuple) else lab for lab in (sample.labels or [])],
        "files": hashes,
    }
    atomic_write(os.path.join(directory, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_sample(directory, verify=True):
    """Read a bundle written by :func:`save_sample` (without evaluators)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    data = {}
    for fname, digest in manifest["files"].items():
        path = os.path.join(directory, fname)
        if verify and file_hash(path) != digest:
            raise ValueError(f"hash mismatch for {fname}")
        data[fname[:-4]] = load_matrix(path)
    mesh = BaseMesh(data["points"], data["charts"].real.astype(int), data["weights"].real,
                    data["density"].real, kind=manifest["mesh_kind"], meta={"mesh_size": manifest["meshSize"]})
    sample = SectionSample(data["sections"], manifest["k"], manifest["d"], manifest["bundle"])
    return manifest, mesh, sample, MetricField(data["metric"])
