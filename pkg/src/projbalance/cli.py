"""Command-line front end.

Configuration files are flat ``dotted.key = value`` text, one key per line,
``#`` starting a comment.  Recognised keys::

    model.kind = p1-split            # or torus-line
    model.degrees = 1, 1             # p1-split summand degrees
    model.tau = 1.5j                 # torus modulus
    model.d0 = 1                     # torus base degree
    model.mesh_size = 24             # optional
    d = 1                            # symmetric power
    k_range = 4..20                  # or a comma list
    tol = 1e-10
    max_iter = 200
    seed = 0
    quadrature.level = 6
    quadrature.kind = product        # or montecarlo
    volume_mode = induced            # or product
    balance.accelerate = anderson    # or none
    balance.damping = 0
    balance.start = path/to/gram.txt # warm start
    verify.r_max = 3
    verify.d_max = 3
    verify.samples = 5
    probe.auto_run = true

Exit codes: 0 all checks pass, 2 numeric check failure, 3 configuration
error, 4 convergence failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .storage import atomic_write, file_hash, format_matrix, git_hash, load_matrix

logger = logging.getLogger("projbalance")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG, EXIT_CONVERGENCE = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration


def _parse_value(key, raw, lineno):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    try:
        return complex(raw.replace(" ", ""))
    except ValueError:
        pass
    return raw


def parse_config(text):
    """Parse flat ``key = value`` text into a dict, with line diagnostics."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if not key or any(c.isspace() for c in key):
            raise ConfigError(f"line {lineno}: malformed key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not raw:
            raise ConfigError(f"line {lineno}: key {key!r} has no value")
        out[key] = _parse_value(key, raw, lineno)
    return out


def parse_k_range(value):
    """``"4..20"``, ``"4..20..4"`` or ``"4, 8, 16"`` into a sorted list."""
    if isinstance(value, int):
        ks = [value]
    else:
        s = str(value).replace(" ", "")
        try:
            if ".." in s:
                parts = [int(p) for p in s.split("..")]
                if len(parts) not in (2, 3):
                    raise ValueError
                step = parts[2] if len(parts) == 3 else 1
                if step <= 0 or parts[1] < parts[0]:
                    raise ValueError
                ks = list(range(parts[0], parts[1] + 1, step))
            else:
                ks = [int(p) for p in s.split(",") if p]
        except ValueError:
            raise ConfigError(f"field k_range: malformed range {value!r}") from None
    if not ks or any(k < 0 for k in ks) or len(set(ks)) != len(ks):
        raise ConfigError(f"field k_range: needs distinct nonnegative integers, got {value!r}")
    return sorted(ks)


@dataclass
class RunConfig:
    kind: str = "p1-split"
    degrees: tuple = (1, 1)
    tau: complex = 1.5j
    d0: int = 1
    mesh_size: int | None = None
    d: int = 1
    k_range: list = field(default_factory=lambda: [4, 8, 12])
    tol: float = 1e-10
    max_iter: int = 200
    seed: int = 0
    level: int | None = None
    quad_kind: str = "product"
    volume_mode: str = "induced"
    accelerate: str | None = "anderson"
    damping: float = 0.0
    start: str | None = None
    r_max: int = 3
    d_max: int = 3
    samples: int = 5
    auto_run: bool = True
    jobs: int = 1
    source: str | None = None

    def spec(self, k=0):
        from .models import ModelSpec
        degrees = self.degrees if self.kind == "p1-split" else (0,)
        return ModelSpec(self.kind, degrees, k, self.d, self.tau, self.d0, self.mesh_size)

    def echo(self):
        out = asdict(self)
        out["tau"] = [complex(self.tau).real, complex(self.tau).imag]
        out["degrees"] = list(self.degrees)
        return out


_KEYS = {
    "model.kind": "kind", "model.degrees": "degrees", "model.tau": "tau", "model.d0": "d0",
    "model.mesh_size": "mesh_size", "d": "d", "k_range": "k_range", "tol": "tol",
    "max_iter": "max_iter", "seed": "seed", "quadrature.level": "level",
    "quadrature.kind": "quad_kind", "volume_mode": "volume_mode",
    "balance.accelerate": "accelerate", "balance.damping": "damping", "balance.start": "start",
    "verify.r_max": "r_max", "verify.d_max": "d_max", "verify.samples": "samples",
    "probe.auto_run": "auto_run",
}


def build_config(values, overrides=None):
    cfg = RunConfig()
    for key, val in values.items():
        if key not in _KEYS:
            raise ConfigError(f"field {key}: unknown key")
        name = _KEYS[key]
        try:
            if name == "degrees":
                val = tuple(int(x) for x in str(val).replace(" ", "").split(",") if x)
            elif name == "k_range":
                val = parse_k_range(val)
            elif name == "tau":
                val = complex(val)
            elif name in ("d0", "mesh_size", "d", "max_iter", "seed", "level", "r_max", "d_max", "samples"):
                if not isinstance(val, int) or isinstance(val, bool):
                    raise ValueError
            elif name in ("tol", "damping"):
                val = float(val)
            elif name == "accelerate":
                val = None if str(val).lower() == "none" else str(val)
            elif name == "auto_run":
                if not isinstance(val, bool):
                    raise ValueError
            else:
                val = str(val)
        except (TypeError, ValueError):
            raise ConfigError(f"field {key}: invalid value {val!r}") from None
        setattr(cfg, name, val)
    for name, val in (overrides or {}).items():
        if val is not None:
            setattr(cfg, name, val)
    _validate(cfg)
    return cfg


def _validate(cfg):
    def bad(field_, msg):
        raise ConfigError(f"field {field_}: {msg}")

    if cfg.kind not in ("p1-split", "torus-line"):
        bad("model.kind", f"unknown model {cfg.kind!r}")
    if cfg.kind == "p1-split" and (not cfg.degrees or any(a < 0 for a in cfg.degrees)):
        bad("model.degrees", "needs nonnegative integers")
    if complex(cfg.tau).imag <= 0:
        bad("model.tau", "Im tau must be positive")
    if cfg.d0 < 1:
        bad("model.d0", "must be positive")
    if not 1 <= cfg.d <= 6:
        bad("d", "must lie in 1..6")
    if not 0 < cfg.tol < 1:
        bad("tol", "must lie in (0, 1)")
    if cfg.max_iter < 1:
        bad("max_iter", "must be positive")
    if cfg.level is not None and cfg.level < 1:
        bad("quadrature.level", "must be positive")
    if cfg.quad_kind not in ("product", "montecarlo"):
        bad("quadrature.kind", "must be product or montecarlo")
    if cfg.volume_mode not in ("product", "induced"):
        bad("volume_mode", "must be product or induced")
    if cfg.accelerate not in (None, "anderson"):
        bad("balance.accelerate", "must be anderson or none")
    if not 0 <= cfg.damping < 2:
        bad("balance.damping", "must lie in [0, 2)")
    if not 1 <= cfg.r_max <= 4:
        bad("verify.r_max", "must lie in 1..4")
    if not 1 <= cfg.d_max <= 4:
        bad("verify.d_max", "must lie in 1..4")
    if cfg.jobs < 1:
        bad("--jobs", "must be positive")
    if cfg.seed < 0:
        bad("seed", "must be nonnegative")


def load_config(path, overrides=None):
    if path is None:
        return build_config({}, overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = build_config(parse_config(text), overrides)
    cfg.source = path
    return cfg


# --------------------------------------------------------------------------
# manifests


def _versions():
    import scipy
    return {"projbalance": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


class Run:
    """Collects artifacts and stage statuses; writes the manifest at the end."""

    def __init__(self, command, cfg, out):
        self.command, self.cfg, self.out = command, cfg, out
        self.stages, self.artifacts = [], []
        self.t0 = time.perf_counter()
        os.makedirs(out, exist_ok=True)

    def write(self, name, text):
        path = os.path.join(self.out, name)
        atomic_write(path, text)
        self.artifacts.append(name)
        return path

    def stage(self, name, status, wall, **info):
        self.stages.append({"name": name, "status": status, "wall_time": wall, **info})

    def finish(self, exit_code):
        inputs = {}
        if self.cfg.source:
            inputs[os.path.basename(self.cfg.source)] = file_hash(self.cfg.source)
        if self.cfg.start:
            inputs[os.path.basename(self.cfg.start)] = file_hash(self.cfg.start)
        manifest = {
            "command": self.command, "config": self.cfg.echo(), "versions": _versions(),
            "input_hashes": inputs,
            "config_hash": git_hash(json.dumps(self.cfg.echo(), sort_keys=True).encode()),
            "stages": self.stages,
            "artifacts": {a: file_hash(os.path.join(self.out, a)) for a in self.artifacts},
            "exit_code": exit_code, "wall_time": time.perf_counter() - self.t0,
        }
        atomic_write(os.path.join(self.out, "manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
        return exit_code


def _g(x):
    return f"{x:.17g}"


def _line(ok, name, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


# --------------------------------------------------------------------------
# verify-fiber


def cmd_verify_fiber(cfg, out):
    from .fiber import (QuadratureUnderResolved, c_closed_form, c_constant, eval_induced_metric,
                        fiber_gram, fs_quadrature, moment_error)
    from .hermcore import orthonormal_sym_basis, random_pd, sym_power_metric, sym_product

    run = Run("verify-fiber", cfg, out)
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for r in range(1, cfg.r_max + 1):
        for d in range(1, cfg.d_max + 1):
            t0 = time.perf_counter()
            level = cfg.level if cfg.level is not None else d
            rule = fs_quadrature(r, level, seed=cfg.seed, kind=cfg.quad_kind)
            checks = {}
            try:
                c = c_constant(r, d, rule)
                checks["C_closed_form"] = abs(c - c_closed_form(r, d)) / c_closed_form(r, d)
            except QuadratureUnderResolved as exc:
                checks["C_closed_form"] = math.inf
                print(f"quadrature under-resolved: {exc}")
            tol_c = max(1e-8, 10 * rule.tolerance)
            checks["moments"] = moment_error(rule, d) if cfg.quad_kind == "product" else 0.0
            worst = 0.0
            for _ in range(cfg.samples):
                h = random_pd(r, rng, cond=10.0)
                F = np.asarray(fiber_gram(h, d, rule).entries)
                S = np.asarray(sym_power_metric(h, d).entries)
                cc = c_closed_form(r, d)
                worst = max(worst, np.linalg.norm(F - cc * S, 2) / cc / np.linalg.norm(S, 2))
            checks["fiber_gram"] = worst
            # the metric induced by Sym^d h is the d-th power of the one induced by h
            power_err = 0.0
            for _ in range(cfg.samples):
                h = random_pd(r, rng, cond=10.0)
                f = rng.standard_normal(r) + 1j * rng.standard_normal(r)
                v = rng.standard_normal(r) + 1j * rng.standard_normal(r)
                w = rng.standard_normal(r) + 1j * rng.standard_normal(r)
                lhs = eval_induced_metric(h, v, w, f, 1) ** d
                rhs = eval_induced_metric(np.asarray(sym_power_metric(h, d).entries),
                                          sym_product([v] * d), sym_product([w] * d), f, d)
                power_err = max(power_err, abs(lhs - rhs) / abs(lhs))
            checks["power_identity"] = power_err
            basis = orthonormal_sym_basis(r, d)
            U = np.diag(basis.norm_constants)
            G = U @ np.asarray(sym_power_metric(np.eye(r), d).entries) @ U
            checks["orthonormal_basis"] = float(np.max(np.abs(G - np.eye(len(G)))))
            limits = {"C_closed_form": tol_c, "moments": 1e-12, "fiber_gram": max(1e-6, 10 * rule.tolerance),
                      "power_identity": 1e-10, "orthonormal_basis": 1e-14}
            for name, val in checks.items():
                ok = bool(val <= limits[name])
                rows.append({"r": r, "d": d, "check": name, "value": val, "limit": limits[name], "pass": ok})
                _line(ok, f"r={r} d={d} {name}", f"{val:.3e} (limit {limits[name]:.0e})")
            run.stage(f"r={r},d={d}", "pass" if all(x["pass"] for x in rows if x["r"] == r and x["d"] == d)
                      else "fail", time.perf_counter() - t0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r", "d", "check", "value", "limit", "pass"])
    for row in rows:
        w.writerow([row["r"], row["d"], row["check"], _g(row["value"]), _g(row["limit"]), row["pass"]])
    run.write("verify_fiber.csv", buf.getvalue())
    ok = all(row["pass"] for row in rows)
    return run.finish(EXIT_OK if ok else EXIT_NUMERIC)


# --------------------------------------------------------------------------
# balance


def _balance_one(args):
    cfg, k, start = args
    from .balance import NotConverged, balance_iterate
    from .models import generate

    model = generate(cfg.spec(k))
    mesh, sample, _ = model
    G0 = None
    if start is not None:
        G0 = load_matrix(start)
        if G0.shape != (sample.N, sample.N):
            raise ConfigError(f"field balance.start: Gram has shape {G0.shape}, model needs N={sample.N}")
    try:
        res = balance_iterate(sample, mesh, tol=cfg.tol, max_iter=cfg.max_iter, start=G0,
                              damping=cfg.damping, accelerate=cfg.accelerate)
        ok = True
    except NotConverged as exc:
        res, ok = exc.result, False
    return k, ok, res.gram, res.metric.values if res.metric is not None else None, res.report


def _map_jobs(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def cmd_balance(cfg, out):
    run = Run("balance", cfg, out)
    results = _map_jobs(_balance_one, [(cfg, k, cfg.start) for k in cfg.k_range], cfg.jobs)
    n_ok = 0
    for k, ok, G, H, rep in results:
        n_ok += ok
        run.write(f"gram_k{k}.txt", format_matrix(G))
        if H is not None:
            run.write(f"metric_k{k}.txt", format_matrix(H))
        run.write(f"report_k{k}.json", rep.to_json())
        run.stage(f"k={k}", "converged" if ok else "not-converged", rep.wall_time,
                  iterations=rep.iterations, residual=rep.final_residual)
        _line(ok, f"balance k={k}", f"N={rep.N} iterations={rep.iterations} residual={rep.final_residual:.3e}")
    return run.finish(EXIT_OK if n_ok else EXIT_CONVERGENCE)


# --------------------------------------------------------------------------
# balance-pe


def cmd_balance_pe(cfg, out):
    from .balance import NotConverged
    from .projective import (almost_balanced_run, hat_metric_at_nodes, node_metric_distance,
                             pe_balance_iterate)

    run = Run("balance-pe", cfg, out)
    code = EXIT_OK
    for k in cfg.k_range:
        t0 = time.perf_counter()
        ab = almost_balanced_run(cfg.spec(), cfg.d, k, tol=min(cfg.tol, 1e-10), max_iter=cfg.max_iter,
                                 level=cfg.level, volume_mode=cfg.volume_mode)
        mode = cfg.volume_mode if ab.model.spec.hermitian_einstein else "induced"
        try:
            res = pe_balance_iterate(ab.hats, tol=cfg.tol, max_iter=cfg.max_iter, volume_mode=mode)
            ok = True
        except NotConverged as exc:
            res, ok = exc.result, False
        dist = node_metric_distance(res.node_metric, hat_metric_at_nodes(ab.hats, ab.balance.metric))
        rel = ab.report.relative_defect
        run.write(f"pe_gram_k{k}.txt", format_matrix(res.gram))
        summary = {"k": k, "N": ab.hats.N, "converged": ok, "iterations": res.report.iterations,
                   "residual": res.report.final_residual, "definition_error": res.definition_error,
                   "distance_to_almost_balanced": dist, "almost_balanced_defect": rel,
                   "volume_mode": mode}
        run.write(f"pe_report_k{k}.json", json.dumps(summary, indent=2, sort_keys=True))
        run.stage(f"k={k}", "converged" if ok else "not-converged", time.perf_counter() - t0, **summary)
        _line(ok, f"balance-pe k={k}", f"residual={res.report.final_residual:.3e} distance={dist:.3e} "
                                        f"opNormM/D={rel:.3e}")
        if not ok:
            code = EXIT_CONVERGENCE
    return run.finish(code)


# --------------------------------------------------------------------------
# probe-decay


def cmd_probe_decay(cfg, out):
    from .projective import decay_probe

    run = Run("probe-decay", cfg, out)
    starts = None
    if not cfg.auto_run:
        missing = [k for k in cfg.k_range if not os.path.exists(os.path.join(out, f"gram_k{k}.txt"))]
        if missing:
            raise ConfigError(f"no balanced Gram for k={missing} in {out}; run "
                              f"'projbalance balance --out {out}' first or set probe.auto_run = true")
        starts = {k: load_matrix(os.path.join(out, f"gram_k{k}.txt")) for k in cfg.k_range}
    t0 = time.perf_counter()
    table = decay_probe(cfg.spec(), cfg.d, cfg.k_range, tol=cfg.tol, max_iter=cfg.max_iter,
                        level=cfg.level, volume_mode=cfg.volume_mode, starts=starts)
    run.write("decay.csv", table.to_csv())
    summary = {"strictly_decreasing_top_half": table.strictly_decreasing, "top_slope": table.top_slope,
               "passed": table.passed, "flagged": table.flagged}
    run.write("decay_summary.json", json.dumps(summary, indent=2, sort_keys=True))
    run.stage("decay", "pass" if table.passed else "fail", time.perf_counter() - t0, **summary)
    for row, s in zip(table.rows, table.slopes):
        print(f"k={row['k']:3d} N={row['N']:4d} Dnorm={row['Dnorm']:.10f} "
              f"opNormM/D={row['rel']:.3e} slope={s:.2f}")
    _line(table.strictly_decreasing, "decay monotone over top half", str(table.strictly_decreasing))
    _line(table.top_slope <= -1, "top-window slope <= -1", f"{table.top_slope:.3f}")
    if table.flagged and len(table.flagged) == len(table.rows):
        return run.finish(EXIT_CONVERGENCE)
    return run.finish(EXIT_OK if table.passed else EXIT_NUMERIC)


# --------------------------------------------------------------------------
# report


def collect_manifests(root):
    found = []
    for dirpath, _, files in os.walk(root):
        if "manifest.json" in files:
            found.append(os.path.join(dirpath, "manifest.json"))
    return sorted(found)


def cmd_report(run_dir, out):
    """Merge every manifest under ``run_dir`` into ``summary.json``/``summary.csv``."""
    if not os.path.isdir(run_dir):
        raise ConfigError(f"run directory {run_dir} does not exist")
    rows, runs = [], {}
    for path in collect_manifests(run_dir):
        try:
            with open(path) as fh:
                man = json.load(fh)
            stages, command = man["stages"], man["command"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValueError(f"corrupt manifest {path}: {exc}") from None
        if command == "report":
            continue
        base = os.path.dirname(path)
        for name, digest in man.get("artifacts", {}).items():
            p = os.path.join(base, name)
            if not os.path.exists(p) or file_hash(p) != digest:
                raise ValueError(f"corrupt manifest {path}: artifact {name} missing or modified")
        key = man.get("config_hash", "") + ":" + command
        if key in runs:
            continue  # the same run copied twice merges once
        runs[key] = {"path": os.path.relpath(base, run_dir), "command": command,
                     "exit_code": man.get("exit_code"), "stages": len(stages)}
        for st in stages:
            rows.append({"run": runs[key]["path"], "command": command, "stage": st.get("name"),
                         "status": st.get("status"), "wall_time": st.get("wall_time")})
    os.makedirs(out, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "command", "stage", "status", "wall_time"])
    for row in sorted(rows, key=lambda r: (r["run"], r["command"], str(r["stage"]))):
        w.writerow([row["run"], row["command"], row["stage"], row["status"],
                    _g(row["wall_time"]) if isinstance(row["wall_time"], (int, float)) else ""])
    summary = {"runs": sorted(runs.values(), key=lambda r: (r["path"], r["command"])), "rows": len(rows)}
    atomic_write(os.path.join(out, "summary.csv"), buf.getvalue())
    atomic_write(os.path.join(out, "summary.json"), json.dumps(summary, indent=2, sort_keys=True))
    print(f"merged {len(runs)} runs, {len(rows)} rows")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="projbalance", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("verify-fiber", "balance", "balance-pe", "probe-decay", "report"):
        sp = sub.add_parser(name)
        if name == "report":
            sp.add_argument("run_dir", help="directory holding run manifests")
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--max-iter", type=int, dest="max_iter")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = args.out or os.path.join("runs", args.command)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir, args.out or args.run_dir)
        cfg = load_config(args.config, {"seed": args.seed, "jobs": args.jobs, "tol": args.tol,
                                        "max_iter": args.max_iter})
        _validate(cfg)
        handler = {"verify-fiber": cmd_verify_fiber, "balance": cmd_balance, "balance-pe": cmd_balance_pe,
                   "probe-decay": cmd_probe_decay}[args.command]
        return handler(cfg, out)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if "corrupt manifest" in str(exc) else EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
