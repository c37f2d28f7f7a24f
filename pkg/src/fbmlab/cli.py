"""Command line entry point: ``fbmlab <command> --config <path> [--seed S]
[--workers W] [--out DIR]``.

Each command runs one suite described by a TOML section of the same name
(``verify-all`` runs every suite present in the file). Suites write CSV/JSON
artifacts, ``summary.json`` and ``manifest.json`` into the output directory.

Exit status: 0 all checks pass, 1 some acceptance check failed, 2 bad
configuration, 3 numerical blow-up.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__, rng
from . import density_lab as dl
from . import hitting_lab as hl
from . import potential_theory as pt
from .bounds import _plain
from .fbm_core import DomainError, TimeGrid, covariance_matrix, sample_fbm
from .kl_expansion import build_basis, shifted_legendre, truncated_covariance, truncated_fbm
from .malliavin_lab import malliavin_scaling_fit, verify_interpolation
from .rde_solver import BlowUpError, solve
from .vf_dsl import CATALOG, ParseError, VectorFieldSystem, catalog

log = logging.getLogger("fbmlab")

SUITES = ("sample-fbm", "kl", "solve", "malliavin", "density", "concentration",
          "capacity", "lemma-le", "hitting", "a1a2")
COMMANDS = SUITES + ("verify-all",)
THEORY = {"solve", "malliavin", "density", "concentration", "hitting", "a1a2"}


class ConfigError(ValueError):
    pass


@dataclass
class SuiteResult:
    name: str
    seed: int
    checks: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# --------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc


def default_config_path(name: str = "default") -> Path:
    return Path(str(resources.files("fbmlab") / "configs" / f"{name}.toml"))


def _section(cfg: dict, name: str) -> dict:
    """Shared keys overlaid by the command's own section."""
    sec = dict(cfg.get("shared", {}))
    sec.update(cfg.get(name, {}))
    return sec


def _hurst_list(sec) -> list:
    H = sec.get("H")
    if H is None:
        raise ConfigError("H is required")
    return [float(h) for h in (H if isinstance(H, list) else [H])]


def validate(cfg: dict, command: str) -> None:
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if "seed" not in cfg:
        raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
    names = [s for s in SUITES if s in cfg] if command == "verify-all" else [command]
    if not names:
        raise ConfigError("verify-all found no suite sections in the config")
    for name in names:
        sec = _section(cfg, name)
        if name in ("capacity", "lemma-le"):
            continue
        for H in _hurst_list(sec):
            if not 0 < H < 1:
                raise ConfigError(f"[{name}] H must lie in (0, 1), got {H}")
            if name in THEORY and H <= 0.25:
                raise ConfigError(f"[{name}] H must exceed 1/4, got {H}")
        for key in ("systems", "system", "bound_only"):
            for s in np.atleast_1d(sec.get(key, [])):
                if isinstance(s, str) and s not in CATALOG:
                    raise ConfigError(f"[{name}] unknown system {s!r}")


def _system(spec) -> VectorFieldSystem:
    if isinstance(spec, str):
        return catalog(spec)
    try:
        return VectorFieldSystem.from_strings(spec["fields"], name=spec.get("name", "custom"))
    except ParseError as exc:
        raise ConfigError(f"bad vector field: {exc}") from exc


def _task_seed(seed: int, name: str) -> int:
    """Per-suite seed derived from the run seed and the suite name."""
    h = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(h[:4], "little")


# --------------------------------------------------------------------------
# output helpers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# suites


def suite_sample_fbm(sec, seed, out):
    res = SuiteResult("sample-fbm", seed)
    steps, paths = int(sec.get("steps", 16)), int(sec.get("paths", 20000))
    method, tol = sec.get("method", "cholesky"), float(sec.get("tol", 0.01))
    grid = TimeGrid.regular(1.0, steps)
    rows = []
    for H in _hurst_list(sec):
        chunks = rng.chunks(paths, 8192)
        parts = rng.pmap(lambda ab: sample_fbm(H, grid, 1, seed, method, ab[1] - ab[0], ab[0])
                         .values[:, 0], chunks)
        X = np.concatenate(parts)
        emp = X.T @ X / paths
        err = float(np.max(np.abs(emp - covariance_matrix(H, grid).entries)))
        inc = np.diff(X, axis=1)
        lag1 = float(np.mean([np.corrcoef(inc[:, k], inc[:, k + 1])[0, 1]
                              for k in range(steps - 1)]))
        rows.append((H, method, steps, paths, err, lag1))
        res.checks[f"covariance_H{H}"] = err <= tol
        if H == 0.5:
            res.checks["lag1_H0.5"] = abs(lag1) <= tol
    write_rows(out / "sample_fbm.csv", ("H", "method", "steps", "paths", "max_cov_err", "lag1_rho"),
               rows)
    res.artifacts.append("sample_fbm.csv")
    return res


def suite_kl(sec, seed, out):
    res = SuiteResult("kl", seed)
    H = _hurst_list(sec)[0]
    order, gram_order = int(sec.get("order", 50)), int(sec.get("gram_order", 12))
    paths, quad = int(sec.get("paths", 20000)), int(sec.get("quad_steps", 512))
    x, w = np.polynomial.legendre.leggauss(64)
    t, w = 0.5 * (x + 1), 0.5 * w
    L = shifted_legendre(gram_order, t)
    gram_dev = float(np.max(np.abs((L * w) @ L.T - np.eye(gram_order))))
    basis = build_basis(order, H, quad)
    grid = TimeGrid.regular(1.0, 8)
    fine = TimeGrid(np.linspace(0, 1, quad + 1))
    idx = [fine.index_of(s) for s in grid.points]
    parts = rng.pmap(lambda ab: truncated_fbm(basis, fine, 1, seed, ab[1] - ab[0], ab[0])
                     .values[:, 0][:, idx], rng.chunks(paths, 4096))
    X = np.concatenate(parts)
    R = covariance_matrix(H, grid).entries
    mc = float(np.max(np.abs(X.T @ X / paths - R)))
    exact = float(np.max(np.abs(truncated_covariance(basis, grid.points) - R)))
    write_rows(out / "kl.csv", ("H", "order", "gram_order", "gram_dev", "mc_cov_err",
                                "exact_cov_err", "paths"),
               [(H, order, gram_order, gram_dev, mc, exact, paths)])
    res.artifacts.append("kl.csv")
    res.checks["gram"] = gram_dev <= 1e-10
    res.checks["covariance"] = mc <= float(sec.get("tol", 0.02))
    return res


def suite_solve(sec, seed, out):
    """Geometric closed form X = exp(sigma B) with every scheme valid at H."""
    res = SuiteResult("solve", seed)
    steps = int(sec.get("steps", 4096))
    sigma = float(sec.get("sigma", 0.3))
    m = int(sec.get("refinement", 16))
    vf = VectorFieldSystem.from_strings({"V1": [f"{sigma!r}*x1"]}, name="geometric")
    grid = TimeGrid.regular(1.0, steps)
    rows = []
    for H in _hurst_list(sec):
        schemes = ["milstein2", "wong_zakai_fine"] if H > 1 / 3 else ["wong_zakai_fine"]
        for scheme in schemes:
            k = m if scheme == "wong_zakai_fine" else 1
            drv = sample_fbm(H, grid.refine(k), 1, seed, "circulant")
            sol = solve(vf, drv, [1.0], scheme, k)
            exact = np.exp(sigma * drv.values[0, ::k])
            err = float(np.max(np.abs(sol.X[:, 0] / exact - 1)))
            rows.append((H, scheme, steps, sigma, err))
            res.checks[f"geometric_{scheme}_H{H}"] = err <= float(sec.get("tol", 1e-3))
            sol.write_csv(out / f"solve_{scheme}_H{H}.csv")
            res.artifacts.append(f"solve_{scheme}_H{H}.csv")
    write_rows(out / "solve.csv", ("H", "scheme", "steps", "sigma", "max_rel_err"), rows)
    res.artifacts.append("solve.csv")
    return res


def suite_malliavin(sec, seed, out):
    res = SuiteResult("malliavin", seed)
    rows = []
    for name in sec.get("systems", ["sine1d"]):
        vf = catalog(name)
        for H in _hurst_list(sec):
            fit = malliavin_scaling_fit(vf, H, paths=int(sec.get("paths", 1000)), seed=seed,
                                        steps=int(sec.get("steps", 512)))
            d = fit.diagnostics
            for t, lm in zip(d["times"], d["median_lambda_min"]):
                rows.append((name, H, t, lm, fit.fitted["slope"], fit.passed))
            res.checks[f"{name}_H{H}"] = fit.passed
            res.summary[f"{name}_H{H}"] = fit.to_dict()
    for H in sec.get("interpolation_H", []):
        rep = verify_interpolation(H, float(sec.get("gamma", 0.6)))
        res.checks[f"interpolation_H{H}"] = rep.passed
        res.summary[f"interpolation_H{H}"] = {"violations": len(rep.violations),
                                               "constants": rep.implied_constants()}
    write_rows(out / "malliavin.csv", ("system", "H", "t", "median_lambda_min", "slope", "pass"),
               rows)
    res.artifacts.append("malliavin.csv")
    return res


def suite_density(sec, seed, out):
    """``systems`` are held to every fit band; ``bound_only`` systems only to
    the satisfiability of the inequality with fitted constants."""
    res = SuiteResult("density", seed)
    rows = []
    jobs = [(s, False) for s in sec.get("systems", ["constant1d"])]
    jobs += [(s, True) for s in sec.get("bound_only", [])]
    for name, bound_only in jobs:
        vf = catalog(name)
        for H in _hurst_list(sec):
            fit = dl.verify_density_upper_bound(vf, H, np.zeros(vf.n),
                                                paths=int(sec.get("paths", 10**5)),
                                                seed=seed, steps=int(sec.get("steps", 256)))
            for e in fit.estimates:
                for y, p, s in zip(e.points, e.values, e.stderr):
                    rows.append((name, H, e.t, *y, p, s))
            ok = fit.checks["bound_satisfiable"] if bound_only else fit.passed
            res.checks[f"{name}_H{H}"] = bool(ok)
            res.summary[f"{name}_H{H}"] = fit.to_dict()
            if sec.get("positivity", False):
                pos = dl.verify_positivity(vf, H, np.zeros(vf.n),
                                           paths=int(sec.get("paths", 10**5)), seed=seed,
                                           steps=int(sec.get("steps", 256)))
                res.checks[f"positivity_{name}_H{H}"] = pos.passed
                res.summary[f"positivity_{name}_H{H}"] = pos.to_dict()
    write_rows(out / "density.csv", ("system", "H", "t", "y", "p_hat", "stderr"), rows)
    res.artifacts.append("density.csv")
    return res


def suite_concentration(sec, seed, out):
    res = SuiteResult("concentration", seed)
    rows = []
    for name in sec.get("systems", ["sine1d"]):
        vf = catalog(name)
        for H in _hurst_list(sec):
            times = 2.0 ** -np.arange(6, -1, -1)
            sups = dl.running_sup(vf, H, np.zeros(vf.n), times, int(sec.get("paths", 10**5)),
                                  seed, int(sec.get("steps", 1024)))
            fit = dl.verify_concentration(vf, H, np.zeros(vf.n), times=times, sups=sups)
            for xi, t, p, c in dl.tail_table(sups, times):
                rows.append((name, H, t, xi, p, int(c)))
            res.checks[f"{name}_H{H}"] = fit.passed
            res.summary[f"{name}_H{H}"] = fit.to_dict()
    write_rows(out / "concentration.csv", ("system", "H", "t", "xi", "p_exceed", "count"), rows)
    res.artifacts.append("concentration.csv")
    return res


def suite_capacity(sec, seed, out):
    res = SuiteResult("capacity", seed)
    rows, logs = [], {}
    for i, job in enumerate(sec.get("jobs", [])):
        A = pt.CompactSet.from_config(job["set"])
        alpha = float(job["alpha"])
        est = pt.capacity(A, alpha, k=int(job.get("k", 128)), tol=float(job.get("tol", 1e-2)))
        rows.append((i, job["set"]["kind"], alpha, est.capacity, est.energy_min, est.status, est.N0))
        logs[f"job{i}"] = est.to_dict()
        expect = job.get("expect")
        if expect is not None:
            res.checks[f"job{i}"] = math.isclose(est.capacity, float(expect), abs_tol=1e-12)
        elif "brute_force_k" in job:
            pts, h = A.mesh(int(job["brute_force_k"]))
            ref = pt.brute_force_capacity(pts, alpha, est.N0, h / 2)
            logs[f"job{i}"]["brute_force"] = ref
            res.checks[f"job{i}"] = abs(est.capacity / ref - 1) <= float(job.get("rel_tol", 0.05))
        else:
            res.checks[f"job{i}"] = est.status != "inconclusive"
    write_rows(out / "capacity.csv", ("job", "kind", "alpha", "capacity", "energy_min", "status",
                                      "N0"), rows)
    write_json(out / "capacity.json", logs)
    res.artifacts += ["capacity.csv", "capacity.json"]
    return res


def suite_lemma(sec, seed, out):
    res = SuiteResult("lemma-le", seed)
    rows = []
    for i, job in enumerate(sec.get("jobs", [])):
        rep = pt.verify_lemma_le(job.get("a", 0.1), job.get("b", 1.0), job["beta"], job["H"],
                                 job["p"], job.get("N", 1.0))
        for r, lhs, k, q in zip(rep.r, rep.lhs, rep.kernel, rep.ratio):
            rows.append((i, rep.beta, rep.hurst, rep.alpha, r, lhs, k, q))
        res.checks[f"job{i}"] = rep.passed
        res.summary[f"job{i}"] = {k: v for k, v in rep.to_dict().items() if k not in ("r", "ratio")}
    write_rows(out / "lemma_le.csv", ("job", "beta", "H", "alpha", "r", "lhs", "kernel", "ratio"),
               rows)
    res.artifacts.append("lemma_le.csv")
    return res


def suite_hitting(sec, seed, out):
    res = SuiteResult("hitting", seed)
    vf = _system(sec.get("system", "constant3d"))
    H = _hurst_list(sec)[0]
    x0 = tuple(float(v) for v in sec.get("x0", [0.0] * vf.n))
    center = sec.get("center", [0.5] + [0.0] * (vf.n - 1))
    exp = hl.HittingExperiment(vf, H, x0, float(sec.get("a", 1 / 64)), float(sec.get("b", 1.0)),
                               pt.CompactSet.ball(center, 0.1), int(sec.get("paths", 10000)),
                               int(sec.get("steps", 4096)), seed=seed,
                               max_steps=sec.get("max_steps"))
    rep = hl.capacity_sandwich(exp, float(sec.get("eta", 0.05)), sec.get("radii", [0.05, 0.1, 0.2]),
                               factor=float(sec.get("factor", 4.0)))
    write_rows(out / "hitting.csv", *_split(list(rep.csv_rows())))
    res.artifacts.append("hitting.csv")
    res.checks["sandwich"] = rep.passed
    res.checks["refinement"] = all(r.refinement_ok for r in rep.results)
    res.summary = rep.to_dict()
    return res


def _split(rows):
    return rows[0], rows[1:]


def suite_a1a2(sec, seed, out):
    res = SuiteResult("a1a2", seed)
    H = _hurst_list(sec)[0]
    a, b, M = float(sec.get("a", 0.5)), float(sec.get("b", 1.0)), float(sec.get("M", 1.0))
    paths, steps = int(sec.get("paths", 10**5)), int(sec.get("steps", 256))
    rows = []
    for name in sec.get("systems", ["constant1d", "sine1d"]):
        vf = catalog(name)
        x0 = np.zeros(vf.n)
        a1 = hl.check_A1(vf, H, x0, a, b, M, paths=paths, seed=seed, steps=steps)
        a2 = hl.check_A2(vf, H, x0, a, b, M, paths=paths, seed=seed, steps=steps)
        for z, v, s in zip(a1.z, a1.values, a1.stderr):
            rows.append((name, "A1", *z, v, s))
        for (s_, t_), c in zip(a2.pairs, a2.c_pairs):
            rows.append((name, "A2", t_ - s_, c, ""))
        res.checks[f"A1_{name}"] = a1.passed
        res.checks[f"A2_{name}"] = a2.passed
        res.summary[name] = {"A1": {"minimum": a1.minimum, "passed": a1.passed},
                             "A2": {k: v for k, v in a2.to_dict().items()}}
        if name.startswith("constant") and vf.n == 1:
            exact = hl.check_A2(vf, H, x0, a, b, M, density=lambda s, t, z1, z2:
                                hl.gaussian_pair_density(H, x0, s, t, z1, z2))
            res.checks[f"A2_{name}_closed_form"] = exact.passed
    write_rows(out / "a1a2.csv", ("system", "condition", "z_or_gap", "value", "stderr"), rows)
    res.artifacts.append("a1a2.csv")
    return res


RUNNERS = {"sample-fbm": suite_sample_fbm, "kl": suite_kl, "solve": suite_solve,
           "malliavin": suite_malliavin, "density": suite_density,
           "concentration": suite_concentration, "capacity": suite_capacity,
           "lemma-le": suite_lemma, "hitting": suite_hitting, "a1a2": suite_a1a2}


# --------------------------------------------------------------------------
# orchestration


def run(cfg: dict, command: str, out: Path, config_bytes: bytes = b"") -> dict:
    """Execute ``command`` and return the manifest (also written to ``out``)."""
    validate(cfg, command)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    names = [s for s in SUITES if s in cfg] if command == "verify-all" else [command]
    manifest = {"version": __version__, "command": command,
                "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
                "seed": seed, "tasks": {}, "wall_clock": {}}
    summary = {}
    for name in names:
        tseed = _task_seed(seed, name)
        t0 = time.perf_counter()
        log.info("running %s (seed %d)", name, tseed)
        try:
            res = RUNNERS[name](_section(cfg, name), tseed, out)
        except BlowUpError as exc:
            exc.task = name
            raise
        manifest["wall_clock"][name] = time.perf_counter() - t0
        manifest["tasks"][name] = {"seed": tseed, "checks": res.checks, "passed": res.passed,
                                   "artifacts": res.artifacts}
        summary[name] = {"checks": res.checks, "passed": res.passed, "details": res.summary}
    manifest["passed"] = all(t["passed"] for t in manifest["tasks"].values())
    write_json(out / "summary.json", summary)
    write_json(out / "manifest.json", manifest)
    return manifest


def _check_table(manifest) -> str:
    lines = []
    for name, task in manifest["tasks"].items():
        for check, ok in task["checks"].items():
            lines.append(f"{'PASS' if ok else 'FAIL'}  {name}:{check}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fbmlab", description=__doc__.split("\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=None, help="TOML config (default: shipped default.toml)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="worker threads (fallback: FBMLAB_WORKERS)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    path = Path(args.config) if args.config else default_config_path()
    try:
        cfg = load_config(path)
        raw = path.read_bytes()
        if args.seed is not None:
            cfg["seed"] = args.seed
            raw += f"\nseed-override={args.seed}".encode()
        out = Path(args.out or cfg.get("out", "fbmlab-out"))
        rng.set_workers(args.workers)
        manifest = run(cfg, args.command, out, raw)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except BlowUpError as exc:
        print(f"numerical blow-up in task {getattr(exc, 'task', '?')} at step {exc.step}: {exc}",
              file=sys.stderr)
        return 3
    finally:
        rng.set_workers(None)
    print(_check_table(manifest))
    return 0 if manifest["passed"] else 1


if __name__ == "__main__":
    sys.exit(main())
