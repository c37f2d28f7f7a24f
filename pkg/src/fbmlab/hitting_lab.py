"""Monte-Carlo hitting probabilities of compact sets on a time window, the
two-sided comparison with capacities and checks of the density conditions
(A1) and (A2) used for hitting estimates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .bounds import BoundFit
from .density_lab import estimate_density, product_grid, sample_states
from .fbm_core import DomainError, TimeGrid, _h, covariance
from .potential_theory import CompactSet, capacity
from .rde_solver import simulate
from .vf_dsl import VectorFieldSystem, estimate_ellipticity


# --------------------------------------------------------------------------
# segment / set intersection


def segments_hit(target: CompactSet, P0: np.ndarray, P1: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Whether each segment [P0, P1] (arrays (..., n)) meets the target."""
    if target.kind == "union":
        out = np.zeros(P0.shape[:-1], dtype=bool)
        for part in target.parts:
            out |= segments_hit(part, P0, P1, tol)
        return out
    D = P1 - P0
    if target.kind == "ball" or (target.kind == "point" and P0.shape[-1] > 1):
        c = np.array(target.a)
        r = target.radius if target.kind == "ball" else 0.0
        dd = np.sum(D * D, axis=-1)
        tau = np.where(dd > 0, np.sum((c - P0) * D, axis=-1) / np.where(dd > 0, dd, 1.0), 0.0)
        closest = P0 + np.clip(tau, 0.0, 1.0)[..., None] * D
        return np.linalg.norm(closest - c, axis=-1) <= r + tol
    lo, hi = target.bbox()
    # slab test (Liang-Barsky) on the parametrisation P0 + tau D, tau in [0, 1]
    tmin = np.zeros(P0.shape[:-1])
    tmax = np.ones(P0.shape[:-1])
    inside = np.ones(P0.shape[:-1], dtype=bool)
    for i in range(P0.shape[-1]):
        d, p = D[..., i], P0[..., i]
        flat = np.abs(d) <= 1e-300
        inside &= ~flat | ((p >= lo[i] - tol) & (p <= hi[i] + tol))
        safe = np.where(flat, 1.0, d)
        t1 = (lo[i] - tol - p) / safe
        t2 = (hi[i] + tol - p) / safe
        tmin = np.where(flat, tmin, np.maximum(tmin, np.minimum(t1, t2)))
        tmax = np.where(flat, tmax, np.minimum(tmax, np.maximum(t1, t2)))
    return inside & (tmin <= tmax)


def polyline_hits(target: CompactSet, X: np.ndarray) -> np.ndarray:
    """X (P, N, n) polylines; True where some segment meets the target."""
    if X.shape[1] == 1:
        return target.contains(X[:, 0])
    return segments_hit(target, X[:, :-1], X[:, 1:]).any(axis=1)


def _window(grid: TimeGrid, X: np.ndarray, a: float, b: float) -> np.ndarray:
    """Restrict polylines to [a, b], linearly interpolating the end points."""
    t = grid.points
    inner = np.flatnonzero((t > a) & (t < b))

    def at(s):
        k = int(np.clip(np.searchsorted(t, s), 1, t.size - 1))
        w = (s - t[k - 1]) / (t[k] - t[k - 1])
        return (1 - w) * X[:, k - 1] + w * X[:, k]

    return np.concatenate([at(a)[:, None], X[:, inner], at(b)[:, None]], axis=1)


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True, eq=False)
class HittingExperiment:
    vf: VectorFieldSystem
    H: float
    x0: tuple
    a: float
    b: float
    target: CompactSet
    paths: int = 10000
    steps: int = 1024
    scheme: str | None = None
    seed: int = 0
    method: str = "circulant"
    max_steps: int | None = None  # doubling cap for the refinement loop, 4*steps if unset

    def __post_init__(self):
        if not 0 < self.a < self.b <= 1:
            raise DomainError(f"need 0 < a < b <= 1, got [{self.a}, {self.b}]")
        if len(self.x0) != self.vf.n or self.target.dim != self.vf.n:
            raise DomainError("dimension mismatch between x0, target and system")
        _h(self.H)

    @property
    def M(self) -> float:
        return self.target.bound()

    def with_target(self, target: CompactSet) -> "HittingExperiment":
        return HittingExperiment(self.vf, self.H, self.x0, self.a, self.b, target, self.paths,
                                 self.steps, self.scheme, self.seed, self.method, self.max_steps)


@dataclass
class HittingResult:
    p_hit: float
    stderr: float
    hits: int
    paths: int
    p_coarse: float  # same paths, every other grid point
    gap_stderr: float  # stderr of the paired difference
    cap_lower: float | None = None
    cap_upper: float | None = None
    cap_status: tuple = ()
    notes: list = field(default_factory=list)
    steps: int | None = None  # grid size the estimate was taken on

    @property
    def refinement_gap(self) -> float:
        return self.p_hit - self.p_coarse

    @property
    def refinement_ok(self) -> bool:
        return abs(self.refinement_gap) <= 2 * self.stderr

    @property
    def ratios(self) -> dict:
        out = {}
        if self.cap_lower:
            out["p/cap_lower"] = self.p_hit / self.cap_lower
        if self.cap_upper:
            out["p/cap_upper"] = self.p_hit / self.cap_upper
        return out

    def to_dict(self) -> dict:
        return {"p_hit": self.p_hit, "stderr": self.stderr, "hits": self.hits,
                "paths": self.paths, "p_coarse": self.p_coarse,
                "refinement_gap": self.refinement_gap, "refinement_ok": self.refinement_ok,
                "cap_lower": self.cap_lower, "cap_upper": self.cap_upper,
                "cap_status": list(self.cap_status), "ratios": self.ratios, "notes": self.notes,
                "steps": self.steps}


def _scheme(H, scheme):
    if scheme is not None:
        return scheme
    return "milstein2" if H > 1 / 3 else "wong_zakai_fine"


def hit_indicators(exp: HittingExperiment, targets, steps: int | None = None
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Boolean arrays (P, len(targets)) for the full and the every-other-point
    polylines of the same simulated paths."""
    H = _h(exp.H)
    grid = TimeGrid.regular(1.0, exp.steps if steps is None else steps)
    targets = list(targets)
    half = TimeGrid(grid.points[::2])

    def red(sol):
        fine = _window(grid, sol.X, exp.a, exp.b)
        coarse = _window(half, sol.X[:, ::2], exp.a, exp.b)
        f = np.stack([polyline_hits(A, fine) for A in targets], axis=-1)
        c = np.stack([polyline_hits(A, coarse) for A in targets], axis=-1)
        return np.stack([f, c], axis=1)

    out = simulate(exp.vf, H, grid, np.asarray(exp.x0, float), exp.paths, exp.seed,
                   _scheme(H, exp.scheme), exp.method, reducer=red, chunk=1024)
    return out[:, 0], out[:, 1]


def _result(fine, coarse, notes, steps=None):
    P = fine.size
    p = float(fine.mean())
    pc = float(coarse.mean())
    diff = fine.astype(float) - coarse
    return HittingResult(p, math.sqrt(max(p * (1 - p), 0.0) / P), int(fine.sum()), P, pc,
                         float(diff.std(ddof=1) / math.sqrt(P)) if P > 1 else float("nan"),
                         notes=list(notes), steps=steps)


def refined_results(exp: HittingExperiment, targets, notes=()) -> list:
    """Hit results per target, doubling the grid until every refinement gap
    is within 2 stderr or ``exp.max_steps`` is reached.

    Each pass draws fresh paths on the finer grid, so the reported estimate
    and its gap always come from the same simulation.
    """
    targets = list(targets)
    cap = exp.max_steps if exp.max_steps is not None else 4 * exp.steps
    steps, log = exp.steps, []
    while True:
        fine, coarse = hit_indicators(exp, targets, steps)
        res = [_result(fine[:, j], coarse[:, j], notes, steps) for j in range(len(targets))]
        bad = [j for j, r in enumerate(res) if not r.refinement_ok]
        if not bad or 2 * steps > cap:
            break
        log.append(f"refinement gap above 2 stderr at {steps} steps for target(s) {bad}; "
                   f"doubled to {2 * steps}")
        steps *= 2
    if bad:
        log.append(f"refinement gap still above 2 stderr at {steps} steps (cap {cap})")
    for r in res:
        r.notes.extend(log)
    return res


def hit_probability(exp: HittingExperiment, eta: float = 0.05, with_capacity: bool = True,
                    min_hits: int = 1, cap_kwargs: dict | None = None) -> HittingResult:
    """Fraction of polylines X([a, b]) meeting the target, with binomial
    stderr, the paired refinement gap and the capacities Cap_{n-1/H} and
    Cap_{n-1/H-eta} of the target."""
    res = refined_results(exp, [exp.target])[0]
    if res.hits < min_hits:
        res.notes.append(f"only {res.hits} hits in {exp.paths} paths: "
                         "widen the target or add paths")
    if with_capacity:
        n, H = exp.vf.n, _h(exp.H)
        lo = capacity(exp.target, n - 1 / H, **(cap_kwargs or {}))
        hi = capacity(exp.target, n - 1 / H - eta, **(cap_kwargs or {}))
        res.cap_lower, res.cap_upper = lo.capacity, hi.capacity
        res.cap_status = (lo.status, hi.status)
    return res


def brownian_ball_hit(r: float, dist: float, t: float) -> float:
    """P(3-d Brownian motion started at distance ``dist`` from the centre of a
    ball of radius r reaches the ball by time t)."""
    if dist <= r:
        return 1.0
    return r / dist * math.erfc((dist - r) / math.sqrt(2 * t))


# --------------------------------------------------------------------------
# capacity sandwich


@dataclass
class SandwichReport:
    radii: list
    results: list  # HittingResult per radius
    c5: float
    c6: float
    spread: float
    factor: float
    status: list

    @property
    def passed(self) -> bool:
        ok = all(s in ("converged", "exact") for pair in self.status for s in pair)
        return bool(ok and self.c5 > 0 and self.spread < self.factor)

    def to_dict(self) -> dict:
        return {"radii": self.radii, "c5": self.c5, "c6": self.c6, "spread": self.spread,
                "factor": self.factor, "passed": self.passed,
                "results": [r.to_dict() for r in self.results]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=float)

    def csv_rows(self):
        yield ("radius", "p_hit", "stderr", "cap_lower", "cap_upper", "p_over_cap_lower",
               "p_over_cap_upper")
        for r, res in zip(self.radii, self.results):
            yield (r, res.p_hit, res.stderr, res.cap_lower, res.cap_upper,
                   res.ratios.get("p/cap_lower"), res.ratios.get("p/cap_upper"))


def _band(radii, results, factor):
    lo = np.array([r.p_hit / r.cap_lower if r.cap_lower else np.inf for r in results])
    hi = np.array([r.p_hit / r.cap_upper if r.cap_upper else np.inf for r in results])
    c5, c6 = float(lo.min()), float(hi.max())
    # both constants must work for every radius at once: the spread is the
    # largest max/min ratio of p/Cap over the radii, for either index
    spread = float(max(lo.max() / lo.min(), hi.max() / hi.min())) if c5 > 0 else np.inf
    return SandwichReport(list(radii), results, c5, c6, spread, factor,
                          [r.cap_status for r in results])


def capacity_sandwich(exp: HittingExperiment, eta: float = 0.05, radii=(0.05, 0.1, 0.2),
                      center=None, factor: float = 4.0, cap_kwargs: dict | None = None
                      ) -> SandwichReport:
    """c5 Cap_{n-1/H}(B_r) <= p_hat(B_r) <= c6 Cap_{n-1/H-eta}(B_r) across radii.

    The balls share one set of simulated paths. c5 and c6 are the smallest
    and largest ratios; the report passes when c5 > 0 and the spread of each
    ratio over the radii stays below ``factor``.
    """
    center = exp.target.a if center is None else center
    targets = [CompactSet.ball(center, r) for r in radii]
    n, H = exp.vf.n, _h(exp.H)
    results = []
    for A, res in zip(targets, refined_results(exp, targets)):
        lo = capacity(A, n - 1 / H, **(cap_kwargs or {}))
        hi = capacity(A, n - 1 / H - eta, **(cap_kwargs or {}))
        res.cap_lower, res.cap_upper = lo.capacity, hi.capacity
        res.cap_status = (lo.status, hi.status)
        results.append(res)
    return _band(radii, results, factor)


# --------------------------------------------------------------------------
# (A1) and (A2)


@dataclass
class A1Report:
    z: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    times: np.ndarray
    vacuous: bool = False

    @property
    def minimum(self) -> float:
        return float(self.values.min()) if self.values.size else float("nan")

    @property
    def passed(self) -> bool:
        if self.vacuous:
            return True
        return bool(np.all(self.values - 3 * self.stderr > 0))

    def to_dict(self) -> dict:
        return {"minimum": self.minimum, "passed": self.passed, "vacuous": self.vacuous,
                "z": self.z.tolist(), "values": self.values.tolist(),
                "stderr": self.stderr.tolist(), "times": self.times.tolist()}


def _window_times(a, b, steps, nodes):
    grid = TimeGrid.regular(1.0, steps)
    idx = np.unique(np.round(np.linspace(a, b, nodes) * steps).astype(int))
    return grid.points[idx]


def check_A1(vf: VectorFieldSystem, H, x0, a: float, b: float, M: float = 1.0, z_grid=None,
             points: int = 21, nodes: int = 9, paths: int = 10**5, seed: int = 0,
             steps: int = 256, scheme: str | None = None, samples=None) -> A1Report:
    """int_a^b p_t(z) dt by trapezoid quadrature of KDE estimates on a grid of
    [-M, M]^n; each value must sit 3 stderr above 0. Time nodes are snapped to
    the simulation grid. The stderr adds the per-time stderrs (conservative
    for correlated times)."""
    H = _h(H)
    n = vf.n
    x0 = np.asarray(x0, float).reshape(n)
    if z_grid is None:
        z_grid = product_grid([np.linspace(-M, M, points)] * n)
    z = np.asarray(z_grid, float).reshape(-1, n)
    times = _window_times(a, b, steps, nodes)
    if z.size == 0:
        return A1Report(z, np.zeros(0), np.zeros(0), times, vacuous=True)
    if samples is None:
        samples = sample_states(vf, H, x0, times, paths, seed, steps, scheme)
    dens = [estimate_density(samples[:, j], z, t=t) for j, t in enumerate(times)]
    w = np.zeros(times.size)
    dt = np.diff(times)
    w[:-1] += dt / 2
    w[1:] += dt / 2
    vals = sum(wj * e.values for wj, e in zip(w, dens))
    se = sum(wj * e.stderr for wj, e in zip(w, dens))
    return A1Report(z, vals, se, times)


def gaussian_a1(H, x0, a: float, b: float, z) -> np.ndarray:
    """int_a^b of the density of x0 + B_t (independent components) at z."""
    H = _h(H)
    z = np.atleast_2d(np.asarray(z, float))
    x0 = np.asarray(x0, float).reshape(1, -1)
    n = z.shape[1]
    r2 = np.sum((z - x0) ** 2, axis=1)

    def one(r):
        f = lambda t: np.exp(-r / (2 * t ** (2 * H))) / (2 * np.pi * t ** (2 * H)) ** (n / 2)
        return integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-11)[0]

    return np.array([one(r) for r in r2])


def gaussian_pair_density(H, x0, s: float, t: float, z1, z2) -> np.ndarray:
    """Joint density of (x0 + B_s, x0 + B_t) at (z1, z2), independent components."""
    H = _h(H)
    z1, z2 = np.atleast_2d(z1), np.atleast_2d(z2)
    x0 = np.asarray(x0, float).reshape(1, -1)
    cov = np.array([[covariance(H, s, s), covariance(H, s, t)],
                    [covariance(H, s, t), covariance(H, t, t)]])
    mvn = stats.multivariate_normal(mean=[0.0, 0.0], cov=cov)
    out = np.ones(z1.shape[0])
    for i in range(z1.shape[1]):
        out *= mvn.pdf(np.stack([z1[:, i] - x0[0, i], z2[:, i] - x0[0, i]], axis=-1))
    return out


@dataclass
class A2Report:
    beta: float
    p: float
    pairs: list
    c_pairs: list  # smallest c making the envelope hold, per pair
    coverage: list  # fraction of far-separated grid points above the noise floor
    factor: float

    @property
    def c(self) -> float:
        return float(max(self.c_pairs))

    @property
    def spread(self) -> float:
        return float(max(self.c_pairs) / min(self.c_pairs))

    @property
    def passed(self) -> bool:
        c = np.array(self.c_pairs)
        return bool(self.p > self.beta and np.all(np.isfinite(c)) and np.all(c > 0)
                    and self.spread < self.factor)

    def to_dict(self) -> dict:
        return {"beta": self.beta, "p": self.p, "pairs": [list(p) for p in self.pairs],
                "c_pairs": self.c_pairs, "c": self.c, "spread": self.spread,
                "coverage": self.coverage, "passed": self.passed}


def check_A2(vf: VectorFieldSystem, H, x0, a: float, b: float, M: float = 1.0, pairs=None,
             beta: float | None = None, p: float | None = None, points: int = 41,
             paths: int = 10**5, seed: int = 0, steps: int = 256, scheme: str | None = None,
             density=None, factor: float = 10.0) -> A2Report:
    """Envelope p_{s,t}(z1, z2) <= c |t-s|^{-H beta} (|t-s|^H / |z2-z1| ^ 1)^p.

    For each pair the smallest c making the envelope hold on the grid of
    [-M, M]^{2n} (KDE points above the noise floor, or every point when an
    exact ``density(s, t, z1, z2)`` is given) is computed; the envelope is
    satisfiable when these c stay within ``factor`` of each other across pairs,
    i.e. the |t-s| scaling with beta = n is right.
    """
    H = _h(H)
    n = vf.n
    if n > 2:
        raise DomainError("the joint density is 2n-dimensional; n <= 2 only")
    beta = float(n) if beta is None else float(beta)
    p = beta + 1.0 if p is None else float(p)
    if not p > beta:
        raise DomainError("need p > beta")
    x0 = np.asarray(x0, float).reshape(n)
    grid = TimeGrid.regular(1.0, steps)
    if pairs is None:
        pairs = [(a, b), (a, (a + b) / 2), ((a + b) / 2, b), (b - (b - a) / 4, b)]
    pairs = [(float(s), float(t)) for s, t in pairs]
    for s, t in pairs:
        if not (a <= s < t <= b):
            raise DomainError(f"pair ({s}, {t}) outside the window [{a}, {b}]")
        if t - s < 2.0 / steps - 1e-12:
            raise DomainError("pairs need |t - s| >= 2 grid steps")
    per_axis = points if n == 1 else max(9, int(round(points ** 0.5)))
    zz = product_grid([np.linspace(-M, M, per_axis)] * (2 * n))
    z1, z2 = zz[:, :n], zz[:, n:]
    sep = np.linalg.norm(z2 - z1, axis=1)

    if density is None:
        times = sorted({tt for pr in pairs for tt in pr})
        idx = [grid.index_of(tt) for tt in times]
        samples = sample_states(vf, H, x0, grid.points[idx], paths, seed, steps, scheme)
        col = {tt: j for j, tt in enumerate(times)}

    c_pairs, coverage = [], []
    for s, t in pairs:
        gap = t - s
        env = gap ** (-H * beta) * np.minimum(gap ** H / np.maximum(sep, 1e-300), 1.0) ** p
        far = sep >= gap ** H
        if density is None:
            joint = np.concatenate([samples[:, col[s]], samples[:, col[t]]], axis=1)
            est = estimate_density(joint, zz, t=t)
            keep = est.above_floor
            vals = est.values
        else:
            vals = np.asarray(density(s, t, z1, z2), float)
            keep = np.ones(vals.size, dtype=bool)
        coverage.append(float(keep[far].mean()) if far.any() else 1.0)
        c_pairs.append(float(np.max(vals[keep] / env[keep])) if keep.any() else float("nan"))
    return A2Report(beta, p, pairs, c_pairs, coverage, factor)


def a1a2_fit(a1: A1Report, a2: A2Report) -> BoundFit:
    return BoundFit("conditions_A1_A2", targets={}, fitted={"A1_min": a1.minimum, "A2_c": a2.c},
                    band={}, checks={"A1": a1.passed, "A2": a2.passed},
                    diagnostics={"A1": a1.to_dict(), "A2": a2.to_dict()})
