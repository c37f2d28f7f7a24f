"""Pathwise solvers for dX = V_0(X) dt + sum_j V_j(X) dB^j driven by fBm,
with the Jacobian of the flow, path-roughness diagnostics and the
deterministic skeleton ODE.

Batched throughout: the state has shape (paths, n) inside the loops.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from . import rng
from .fbm_core import DomainError, FbmPath, TimeGrid, _h, sample_fbm
from .vf_dsl import EvaluationError, VectorFieldSystem

SCHEMES = ("euler", "milstein2", "wong_zakai_fine")
BLOWUP = 1e8


class BlowUpError(ArithmeticError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} (step {step})")


@dataclass(frozen=True, eq=False)
class SolutionPath:
    """X has shape (N+1, n), or (P, N+1, n) for a batch; J and Jinv add (n, n)."""

    grid: TimeGrid
    x0: np.ndarray
    X: np.ndarray
    J: np.ndarray | None = None
    Jinv: np.ndarray | None = None
    driver_seed: int = 0
    scheme: str = "euler"
    start: int = 0
    warnings: tuple = field(default_factory=tuple)
    hurst: float | None = None

    @property
    def batched(self) -> bool:
        return self.X.ndim == 3

    @property
    def n(self) -> int:
        return self.X.shape[-1]

    def path(self, i: int) -> "SolutionPath":
        pick = lambda a: None if a is None else a[i]
        return SolutionPath(self.grid, self.x0, self.X[i], pick(self.J), pick(self.Jinv),
                            self.driver_seed, self.scheme, self.start + i, self.warnings,
                            self.hurst)

    def jacobian_between(self, s: int, t: int) -> np.ndarray:
        """J_{s,t} = J_t J_s^{-1}."""
        if self.J is None:
            raise ValueError("solution was computed without Jacobians")
        return self.J[..., t, :, :] @ self.Jinv[..., s, :, :]

    def write_csv(self, path) -> None:
        if self.batched:
            raise ValueError("write one path at a time")
        n = self.n
        head = ["t"] + [f"X{i + 1}" for i in range(n)]
        if self.J is not None:
            head += [f"J{a + 1}{b + 1}" for a in range(n) for b in range(n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(head)
            for k, t in enumerate(self.grid.points):
                row = [t] + list(self.X[k])
                if self.J is not None:
                    row += list(self.J[k].ravel())
                w.writerow([repr(float(v)) for v in row])


def _check(X, k):
    if not np.all(np.isfinite(X)):
        raise BlowUpError("non-finite state", k)
    if np.max(np.abs(X), initial=0.0) > BLOWUP:
        raise BlowUpError(f"state exceeded {BLOWUP:g}", k)


def _flow_exp(M):
    """exp(M) for a stack of square matrices."""
    if M.shape[-1] == 1:
        return np.exp(M)
    return linalg.expm(M)


def _linear_coeff(vf, x, dt, db):
    """DV_0(x) dt + sum_j DV_j(x) dB^j, shape (P, n, n)."""
    M = vf.jacobian_field(0, x) * dt if vf.has_drift else 0.0
    for j in range(1, vf.d + 1):
        M = M + vf.jacobian_field(j, x) * db[:, j - 1, None, None]
    return M


def _step(vf, scheme, x, dt, db):
    if scheme == "wong_zakai_fine":
        def f(y):
            out = vf.diffusion(y) @ db[..., None]
            out = out[..., 0]
            return out + vf.eval_field(0, y) * dt if vf.has_drift else out
        k1 = f(x)
        k2 = f(x + 0.5 * k1)
        k3 = f(x + 0.5 * k2)
        k4 = f(x + k3)
        return x + (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    v = vf.diffusion(x)
    w = (v @ db[..., None])[..., 0]
    new = x + w
    if vf.has_drift:
        new = new + vf.eval_field(0, x) * dt
    if scheme == "milstein2":
        # 1/2 sum_ij DV_j V_i dB^i dB^j = 1/2 sum_j dB^j DV_j (V dB)
        corr = 0.0
        for j in range(1, vf.d + 1):
            corr = corr + db[:, j - 1, None] * (vf.jacobian_field(j, x) @ w[..., None])[..., 0]
        new = new + 0.5 * corr
    return new


def _scheme_notes(scheme: str, H: float, m: int) -> list[str]:
    notes = []
    if scheme not in SCHEMES:
        raise DomainError(f"unknown scheme {scheme!r}")
    if scheme == "milstein2" and H <= 1.0 / 3.0:
        raise DomainError("milstein2 needs H > 1/3; use wong_zakai_fine")
    if scheme == "euler" and H <= 0.5:
        notes.append(f"euler is not a consistent scheme for H = {H} <= 1/2")
    if scheme == "wong_zakai_fine" and H <= 1.0 / 3.0 and m < 16:
        notes.append("wong_zakai_fine below H = 1/3 should use refinement >= 16")
    return notes


def solve(vf: VectorFieldSystem, driver: FbmPath, x0, scheme: str = "milstein2",
          refinement: int = 1, jacobian: bool = False) -> SolutionPath:
    """Integrate along ``driver``.

    For ``wong_zakai_fine`` the driver is the fine path; the result is
    reported on every ``refinement``-th driver point. Other schemes use the
    driver grid as is.
    """
    if driver.d != vf.d:
        raise DomainError(f"driver has d = {driver.d} but the system needs d = {vf.d}")
    m = int(refinement) if scheme == "wong_zakai_fine" else 1
    notes = _scheme_notes(scheme, driver.hurst, m) + list(vf.warnings)
    vals = driver.values if driver.batched else driver.values[None]
    P, d, N = vals.shape[0], vals.shape[1], vals.shape[2] - 1
    if N % m:
        raise DomainError(f"{N} driver steps not divisible by refinement {m}")
    x0 = np.asarray(x0, dtype=float).reshape(vf.n)
    pts = driver.grid.points
    dts = np.diff(pts)
    dB = np.diff(vals, axis=-1)
    out_n = N // m
    X = np.empty((P, out_n + 1, vf.n))
    X[:, 0] = x0
    x = np.broadcast_to(x0, (P, vf.n)).copy()
    if jacobian:
        J = np.empty((P, out_n + 1, vf.n, vf.n))
        Ji = np.empty_like(J)
        J[:, 0] = Ji[:, 0] = np.eye(vf.n)
        jc = np.broadcast_to(np.eye(vf.n), (P, vf.n, vf.n)).copy()
        jic = jc.copy()
    try:
        for k in range(N):
            db = dB[:, :, k]
            x_new = _step(vf, scheme, x, dts[k], db)
            _check(x_new, k + 1)
            if jacobian:
                # frozen-coefficient exponential at the midpoint state keeps
                # J and Jinv exact inverses of each other
                E = _linear_coeff(vf, 0.5 * (x + x_new), dts[k], db)
                jc = _flow_exp(E) @ jc
                jic = jic @ _flow_exp(-E)
            x = x_new
            if (k + 1) % m == 0:
                X[:, (k + 1) // m] = x
                if jacobian:
                    J[:, (k + 1) // m] = jc
                    Ji[:, (k + 1) // m] = jic
    except EvaluationError as exc:
        raise BlowUpError(str(exc), k + 1) from exc
    grid = TimeGrid(pts[::m], driver.grid.uniform)
    if not driver.batched:
        X = X[0]
        if jacobian:
            J, Ji = J[0], Ji[0]
    if not jacobian:
        J = Ji = None
    return SolutionPath(grid, x0, X, J, Ji, driver.seed, scheme, driver.start, tuple(notes),
                        driver.hurst)


def solve_with_jacobian(vf, driver, x0, scheme="milstein2", refinement=1) -> SolutionPath:
    return solve(vf, driver, x0, scheme, refinement, jacobian=True)


def driver_grid(grid: TimeGrid, scheme: str, refinement: int) -> TimeGrid:
    return grid.refine(refinement) if scheme == "wong_zakai_fine" and refinement > 1 else grid


def simulate(vf: VectorFieldSystem, H, grid: TimeGrid, x0, paths: int, seed: int = 0,
             scheme: str = "milstein2", method: str = "cholesky", refinement: int = 1,
             jacobian: bool = False, reducer=None, chunk: int = 4096, workers=None):
    """Monte-Carlo solve over ``paths`` drivers, chunked across the worker pool.

    ``reducer(sol)`` maps each batched chunk to an array whose first axis is
    the path axis; the concatenation is returned. Without a reducer the full
    batched :class:`SolutionPath` is returned. Results do not depend on the
    chunk size or worker count.
    """
    H = _h(H)
    fine = driver_grid(grid, scheme, refinement)
    m = refinement if scheme == "wong_zakai_fine" else 1

    def run(ab):
        a, b = ab
        drv = sample_fbm(H, fine, vf.d, seed, method, b - a, a)
        sol = solve(vf, drv, x0, scheme, m, jacobian)
        return sol if reducer is None else reducer(sol)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        parts = rng.pmap(run, rng.chunks(int(paths), chunk), workers)
    if reducer is not None:
        return np.concatenate(parts, axis=0)
    cat = lambda name: None if getattr(parts[0], name) is None else \
        np.concatenate([getattr(p, name) for p in parts], axis=0)
    first = parts[0]
    return SolutionPath(first.grid, first.x0, cat("X"), cat("J"), cat("Jinv"),
                        int(seed), scheme, 0, first.warnings, H)


# --------------------------------------------------------------------------
# skeleton


def skeleton_driver(h_coeffs, basis, times) -> np.ndarray:
    """Rh(t) = sum_k c_k h_k(t) per driver component, shape (d, len(times))."""
    c = np.atleast_2d(np.asarray(h_coeffs, dtype=float))
    if c.shape[1] > basis.order:
        raise DomainError("more coefficients than basis functions")
    h = basis.h(times)[: c.shape[1]]
    return c @ h


def solve_skeleton(vf: VectorFieldSystem, h_coeffs, basis, x0, steps: int = 1024,
                   jacobian: bool = False) -> SolutionPath:
    """ODE dX = V_0 dt + V(X) d(Rh) on [0, 1] with RK4 along the tabulated
    control (piecewise linear between ``steps`` nodes)."""
    grid = TimeGrid.regular(1.0, steps)
    path = skeleton_driver(h_coeffs, basis, grid.points)
    if path.shape[0] != vf.d:
        raise DomainError(f"need {vf.d} coefficient rows, got {path.shape[0]}")
    drv = FbmPath(basis.hurst, grid, path, 0, "skeleton")
    sol = solve(vf, drv, x0, "wong_zakai_fine", 1, jacobian)
    return SolutionPath(sol.grid, sol.x0, sol.X, sol.J, sol.Jinv, 0, "skeleton",
                        0, sol.warnings, basis.hurst)


def shoot_skeleton(vf: VectorFieldSystem, basis, x0, target, steps: int = 1024,
                   tol: float = 1e-10, t: float = 1.0):
    """Find coefficients h with Phi(h)_t = target.

    One-dimensional systems shoot along the first basis direction by
    bracketing and bisection (Brent); otherwise the first coefficient of each
    driver component is fitted by least squares. Returns (coeffs, solution,
    miss) with miss = |Phi(h)_t - target|.
    """
    target = np.asarray(target, dtype=float).reshape(vf.n)
    k = TimeGrid.regular(1.0, steps).index_of(t)
    end = lambda c: solve_skeleton(vf, c, basis, x0, steps).X[k]
    if vf.n == 1 and vf.d == 1:
        g = lambda c: end([[c]])[0] - target[0]
        lo, hi = -1.0, 1.0
        glo, ghi = g(lo), g(hi)
        for _ in range(60):
            if glo * ghi <= 0:
                break
            lo, hi = 2 * lo, 2 * hi
            glo, ghi = g(lo), g(hi)
        else:
            raise DomainError("could not bracket the target")
        c = optimize.brentq(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps)
        coeffs = np.array([[c]])
    else:
        res = optimize.least_squares(lambda c: end(c.reshape(vf.d, 1)) - target,
                                     np.zeros(vf.d), xtol=tol, ftol=tol, gtol=tol)
        coeffs = res.x.reshape(vf.d, 1)
    sol = solve_skeleton(vf, coeffs, basis, x0, steps)
    return coeffs, sol, float(np.max(np.abs(sol.X[k] - target)))


# --------------------------------------------------------------------------
# roughness diagnostics


def _norms(path) -> np.ndarray:
    x = np.asarray(path, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def p_variation(path, p: float) -> float:
    """Exact p-variation over sub-partitions of the sample points (O(N^2))."""
    if p < 1:
        raise DomainError("p must be >= 1")
    x = _norms(path)
    n = x.shape[0]
    best = np.zeros(n)
    for j in range(1, n):
        inc = np.linalg.norm(x[j] - x[:j], axis=1) ** p
        best[j] = np.max(best[:j] + inc)
    return float(best[-1] ** (1.0 / p))


def greedy_partition_count(path, p: float, alpha: float) -> int:
    """Number of greedy stopping times strictly before the final point at
    which the local p-variation^p since the previous stop first reaches
    ``alpha``."""
    if p < 1:
        raise DomainError("p must be >= 1")
    x = _norms(path)
    n = x.shape[0]
    thresh = alpha * (1.0 - 1e-12)
    count, s = 0, 0
    best = [0.0]
    for j in range(1, n):
        inc = np.linalg.norm(x[j] - x[s:j], axis=1) ** p
        v = float(np.max(np.asarray(best) + inc))
        if v >= thresh and j < n - 1:
            count += 1
            s, best = j, [0.0]
        else:
            best.append(v)
    return count
