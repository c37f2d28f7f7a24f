"""Malliavin derivatives of the solution, the reduced Malliavin matrix and
checks of the scale-invariant bounds on ||f 1_[0,t]||_H."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .bounds import BoundFit, loglog_slope, rel_band
from .fbm_core import DomainError, TimeGrid, _h, increment_covariance
from .rde_solver import SolutionPath, simulate
from .vf_dsl import VectorFieldSystem


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    t: float
    C: np.ndarray  # (n, n) or (P, n, n)
    lambda_min: np.ndarray | float


@dataclass
class InterpolationReport:
    hurst: float
    gamma: float
    times: np.ndarray
    rows: list = field(default_factory=list)  # one dict per (function, t)
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def implied_constants(self) -> dict:
        """Per function: range of norm/envelope ratios over t."""
        out = {}
        for r in self.rows:
            d = out.setdefault(r["function"], {"c1": [], "c2": []})
            if r["ratio_lower"] is not None:
                d["c1"].append(r["ratio_lower"])
            d["c2"].append(r["ratio_upper"])
        return {k: {c: (min(v), max(v)) if v else None for c, v in d.items()}
                for k, d in out.items()}


def malliavin_derivative(sol: SolutionPath, vf: VectorFieldSystem, s: int, t: int) -> np.ndarray:
    """D_s X_t: columns J_t J_s^{-1} V_j(X_s), shape (n, d) (or batched)."""
    if s > t:
        raise DomainError(f"need s <= t, got s = {s}, t = {t}")
    if sol.J is None:
        raise DomainError("solution has no Jacobians; use solve_with_jacobian")
    v = vf.diffusion(sol.X[..., s, :])
    return sol.jacobian_between(s, t) @ v


def _g_cells(sol, vf, k):
    # g(u) = J_u^{-1} V(X_u) at grid points 0..k, averaged onto cells
    g = sol.Jinv[..., : k + 1, :, :] @ vf.diffusion(sol.X[..., : k + 1, :])
    return 0.5 * (g[..., :-1, :, :] + g[..., 1:, :, :])


def reduced_malliavin_matrix(sol: SolutionPath, vf: VectorFieldSystem, t_index: int,
                             H=None) -> MalliavinMatrix:
    """C_t = <g^p, g^q>_H summed over driver components, g(u) = J_u^{-1} V(X_u).

    Rows of g are step functions on the grid cells up to t; their H-Gram
    matrix is built from the increment covariance. Eigenvalues are clipped at 0.
    """
    if sol.J is None:
        raise DomainError("solution has no Jacobians; use solve_with_jacobian")
    if H is None and sol.hurst is None:
        raise DomainError("Hurst parameter unknown; pass H")
    H = _h(H if H is not None else sol.hurst)
    k = int(t_index)
    if k == 0:
        C = np.zeros(sol.X.shape[:-2] + (vf.n, vf.n))
    else:
        gram = increment_covariance(H, sol.grid)[:k, :k]
        g = _g_cells(sol, vf, k)
        # C[p, q] = sum_j sum_ab g_a[p, j] gram_ab g_b[q, j]
        gg = np.einsum("ab,...bqj->...aqj", gram, g)
        C = np.einsum("...apj,...aqj->...pq", g, gg)
        C = 0.5 * (C + np.swapaxes(C, -1, -2))
    w, U = np.linalg.eigh(C)
    w = np.clip(w, 0.0, None)
    C = (U * w[..., None, :]) @ np.swapaxes(U, -1, -2)
    return MalliavinMatrix(float(sol.grid.points[k]), C, w[..., 0])


def lambda_min_curve(sol: SolutionPath, vf, H, indices) -> np.ndarray:
    """lambda_min(C_t) for each grid index, shape (P, len(indices))."""
    return np.stack([np.atleast_1d(reduced_malliavin_matrix(sol, vf, k, H).lambda_min)
                     for k in indices], axis=-1)


def malliavin_scaling_fit(vf: VectorFieldSystem, H, times=None, paths: int = 1000,
                          seed: int = 0, x0=None, steps: int = 512,
                          scheme: str | None = None, rel_tol: float = 0.15,
                          refinement: int = 16, chunk: int = 256) -> BoundFit:
    """Regress log median lambda_min(C_t) on log t; the predicted slope is 2H."""
    H = _h(H)
    times = np.asarray(times if times is not None else 2.0 ** -np.arange(6, -1, -1), dtype=float)
    if times.size < 3:
        raise DomainError("scaling fit needs at least 3 times")
    grid = TimeGrid.regular(1.0, steps)
    idx = [grid.index_of(t) for t in times]
    if scheme is None:
        scheme = "milstein2" if H > 1 / 3 else "wong_zakai_fine"
    x0 = np.zeros(vf.n) if x0 is None else x0

    lam = simulate(vf, H, grid, x0, paths, seed, scheme, "cholesky", refinement,
                   jacobian=True, chunk=chunk,
                   reducer=lambda sol: lambda_min_curve(sol, vf, H, idx))
    med = np.median(lam, axis=0)
    slope, icpt, ci = loglog_slope(times, med)
    return BoundFit(
        "malliavin_scaling",
        targets={"slope": 2 * H},
        fitted={"slope": slope, "intercept": icpt},
        band={"slope": rel_band(2 * H, rel_tol)},
        checks={"lambda_min_positive": bool(np.all(lam > 0))},
        diagnostics={"times": times, "median_lambda_min": med, "ci95": ci,
                     "q10": np.quantile(lam, 0.1, axis=0), "paths": paths,
                     "scheme": scheme, "seed": seed},
    )


def write_jsonl(path, fit: BoundFit) -> None:
    """One line per t: {t, lambda_min, slope, band}."""
    d = fit.diagnostics
    with open(path, "w") as fh:
        for t, lm in zip(d["times"], d["median_lambda_min"]):
            fh.write(json.dumps({"t": float(t), "lambda_min": float(lm),
                                 "slope": fit.fitted["slope"],
                                 "band": list(fit.band["slope"])}) + "\n")


# --------------------------------------------------------------------------
# scale-invariant inequalities


def _corpus():
    two_pi = 2 * math.pi
    return {
        "const1": lambda t: np.ones_like(t),
        "const2": lambda t: 2.0 * np.ones_like(t),
        "sin1": lambda t: 1 + 0.5 * np.sin(two_pi * t),
        "sin2": lambda t: 1 + 0.5 * np.sin(2 * two_pi * t),
        "sin3": lambda t: 1 + 0.5 * np.sin(3 * two_pi * t),
        "ramp_up": lambda t: 1 + t,
        "ramp_down": lambda t: 2 - t,
        "quadratic": lambda t: 0.5 + t * t,
        "zero_at_half": lambda t: t - 0.5,
    }


TEST_FUNCTIONS = _corpus()


def holder_seminorm(f, gamma: float, points: int = 257) -> float:
    """sup |f(u) - f(v)| / |u - v|^gamma over a uniform sample of [0, 1]."""
    u = np.linspace(0.0, 1.0, points)
    fu = f(u)
    du = np.abs(u[:, None] - u[None, :])
    np.fill_diagonal(du, 1.0)
    r = np.abs(fu[:, None] - fu[None, :]) / du ** gamma
    np.fill_diagonal(r, 0.0)
    return float(r.max())


def verify_interpolation(H, gamma: float, functions: dict | None = None, times=None,
                         steps: int = 2000, tol: float = 1e-9) -> InterpolationReport:
    """Compare ||f 1_[0,t]||_H^2 with the scale-invariant envelopes.

    For H > 1/2 the upper envelope holds with constant exactly 1, so an
    exceedance is a violation. Otherwise a violation is any non-finite or
    non-positive norm/envelope ratio.
    """
    H = _h(H)
    if H > 0.5 and gamma <= H - 0.5:
        raise DomainError("need gamma > H - 1/2")
    if H <= 0.5 and gamma <= 0.5 - H:
        raise DomainError("need gamma > 1/2 - H")
    functions = TEST_FUNCTIONS if functions is None else functions
    times = np.round(np.arange(1, 11) / 10, 12) if times is None else np.asarray(times, float)
    grid = TimeGrid.regular(1.0, steps)
    gram = increment_covariance(H, grid)
    fine = np.linspace(0.0, 1.0, 100001)
    rep = InterpolationReport(H, gamma, times)
    for name, f in functions.items():
        fc = f(grid.midpoints)
        vals = f(fine)
        fmin, fsup = float(np.min(np.abs(vals))), float(np.max(np.abs(vals)))
        fg = holder_seminorm(f, gamma)
        for t in times:
            k = grid.index_of(t)
            g = fc[:k]
            norm2 = float(g @ gram[:k, :k] @ g)
            scale = t ** (2 * H)
            if H > 0.5:
                lower = scale * fmin ** 4 / (fsup ** 2 + fg ** 2)
                upper = scale * fsup ** 2
            else:
                lower = scale * fmin ** 2
                upper = scale * (fg ** 2 + fsup ** 2)
            lower, upper = float(lower), float(upper)
            r_lo = norm2 / lower if lower > 0 else None
            r_hi = norm2 / upper
            row = {"function": name, "t": float(t), "norm2": norm2, "lower": lower,
                   "upper": upper, "ratio_lower": r_lo, "ratio_upper": r_hi}
            rep.rows.append(row)
            bad = not np.isfinite(norm2) or not np.isfinite(r_hi) or r_hi <= 0
            if r_lo is not None and (not np.isfinite(r_lo) or r_lo <= 0):
                bad = True
            if H > 0.5 and r_hi > 1 + tol:
                bad = True
            if bad:
                rep.violations.append(row)
    return rep
