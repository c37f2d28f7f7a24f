"""Fractional Brownian motion: covariance, Volterra kernel, Cameron-Martin
operators and three exact/approximate samplers.

Conventions
-----------
A :class:`TimeGrid` has points ``t_0 = 0 < ... < t_N = T``. Functions on the
grid are either *cell valued* (length ``N``, one value per cell
``[t_i, t_{i+1})``) or *point valued* (length ``N + 1``); point values are
turned into cell values by averaging the two endpoints. The Cameron-Martin
inner product of two step functions is evaluated exactly through the
covariance of the fBm increments over the grid cells.
"""
from __future__ import annotations

import csv
import functools
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, linalg, special

from . import rng

METHODS = ("cholesky", "circulant", "volterra")


class DomainError(ValueError):
    """Argument outside the domain of a formula."""


# --------------------------------------------------------------------------
# parameters and grids


@dataclass(frozen=True)
class HurstParam:
    value: float

    def __post_init__(self):
        v = float(self.value)
        if not 0.0 < v < 1.0:
            raise DomainError(f"Hurst parameter must lie in (0, 1), got {v}")
        object.__setattr__(self, "value", v)

    @property
    def regime(self) -> str:
        if self.value > 0.5:
            return "regular"
        if self.value == 0.5:
            return "brownian"
        return "rough"

    def require_theory(self) -> "HurstParam":
        """Theory-facing operations need H > 1/4."""
        if self.value <= 0.25:
            raise DomainError(f"H must exceed 1/4, got {self.value}")
        return self

    def __float__(self):
        return self.value


def _h(H) -> float:
    return HurstParam(H).value if not isinstance(H, HurstParam) else H.value


@dataclass(frozen=True, eq=False)
class TimeGrid:
    points: np.ndarray
    uniform: bool = False

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float)
        if p.ndim != 1 or p.size < 2:
            raise DomainError("a time grid needs at least two points")
        if p[0] != 0.0:
            raise DomainError("time grids start at 0")
        if np.any(np.diff(p) <= 0):
            raise DomainError("time grid must be strictly increasing")
        if self.uniform:
            ref = np.arange(p.size) * (p[-1] / (p.size - 1))
            if np.max(np.abs(p - ref)) > 1e-12 * p[-1]:
                raise DomainError("grid flagged uniform is not uniform")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)

    @classmethod
    def regular(cls, horizon: float, steps: int) -> "TimeGrid":
        if horizon <= 0 or steps < 1:
            raise DomainError("need horizon > 0 and steps >= 1")
        return cls(np.linspace(0.0, float(horizon), int(steps) + 1), uniform=True)

    @property
    def horizon(self) -> float:
        return float(self.points[-1])

    @property
    def steps(self) -> int:
        return self.points.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.points)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.points[:-1] + self.points[1:])

    def index_of(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.points - t)))
        if abs(self.points[i] - t) > 1e-9 * max(1.0, self.horizon):
            raise DomainError(f"time {t} is not a grid point")
        return i

    def key(self) -> tuple:
        return (self.uniform, self.points.tobytes())

    def refine(self, m: int) -> "TimeGrid":
        """Grid with every cell split into ``m`` equal sub-cells."""
        m = int(m)
        p = self.points
        frac = np.arange(m) / m
        fine = (p[:-1, None] + np.diff(p)[:, None] * frac[None, :]).ravel()
        return TimeGrid(np.append(fine, p[-1]), uniform=self.uniform)


@dataclass(frozen=True, eq=False)
class FbmPath:
    """Sampled d-dimensional fBm.

    ``values`` has shape ``(d, N+1)`` for one path or ``(paths, d, N+1)`` for
    a batch whose first path has index ``start``.
    """

    hurst: float
    grid: TimeGrid
    values: np.ndarray
    seed: int
    method: str
    start: int = 0
    warnings: tuple = field(default_factory=tuple)

    @property
    def d(self) -> int:
        return self.values.shape[-2]

    @property
    def batched(self) -> bool:
        return self.values.ndim == 3

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=-1)

    def path(self, i: int) -> "FbmPath":
        if not self.batched:
            raise IndexError("not a batch")
        return FbmPath(self.hurst, self.grid, self.values[i], self.seed,
                       self.method, self.start + i, self.warnings)


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    entries: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.entries, dtype=float)
        if not np.allclose(a, a.T, atol=1e-12):
            raise DomainError("covariance matrix must be symmetric")
        lam = np.linalg.eigvalsh(a).min() if a.size else 0.0
        if lam < -1e-9 * max(np.trace(a), 1e-300):
            raise DomainError("covariance matrix is not positive semidefinite")
        object.__setattr__(self, "entries", a)


# --------------------------------------------------------------------------
# covariance


def covariance(H, s, t):
    """R(s, t) = (t^2H + s^2H - |t-s|^2H) / 2; vectorised over s and t."""
    H = _h(H)
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    if np.any(s < 0) or np.any(t < 0):
        raise DomainError("covariance is defined for nonnegative times")
    out = 0.5 * (t ** (2 * H) + s ** (2 * H) - np.abs(t - s) ** (2 * H))
    return float(out) if out.ndim == 0 else out


def covariance_matrix(H, grid: TimeGrid) -> CovarianceMatrix:
    p = grid.points
    return CovarianceMatrix(covariance(H, p[:, None], p[None, :]))


def increment_covariance(H, grid: TimeGrid) -> np.ndarray:
    """E[dB_i dB_j] over grid cells; also the exact H-Gram of cell indicators."""
    return _increment_covariance(_h(H), grid.key())


@functools.lru_cache(maxsize=32)
def _increment_covariance(H: float, key: tuple) -> np.ndarray:
    p = np.frombuffer(key[1])
    a, b = p[:-1], p[1:]
    g = 0.5 * (np.abs(b[:, None] - a[None, :]) ** (2 * H)
               + np.abs(a[:, None] - b[None, :]) ** (2 * H)
               - np.abs(b[:, None] - b[None, :]) ** (2 * H)
               - np.abs(a[:, None] - a[None, :]) ** (2 * H))
    g = 0.5 * (g + g.T)
    g.setflags(write=False)
    return g


# --------------------------------------------------------------------------
# Volterra kernel


def kernel_constant(H) -> float:
    """c_H normalising K so that int_0^{s^t} K(t,r) K(s,r) dr = R(s,t).

    The second constant of the rough branch is (1/2 - H) * c_H.
    """
    H = _h(H)
    if H == 0.5:
        return 1.0
    if H > 0.5:
        return math.sqrt(H * (2 * H - 1) / special.beta(2 - 2 * H, H - 0.5))
    return math.sqrt(2 * H / ((1 - 2 * H) * special.beta(1 - 2 * H, H + 0.5)))


def volterra_kernel(H, t: float, s: float) -> float:
    """K(t, s) by adaptive quadrature of its integral representation."""
    H = _h(H)
    if not 0.0 < s < t:
        raise DomainError("volterra_kernel needs 0 < s < t")
    if H == 0.5:
        return 1.0
    c = kernel_constant(H)
    if H > 0.5:
        val, _ = integrate.quad(lambda u: u ** (H - 0.5), s, t,
                                weight="alg", wvar=(H - 1.5, 0.0))
        return c * s ** (0.5 - H) * val
    val, _ = integrate.quad(lambda u: u ** (H - 1.5), s, t,
                            weight="alg", wvar=(H - 0.5, 0.0))
    return c * ((t / s) ** (H - 0.5) * (t - s) ** (H - 0.5)
                - (H - 0.5) * s ** (0.5 - H) * val)


def kernel_values(H, t, s) -> np.ndarray:
    """Vectorised K(t, s) through the Gauss hypergeometric closed form.

    Entries with s >= t are zero, matching the Volterra convention.
    """
    H = _h(H)
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    out = np.zeros(t.shape)
    m = (s < t) & (s > 0)
    if H == 0.5:
        out[m] = 1.0
        return out
    tt, ss = t[m], s[m]
    x = 1.0 - ss / tt
    c = kernel_constant(H)
    if H > 0.5:
        out[m] = (c * ss ** (0.5 - H) * (tt - ss) ** (H - 0.5) * tt ** (H - 0.5)
                  / (H - 0.5) * special.hyp2f1(0.5 - H, 1.0, H + 0.5, x))
    else:
        # Euler transform: 2F1(3/2-H, 1; H+3/2; x) = (s/t)^(2H-1) 2F1(2H, H+1/2; H+3/2; x),
        # which stays finite as s -> 0
        ratio = ss / tt
        out[m] = c * ((tt / ss) ** (H - 0.5) * (tt - ss) ** (H - 0.5)
                      - (H - 0.5) * ss ** (0.5 - H) * (tt - ss) ** (H + 0.5)
                      * tt ** (H - 1.5) / (H + 0.5) * ratio ** (2 * H - 1)
                      * special.hyp2f1(2 * H, H + 0.5, H + 1.5, x))
    return out


# --------------------------------------------------------------------------
# step functions on a grid


def cell_values(grid: TimeGrid, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    n = grid.steps
    if f.shape[0] == n:
        return f
    if f.shape[0] == n + 1:
        return 0.5 * (f[:-1] + f[1:])
    raise DomainError(f"expected {n} cell or {n + 1} point values, got {f.shape[0]}")


def indicator(grid: TimeGrid, t: float) -> np.ndarray:
    """Cell values of 1_{[0, t]} for a grid point t."""
    k = grid.index_of(t)
    out = np.zeros(grid.steps)
    out[:k] = 1.0
    return out


def kstar_matrix(H, grid: TimeGrid, at=None) -> np.ndarray:
    """Matrix M with (K* f)(at) = M @ f for cell-valued f.

    For a step function the integral of dK(r, s)/dr over each cell is a
    difference of kernel values, so the operator is exact; the cell holding
    s contributes K(t_{c+1}, s) in both branches of K*.
    """
    H = _h(H)
    at = grid.midpoints if at is None else np.asarray(at, dtype=float)
    p = grid.points
    upper = kernel_values(H, p[None, 1:], at[:, None])
    lower = kernel_values(H, p[None, :-1], at[:, None])
    return upper - lower


def kstar_apply(H, grid: TimeGrid, f, at=None) -> np.ndarray:
    """Discrete K* f evaluated at ``at`` (default: cell midpoints)."""
    fc = cell_values(grid, f)
    return np.tensordot(kstar_matrix(H, grid, at), fc, axes=(1, 0))


def h_inner_product(H, grid: TimeGrid, f, g) -> float:
    """<f, g>_H for step functions; f, g have shape (N,) / (N+1,) with optional
    trailing R^d axis.

    For H > 1/2 the entries are the closed-form cell integrals of
    H(2H-1)|u-v|^{2H-2}; for H <= 1/2 they are the L2 products of the K*
    images of the cell indicators. Both equal the increment covariance.
    """
    fc = cell_values(grid, f)
    gc = cell_values(grid, g)
    gram = increment_covariance(H, grid)
    if fc.ndim == 1:
        return float(fc @ gram @ gc)
    return float(np.einsum("ik,ij,jk->", fc, gram, gc))


def l2_kstar_inner(H, grid: TimeGrid, f, g, order: int = 6) -> float:
    """<K*f, K*g>_{L2} by Gauss-Legendre quadrature inside every cell.

    Independent of :func:`h_inner_product`; used to cross-check it.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    p = grid.points
    a, b = p[:-1], p[1:]
    nodes = (0.5 * (b - a)[:, None] * (x[None, :] + 1) + a[:, None]).ravel()
    weights = (0.5 * (b - a)[:, None] * w[None, :]).ravel()
    kf = kstar_apply(H, grid, f, nodes)
    kg = kstar_apply(H, grid, g, nodes)
    if kf.ndim == 1:
        return float(np.sum(weights * kf * kg))
    return float(np.sum(weights[:, None] * kf * kg))


# --------------------------------------------------------------------------
# samplers


@functools.lru_cache(maxsize=16)
def _cholesky_factor(H: float, key: tuple) -> np.ndarray:
    g = _increment_covariance(H, key)
    try:
        return linalg.cholesky(g, lower=True)
    except linalg.LinAlgError:
        lam, vec = np.linalg.eigh(g)
        return vec * np.sqrt(np.clip(lam, 0.0, None))


@functools.lru_cache(maxsize=16)
def _circulant_eigenvalues(H: float, n: int, dt: float) -> np.ndarray:
    k = np.arange(n + 1, dtype=float)
    gam = 0.5 * dt ** (2 * H) * (np.abs(k + 1) ** (2 * H) - 2 * k ** (2 * H)
                                 + np.abs(k - 1) ** (2 * H))
    row = np.concatenate([gam, gam[-2:0:-1]])
    return np.fft.fft(row).real


@functools.lru_cache(maxsize=16)
def _volterra_matrix(H: float, key: tuple) -> np.ndarray:
    p = np.frombuffer(key[1])
    mid = 0.5 * (p[:-1] + p[1:])
    a = kernel_values(H, p[1:, None], mid[None, :])
    return a * np.sqrt(np.diff(p))[None, :]


def volterra_sampler_covariance(H, grid: TimeGrid) -> np.ndarray:
    """Exact covariance of the discretised Volterra sampler at t_1..t_N."""
    a = _volterra_matrix(_h(H), grid.key())
    return a @ a.T


def _increments(H, grid, d, seed, method, start, stop, warn):
    n = grid.steps
    tag = f"fbm/{method}"
    if method == "cholesky":
        z = rng.normals(seed, tag, start, stop, (d, n))
        return z @ _cholesky_factor(H, grid.key()).T
    if method == "circulant":
        lam = _circulant_eigenvalues(H, n, grid.horizon / n)
        m = lam.size
        z = rng.normals(seed, tag, start, stop, (d, 2, m))
        amp = np.sqrt(np.clip(lam, 0.0, None) / m)
        y = np.fft.fft(amp * (z[..., 0, :] + 1j * z[..., 1, :]), axis=-1)
        return y.real[..., :n]
    if method == "volterra":
        z = rng.normals(seed, tag, start, stop, (d, n))
        b = z @ _volterra_matrix(H, grid.key()).T
        return np.diff(np.concatenate([np.zeros(b.shape[:-1] + (1,)), b], axis=-1), axis=-1)
    raise DomainError(f"unknown method {method!r}")


def sample_fbm(H, grid: TimeGrid, d: int = 1, seed: int = 0, method: str = "cholesky",
               paths: int | None = None, start: int = 0) -> FbmPath:
    """Sample fBm on ``grid``.

    ``paths=None`` returns a single path with values ``(d, N+1)`` (the path of
    index ``start``); otherwise a batch ``(paths, d, N+1)``.
    """
    H = _h(H)
    if method not in METHODS:
        raise DomainError(f"unknown method {method!r}")
    warn = []
    if method == "circulant":
        if not grid.uniform:
            raise DomainError("circulant sampling needs a uniform grid")
        lam = _circulant_eigenvalues(H, grid.steps, grid.horizon / grid.steps)
        if lam.min() < -1e-9 * lam.max():
            msg = f"circulant embedding has eigenvalue {lam.min():.3g}; falling back to cholesky"
            warnings.warn(msg, RuntimeWarning)
            warn.append(msg)
            method = "cholesky"
    count = 1 if paths is None else int(paths)
    inc = _increments(H, grid, int(d), seed, method, start, start + count, warn)
    vals = np.concatenate([np.zeros(inc.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    if paths is None:
        vals = vals[0]
    return FbmPath(H, grid, vals, int(seed), method, int(start), tuple(warn))


def sample_fbm_parallel(H, grid: TimeGrid, d: int, seed: int, method: str,
                        paths: int, chunk: int = 4096) -> FbmPath:
    """Batch sampling fanned out over the worker pool; identical to
    :func:`sample_fbm` for any worker count."""
    parts = rng.pmap(lambda ab: sample_fbm(H, grid, d, seed, method, ab[1] - ab[0], ab[0]).values,
                     rng.chunks(paths, chunk))
    first = sample_fbm(H, grid, d, seed, method, 1, 0)
    return FbmPath(_h(H), grid, np.concatenate(parts, axis=0), int(seed),
                   first.method, 0, first.warnings)


# --------------------------------------------------------------------------
# 2-D rho-variation of the covariance


def default_rho(H) -> float:
    """1/(2H) in the rough regime, 1 otherwise (the sum diverges for rho < 1)."""
    return max(1.0, 1.0 / (2.0 * _h(H)))


def rho_variation_levels(H, grid: TimeGrid, levels: int | None = None,
                         rho: float | None = None) -> np.ndarray:
    """(sum_ij |R_rect|^rho)^(1/rho) over the dyadic sub-partitions of ``grid``."""
    H = _h(H)
    rho = default_rho(H) if rho is None else float(rho)
    n = grid.steps
    max_level = int(math.floor(math.log2(n)))
    levels = max_level if levels is None else min(int(levels), max_level)
    out = []
    for lev in range(levels + 1):
        idx = np.unique(np.round(np.linspace(0, n, 2 ** lev + 1)).astype(int))
        sub = TimeGrid(grid.points[idx])
        g = _increment_covariance(H, sub.key())
        out.append(float(np.sum(np.abs(g) ** rho) ** (1.0 / rho)))
    return np.array(out)


def rho_variation_2d(H, grid: TimeGrid, levels: int | None = None,
                     rho: float | None = None) -> float:
    """Running maximum of the dyadic 2-D rho-variation (a lower bound of V_rho(R))."""
    return float(np.max(rho_variation_levels(H, grid, levels, rho)))


# --------------------------------------------------------------------------
# export

MAGIC = b"FBM1"
_HEADER = struct.Struct("<4sdqqQ")


def write_csv(path, fbm: FbmPath) -> None:
    if fbm.batched:
        raise DomainError("CSV export is per path")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"B{i + 1}" for i in range(fbm.d)])
        for k, t in enumerate(fbm.grid.points):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in fbm.values[:, k]])


def to_bytes(fbm: FbmPath) -> bytes:
    if fbm.batched:
        raise DomainError("binary export is per path")
    head = _HEADER.pack(MAGIC, fbm.hurst, fbm.grid.steps, fbm.d,
                        int(fbm.seed) & 0xFFFFFFFFFFFFFFFF)
    body = np.concatenate([fbm.grid.points, fbm.values.ravel()]).astype("<f8").tobytes()
    return head + body


def from_bytes(data: bytes, method: str = "cholesky") -> FbmPath:
    magic, H, n, d, seed = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError("not an FBM1 block")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    pts = body[:n + 1].copy()
    vals = body[n + 1:].reshape(d, n + 1).copy()
    return FbmPath(H, TimeGrid(pts), vals, seed, method)
