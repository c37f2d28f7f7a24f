"""Karhunen-Loeve type expansion of fBm built on the polynomial basis
f_k(t) = (1 - t)^(k-1) of L2[0, 1].

The orthonormalised derivatives l'_k are shifted Legendre polynomials in
1 - t, evaluated by the three-term recurrence:

    l'_k(t) = sqrt(2k - 1) * P_{k-1}(1 - 2t)

and h_k(t) = int_0^t K(t, u) l'_k(u) du is computed from the self-similarity
K(t, tv) = t^(H - 1/2) K(1, v), so one quadrature rule on [0, 1] serves all t.
"""
from __future__ import annotations

import csv
import functools
from dataclasses import dataclass

import numpy as np

from . import rng
from .fbm_core import (DomainError, FbmPath, TimeGrid, _h, _volterra_matrix,
                       kernel_values)

# beyond this order the power-basis coefficient table is meaningless
# (the monomial Gram matrix is a Hilbert matrix); evaluation itself stays stable
COEFF_TABLE_MAX = 30
MAX_ORDER = 1024


def shifted_legendre(n: int, t) -> np.ndarray:
    """Rows l'_1..l'_n evaluated at ``t`` (any shape)."""
    t = np.asarray(t, dtype=float)
    out = np.empty((n,) + t.shape)
    if n == 0:
        return out
    x = 1.0 - 2.0 * t
    p_prev, p = np.ones_like(x), x
    out[0] = 1.0
    if n > 1:
        out[1] = np.sqrt(3.0) * p
    for k in range(1, n - 1):
        p_prev, p = p, ((2 * k + 1) * x * p - k * p_prev) / (k + 1)
        out[k + 1] = np.sqrt(2.0 * k + 3.0) * p
    return out


def power_coefficients(n: int) -> list[np.ndarray]:
    """Monomial coefficients (ascending powers of t) of l'_1..l'_n."""
    if n > COEFF_TABLE_MAX:
        raise DomainError(f"coefficient table refused beyond order {COEFF_TABLE_MAX}")
    out = []
    for k in range(1, n + 1):
        leg = np.polynomial.Legendre.basis(k - 1, domain=[0, 1])
        poly = leg.convert(kind=np.polynomial.Polynomial, domain=[-1, 1], window=[-1, 1])
        # basis(k-1, domain=[0,1]) is P_{k-1}(2t - 1) = (-1)^(k-1) P_{k-1}(1 - 2t)
        out.append(np.sqrt(2 * k - 1) * (-1) ** (k - 1) * poly.coef)
    return out


@functools.lru_cache(maxsize=8)
def _graded_rule(n: int, levels: int = 40, order: int = 16):
    # geometric grading at both ends for the kernel's power singularities,
    # plus a uniform layer so that degree-n polynomials are resolved
    left = 2.0 ** -np.arange(levels, 0, -1)
    right = 1.0 - 2.0 ** -np.arange(2, levels + 1)
    uni = np.linspace(0.0, 1.0, max(n // 4, 2) + 1)
    br = np.unique(np.concatenate([[0.0, 1.0], left, right, uni]))
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = br[:-1], br[1:]
    nodes = (0.5 * (b - a)[:, None] * (x[None, :] + 1.0) + a[:, None]).ravel()
    weights = (0.5 * (b - a)[:, None] * w[None, :]).ravel()
    return nodes, weights


@dataclass(frozen=True, eq=False)
class KlBasis:
    order: int
    hurst: float
    quad_grid: TimeGrid
    ell_prime: list  # power coefficients, empty beyond COEFF_TABLE_MAX

    def ell(self, t) -> np.ndarray:
        return shifted_legendre(self.order, t)

    def h(self, times) -> np.ndarray:
        """Table h_k(t), shape (order, len(times))."""
        return _h_table(self.order, self.hurst, np.asarray(times, dtype=float).tobytes())

    @functools.cached_property
    def projector(self) -> np.ndarray:
        """Orthonormal columns spanning the discretised l'_k on the quadrature cells."""
        g = self.quad_grid
        phi = shifted_legendre(self.order, g.midpoints).T * np.sqrt(g.dt)[:, None]
        q, r = np.linalg.qr(phi)
        return q * np.sign(np.diag(r))[None, :]


@functools.lru_cache(maxsize=32)
def _h_table(n: int, H: float, tbytes: bytes) -> np.ndarray:
    t = np.frombuffer(tbytes)
    if np.any(t < 0) or np.any(t > 1):
        raise DomainError("the expansion lives on [0, 1]")
    v, w = _graded_rule(n)
    wk = w * kernel_values(H, 1.0, v)
    out = np.empty((n, t.size))
    for j, tj in enumerate(t):
        out[:, j] = tj ** (H + 0.5) * (shifted_legendre(n, tj * v) @ wk) if tj > 0 else 0.0
    out.setflags(write=False)
    return out


def build_basis(n: int, H=0.5, quad_steps: int = 512) -> KlBasis:
    """Basis of order ``n`` for Hurst ``H`` with a uniform quadrature grid."""
    n = int(n)
    if n < 0:
        raise DomainError("order must be nonnegative")
    if n > MAX_ORDER or n > quad_steps:
        raise DomainError(f"order {n} exceeds the guard (max {min(MAX_ORDER, quad_steps)})")
    coeffs = power_coefficients(n) if n <= COEFF_TABLE_MAX else []
    return KlBasis(n, _h(H), TimeGrid.regular(1.0, quad_steps), coeffs)


def _grid_indices(basis: KlBasis, grid: TimeGrid) -> np.ndarray:
    q = basis.quad_grid.points
    idx = np.searchsorted(q, grid.points)
    idx = np.clip(idx, 0, q.size - 1)
    if np.max(np.abs(q[idx] - grid.points)) > 1e-12:
        raise DomainError("output grid must be a subset of the quadrature grid")
    return idx


def kl_decomposition(basis: KlBasis, grid: TimeGrid, d: int = 1, seed: int = 0,
                     paths: int | None = None, start: int = 0):
    """Jointly realise (B^n, B - B^n, B) on ``grid`` from one white-noise draw.

    The white noise lives on the quadrature cells; B is its Volterra image and
    Z_k are its coordinates on the orthonormalised basis, hence i.i.d. N(0,1).
    """
    idx = _grid_indices(basis, grid)
    qg = basis.quad_grid
    count = 1 if paths is None else int(paths)
    xi = rng.normals(seed, "kl/white", start, start + count, (d, qg.steps))
    full_q = xi @ _volterra_matrix(basis.hurst, qg.key()).T
    full_q = np.concatenate([np.zeros(full_q.shape[:-1] + (1,)), full_q], axis=-1)
    full = full_q[..., idx]
    if basis.order:
        z = xi @ basis.projector
        trunc = z @ basis.h(grid.points)
    else:
        trunc = np.zeros_like(full)
    resid = full - trunc
    if paths is None:
        trunc, resid, full = trunc[0], resid[0], full[0]
    mk = lambda v, tag: FbmPath(basis.hurst, grid, v, int(seed), tag, int(start))
    return mk(trunc, "kl-truncated"), mk(resid, "kl-residual"), mk(full, "volterra")


def truncated_fbm(basis: KlBasis, grid: TimeGrid, d: int = 1, seed: int = 0,
                  paths: int | None = None, start: int = 0) -> FbmPath:
    """B^n_t = sum_{k <= n} h_k(t) Z_k."""
    return kl_decomposition(basis, grid, d, seed, paths, start)[0]


def residual_fbm(basis: KlBasis, grid: TimeGrid, d: int = 1, seed: int = 0,
                 paths: int | None = None, start: int = 0) -> FbmPath:
    """B - B^n from the same draws as :func:`truncated_fbm`."""
    return kl_decomposition(basis, grid, d, seed, paths, start)[1]


def truncated_covariance(basis: KlBasis, times) -> np.ndarray:
    """Exact covariance sum_k h_k(s) h_k(t) of B^n."""
    h = basis.h(times)
    return h.T @ h


def write_basis_csv(path, basis: KlBasis) -> None:
    n = min(basis.order, COEFF_TABLE_MAX)
    coeffs = basis.ell_prime or power_coefficients(n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k"] + [f"c{j}" for j in range(n)])
        for k, c in enumerate(coeffs, start=1):
            w.writerow([k] + [repr(float(x)) for x in c] + [""] * (n - c.size))
