"""Newtonian-type kernels, energies of discrete measures, capacities by
Frank-Wolfe over the simplex, Hausdorff content and the quadrature check of
the double-integral lemma used for hitting estimates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import rng


# --------------------------------------------------------------------------
# sets


@dataclass(frozen=True)
class CompactSet:
    """``kind`` is one of point, box, ball, union.

    point: ``a`` is the point. box: corners ``a`` (low) and ``b`` (high),
    degenerate sides allowed (a segment is a box). ball: centre ``a``,
    radius ``radius``. union: ``parts``.
    """

    kind: str
    a: tuple = ()
    b: tuple = ()
    radius: float = 0.0
    parts: tuple = ()

    def __post_init__(self):
        if self.kind not in ("point", "box", "ball", "union"):
            raise ValueError(f"unknown set kind {self.kind!r}")
        if self.kind == "box" and any(lo > hi for lo, hi in zip(self.a, self.b)):
            raise ValueError("box corners out of order")
        if self.kind == "ball" and self.radius < 0:
            raise ValueError("negative radius")
        if self.kind == "union" and not self.parts:
            raise ValueError("empty union")

    @staticmethod
    def point(x) -> "CompactSet":
        return CompactSet("point", tuple(float(v) for v in np.atleast_1d(x)))

    @staticmethod
    def box(lo, hi) -> "CompactSet":
        return CompactSet("box", tuple(map(float, np.atleast_1d(lo))),
                          tuple(map(float, np.atleast_1d(hi))))

    @staticmethod
    def segment(p, q) -> "CompactSet":
        """Axis-aligned segment between p and q."""
        p, q = np.atleast_1d(p).astype(float), np.atleast_1d(q).astype(float)
        if np.count_nonzero(p != q) > 1:
            raise ValueError("only axis-aligned segments are supported")
        return CompactSet.box(np.minimum(p, q), np.maximum(p, q))

    @staticmethod
    def ball(center, radius) -> "CompactSet":
        return CompactSet("ball", tuple(map(float, np.atleast_1d(center))), radius=float(radius))

    @staticmethod
    def union(*parts) -> "CompactSet":
        return CompactSet("union", parts=tuple(parts))

    @classmethod
    def from_config(cls, d: dict) -> "CompactSet":
        kind = d["kind"]
        if kind == "point":
            return cls.point(d["x"])
        if kind == "box":
            return cls.box(d["lo"], d["hi"])
        if kind == "segment":
            return cls.segment(d["p"], d["q"])
        if kind == "ball":
            return cls.ball(d["center"], d["radius"])
        if kind == "union":
            return cls.union(*[cls.from_config(p) for p in d["parts"]])
        raise ValueError(f"unknown set kind {kind!r}")

    @property
    def dim(self) -> int:
        return self.parts[0].dim if self.kind == "union" else len(self.a)

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "point":
            x = np.array(self.a)
            return x, x.copy()
        if self.kind == "box":
            return np.array(self.a), np.array(self.b)
        if self.kind == "ball":
            c = np.array(self.a)
            return c - self.radius, c + self.radius
        lows, highs = zip(*(p.bbox() for p in self.parts))
        return np.min(lows, axis=0), np.max(highs, axis=0)

    @property
    def is_singleton(self) -> bool:
        lo, hi = self.bbox()
        return bool(np.all(lo == hi))

    def bound(self) -> float:
        """Smallest M with the set inside [-M, M]^n."""
        lo, hi = self.bbox()
        return float(max(np.max(np.abs(lo)), np.max(np.abs(hi))))

    def distance(self, x) -> np.ndarray:
        """Euclidean distance from points x (..., n) to the set."""
        x = np.asarray(x, dtype=float)
        if self.kind == "point":
            return np.linalg.norm(x - np.array(self.a), axis=-1)
        if self.kind == "box":
            lo, hi = np.array(self.a), np.array(self.b)
            return np.linalg.norm(x - np.clip(x, lo, hi), axis=-1)
        if self.kind == "ball":
            return np.maximum(np.linalg.norm(x - np.array(self.a), axis=-1) - self.radius, 0.0)
        return np.min([p.distance(x) for p in self.parts], axis=0)

    def contains(self, x, tol: float = 1e-12) -> np.ndarray:
        return self.distance(x) <= tol

    def mesh(self, k: int) -> tuple[np.ndarray, float]:
        """About ``k`` quasi-uniform points of the set and their spacing."""
        if self.kind == "point":
            return np.array([self.a]), 0.0
        if self.kind == "box":
            return _box_mesh(np.array(self.a), np.array(self.b), k)
        if self.kind == "ball":
            return _ball_mesh(np.array(self.a), self.radius, k)
        meshes = [p.mesh(max(1, k // len(self.parts))) for p in self.parts]
        pts = np.unique(np.concatenate([m for m, _ in meshes]), axis=0)
        return pts, max(h for _, h in meshes)


def _box_mesh(lo, hi, k):
    side = hi - lo
    live = side > 0
    p = int(live.sum())
    if p == 0:
        return lo[None, :], 0.0
    h = (np.prod(side[live]) / max(k, 2)) ** (1.0 / p)
    counts = np.where(live, np.maximum(2, np.round(side / h).astype(int) + 1), 1)
    axes = [np.linspace(l, u, c) if c > 1 else np.array([l]) for l, u, c in zip(lo, hi, counts)]
    pts = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=-1)
    spacing = max(side[i] / (counts[i] - 1) for i in range(lo.size) if live[i])
    return pts, float(spacing)


def _sphere_points(n, m):
    if n == 1:
        return np.array([[-1.0], [1.0]])
    if n == 2:
        a = 2 * np.pi * np.arange(m) / m
        return np.stack([np.cos(a), np.sin(a)], axis=-1)
    if n == 3:
        i = np.arange(m) + 0.5
        z = 1 - 2 * i / m
        phi = np.pi * (3 - np.sqrt(5)) * i
        s = np.sqrt(1 - z * z)
        return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=-1)
    raise ValueError("ball meshes are implemented for n <= 3")


def _ball_mesh(c, r, k):
    n = c.size
    if r == 0:
        return c[None, :], 0.0
    area = {1: 2.0, 2: 2 * np.pi, 3: 4 * np.pi}[n]

    def build(h):
        m = max(2, int(round(area * r ** (n - 1) / h ** (n - 1)))) if n > 1 else 2
        shell = c + r * _sphere_points(n, m)
        g = np.arange(-r, r + h / 2, h)
        inner = np.stack([a.ravel() for a in np.meshgrid(*([g] * n), indexing="ij")], axis=-1)
        inner = inner[np.linalg.norm(inner, axis=-1) < r - h / 2] + c
        return np.concatenate([shell, inner])

    lo, hi = r * 1e-3, 2 * r
    for _ in range(50):
        h = math.sqrt(lo * hi)
        if len(build(h)) > k:
            lo = h
        else:
            hi = h
    return build(hi), float(hi)


# --------------------------------------------------------------------------
# kernels and energies


def default_n0(M: float, n: int) -> float:
    """4 * diameter([-M, M]^n) * sqrt(n)."""
    return 4.0 * (2.0 * max(M, 1e-12) * math.sqrt(n)) * math.sqrt(n)


def newton_kernel(alpha: float, r, N0: float = 1.0):
    """r^-alpha (alpha > 0), log(N0 / r) (alpha = 0), 1 (alpha < 0)."""
    r = np.asarray(r, dtype=float)
    if alpha < 0:
        out = np.ones_like(r)
    else:
        with np.errstate(divide="ignore"):
            out = np.log(N0 / r) if alpha == 0 else r ** (-alpha)
        out = np.where(r == 0, np.inf, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    support: np.ndarray  # (k, n)
    weights: np.ndarray  # (k,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0):
            raise ValueError("negative weight")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @staticmethod
    def uniform(points) -> "DiscreteMeasure":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return DiscreteMeasure(pts, np.full(len(pts), 1.0 / len(pts)))


def energy_matrix(points, alpha: float, N0: float, eps: float) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rows = rng.chunks(len(pts), 512)

    def block(ab):
        a, b = ab
        r = np.linalg.norm(pts[a:b, None, :] - pts[None, :, :], axis=-1)
        return newton_kernel(alpha, np.maximum(r, eps), N0)

    return np.concatenate(rng.pmap(block, rows), axis=0)


def energy(mu: DiscreteMeasure, alpha: float, N0: float = 1.0, mollify_eps: float = 1e-6,
           diagonal: bool = True) -> float:
    """sum_ij w_i w_j K(max(|x_i - x_j|, eps)); ``diagonal=False`` drops i = j."""
    if mollify_eps <= 0:
        raise ValueError("mollify_eps must be positive")
    Q = energy_matrix(mu.support, alpha, N0, mollify_eps)
    if not diagonal:
        np.fill_diagonal(Q, 0.0)
    w = mu.weights
    return float(w @ Q @ w)


# --------------------------------------------------------------------------
# Frank-Wolfe with away steps


@dataclass
class FwResult:
    weights: np.ndarray
    value: float
    gap: float
    iterations: int
    gaps: list  # best relative gap so far, one entry per iteration


def frank_wolfe(Q: np.ndarray, tol: float = 1e-6, max_iter: int = 20000,
                w0=None) -> FwResult:
    """Minimise w^T Q w over the simplex; stops when the relative duality gap
    (w^T Q w - min_i (Qw)_i) / w^T Q w drops below ``tol``."""
    k = Q.shape[0]
    if w0 is None:
        w = np.zeros(k)
        w[int(np.argmin(np.diag(Q)))] = 1.0
    else:
        w = np.asarray(w0, dtype=float).copy()
    Qw = Q @ w
    best = np.inf
    gaps = []
    it = 0
    for it in range(1, max_iter + 1):
        f = float(w @ Qw)
        s = int(np.argmin(Qw))
        gap = 2.0 * (f - Qw[s])
        best = min(best, gap / max(f, 1e-300))
        gaps.append(best)
        if best < tol:
            break
        supp = np.flatnonzero(w > 0)
        a = supp[int(np.argmax(Qw[supp]))]
        gap_away = 2.0 * (Qw[a] - f)
        if gap >= gap_away or a == s:
            # toward vertex s: d = e_s - w
            dQd = Q[s, s] - 2 * Qw[s] + f
            gmax = 1.0
            slope = 2.0 * (Qw[s] - f)
            col, sign, idx = Q[:, s], 1.0, s
        else:
            # away from vertex a: d = w - e_a
            dQd = f - 2 * Qw[a] + Q[a, a]
            gmax = w[a] / (1.0 - w[a]) if w[a] < 1 else 1e12
            slope = 2.0 * (f - Qw[a])
            col, sign, idx = Q[:, a], -1.0, a
        gamma = gmax if dQd <= 0 else min(gmax, max(0.0, -slope / (2.0 * dQd)))
        if sign > 0:
            w *= 1 - gamma
            w[idx] += gamma
            Qw = (1 - gamma) * Qw + gamma * col
        else:
            w *= 1 + gamma
            w[idx] -= gamma
            Qw = (1 + gamma) * Qw - gamma * col
            if gamma == gmax:
                w[idx] = 0.0
        np.clip(w, 0.0, None, out=w)
        w /= w.sum()
        if it % 200 == 0:
            Qw = Q @ w  # resynchronise the running product
    f = float(w @ Q @ w)
    return FwResult(w, f, best, it, gaps)


@dataclass
class CapacityEstimate:
    alpha: float
    energy_min: float
    capacity: float
    scale: float  # mesh spacing of the last refinement
    N0: float
    status: str  # converged | divergent | exact | inconclusive
    log: list = field(default_factory=list)
    measure: DiscreteMeasure | None = None

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "energy_min": _num(self.energy_min),
                "capacity": self.capacity, "scale": self.scale, "N0": self.N0,
                "status": self.status, "log": self.log}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _num(v):
    return v if np.isfinite(v) else repr(float(v))


def capacity(A: CompactSet, alpha: float, N0: float | None = None, k: int = 128,
             tol: float = 1e-2, max_refinements: int = 12, max_points: int = 4096,
             fw_tol: float | None = None) -> CapacityEstimate:
    """Cap_alpha(A) = 1 / min over probability measures of the energy.

    Each refinement meshes A with about k points (k doubles every round),
    mollifies at half the mesh spacing and minimises by Frank-Wolfe. The loop
    stops when two successive capacities agree within 2 tol, or when the
    minimal energy exceeds 1/tol (capacity certified 0).
    """
    n = A.dim
    if N0 is None:
        N0 = default_n0(max(A.bound(), 1.0), n)
    if alpha < 0:
        pts, h = A.mesh(1)
        return CapacityEstimate(alpha, 1.0, 1.0, h, N0, "exact",
                                [{"k": 1, "energy": 1.0, "capacity": 1.0}],
                                DiscreteMeasure.uniform(pts[:1]))
    fw_tol = tol / 10 if fw_tol is None else fw_tol
    log = []
    prev = None
    kk = int(k)
    for r in range(max_refinements):
        if A.is_singleton:
            pts, h = A.mesh(1)
            eps = N0 * 10.0 ** (-(2 ** (r + 1)))
        else:
            pts, h = A.mesh(min(kk, max_points))
            eps = h / 2
        Q = energy_matrix(pts, alpha, N0, eps)
        res = frank_wolfe(Q, fw_tol)
        e = res.value
        cap = 1.0 / e if e > 0 else np.inf
        log.append({"round": r, "k": int(len(pts)), "eps": eps, "energy": e, "capacity": cap,
                    "fw_gap": res.gap, "fw_iterations": res.iterations})
        mu = DiscreteMeasure(pts, res.weights / res.weights.sum())
        if e > 1.0 / tol:
            return CapacityEstimate(alpha, np.inf, 0.0, h, N0, "divergent", log, mu)
        if prev is not None and abs(cap - prev) <= 2 * tol * cap:
            return CapacityEstimate(alpha, e, cap, h, N0, "converged", log, mu)
        if not A.is_singleton and len(pts) >= max_points and prev is not None:
            break
        prev = cap
        kk *= 2
    return CapacityEstimate(alpha, e, cap, h, N0, "inconclusive", log, mu)


def brute_force_capacity(points, alpha: float, N0: float, eps: float, iters: int = 4000,
                         tol: float = 1e-9) -> float:
    """Independent check: projected gradient with sorting-based simplex
    projection and a fixed step 1/L, L the largest eigenvalue bound of 2Q."""
    pts = np.atleast_2d(points)
    Q = energy_matrix(pts, alpha, N0, eps)
    L = 2.0 * np.max(np.sum(np.abs(Q), axis=1))
    k = len(pts)
    w = np.full(k, 1.0 / k)
    f_old = w @ Q @ w
    for _ in range(iters):
        w = _project_simplex(w - 2.0 * (Q @ w) / L)
        f = w @ Q @ w
        if abs(f_old - f) <= tol * f:
            break
        f_old = f
    return float(1.0 / (w @ Q @ w))


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = ind[u - css / ind > 0][-1]
    return np.maximum(v - css[rho - 1] / rho, 0.0)


# --------------------------------------------------------------------------
# Hausdorff content


def hausdorff_content(A: CompactSet, alpha: float, eps: float, resolution: int = 8) -> float:
    """Sum of (2 eps)^alpha over a greedy cover of A by balls of radius eps.

    Points of a mesh of A (spacing eps / resolution) are covered greedily:
    take the first uncovered point and, among mesh points within eps of it,
    centre the ball where it covers the most uncovered points.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if alpha < 0:
        return math.inf
    if A.is_singleton:
        return (2 * eps) ** alpha
    lo, hi = A.bbox()
    live = np.count_nonzero(hi > lo)
    vol = np.prod((hi - lo)[hi > lo])
    k = int(vol / (eps / resolution) ** live) + 2
    pts, hm = A.mesh(min(k, 200000))
    # a mesh point counts as covered only with its whole cell inside the ball
    reach = eps - 0.5 * hm * math.sqrt(A.dim)
    uncovered = np.ones(len(pts), dtype=bool)
    balls = 0
    while uncovered.any():
        i = int(np.argmax(uncovered))
        near = np.flatnonzero(np.linalg.norm(pts - pts[i], axis=1) <= eps)
        best, best_cov = None, -1
        for c in near[:: max(1, len(near) // 64)]:
            cov = np.count_nonzero(uncovered & (np.linalg.norm(pts - pts[c], axis=1) <= reach))
            if cov > best_cov:
                best, best_cov = c, cov
        uncovered &= np.linalg.norm(pts - pts[best], axis=1) > reach
        balls += 1
    return balls * (2 * eps) ** alpha


# --------------------------------------------------------------------------
# the double-integral lemma


@dataclass
class LemmaReport:
    a: float
    b: float
    beta: float
    hurst: float
    p: float
    alpha: float
    r: np.ndarray
    lhs: np.ndarray
    kernel: np.ndarray
    ratio: np.ndarray
    max_decade_variation: float

    @property
    def sup_ratio(self) -> float:
        return float(np.max(self.ratio))

    @property
    def passed(self) -> bool:
        return bool(np.all(np.isfinite(self.ratio)) and self.max_decade_variation < 2.0)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b, "beta": self.beta, "H": self.hurst, "p": self.p,
                "alpha": self.alpha, "sup_ratio": self.sup_ratio,
                "max_decade_variation": self.max_decade_variation, "passed": self.passed,
                "r": self.r.tolist(), "ratio": self.ratio.tolist()}


def _lemma_lhs(L, beta, H, p, r, nodes):
    """2 int_0^L (L - u) u^{-H beta} min(u^H / r, 1)^p du."""
    e_in = H * (p - beta)  # exponent below the kink u* = r^{1/H}
    ustar = min(r ** (1.0 / H), L)
    half = nodes // 2
    total = 0.0
    # [0, u*]: u^{e_in} (L - u) r^{-p}, Gauss-Jacobi with weight u^{e_in}
    x, w = special.roots_jacobi(half, 0.0, e_in)
    u = 0.5 * ustar * (x + 1)
    total += (0.5 * ustar) ** (1 + e_in) * np.sum(w * (L - u)) / r ** p
    if ustar < L:
        # [u*, L]: u^{-H beta} (L - u), geometric panels in u
        edges = np.geomspace(ustar, L, 33)
        x, w = np.polynomial.legendre.leggauss(max(4, half // 32))
        for lo, hi in zip(edges[:-1], edges[1:]):
            u = 0.5 * (hi - lo) * (x + 1) + lo
            total += 0.5 * (hi - lo) * np.sum(w * (L - u) * u ** (-H * beta))
    return 2.0 * total


def verify_lemma_le(a: float, b: float, beta: float, H: float, p: float, N: float = 1.0,
                    r_grid=None, nodes: int = 4096, N0: float | None = None) -> LemmaReport:
    """Ratio of the double integral int_a^b int_a^b |t-s|^{-H beta}
    (|t-s|^H / r ^ 1)^p ds dt to K_alpha(r), alpha = beta - 1/H, over r."""
    if not p > beta:
        raise ValueError("need p > beta")
    if not 0 <= a < b:
        raise ValueError("need 0 <= a < b")
    alpha = beta - 1.0 / H
    if r_grid is None:
        r_grid = N * np.logspace(-8, -2, 25)
    r = np.asarray(r_grid, dtype=float)
    N0 = 4.0 * math.e * max(N, 1.0) if N0 is None else N0
    lhs = np.array([_lemma_lhs(b - a, beta, H, p, ri, nodes) for ri in r])
    ker = np.asarray(newton_kernel(alpha, r, N0), dtype=float)
    ratio = lhs / ker
    lr = np.log10(r)
    var = 1.0
    for i in range(r.size):
        win = (lr >= lr[i]) & (lr <= lr[i] + 1.0 + 1e-12)
        var = max(var, float(ratio[win].max() / ratio[win].min()))
    return LemmaReport(a, b, beta, H, p, alpha, r, lhs, ker, ratio, var)
