"""Fit records shared by the verification suites."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats


@dataclass
class BoundFit:
    """Fitted exponents/constants with the band they are judged against.

    ``passed`` is True iff every fitted value named in ``band`` lies inside
    its (lo, hi) interval and every entry of ``checks`` is True.
    """

    name: str
    targets: dict
    fitted: dict
    band: dict
    checks: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        inside = all(lo <= self.fitted[k] <= hi for k, (lo, hi) in self.band.items())
        return bool(inside and all(self.checks.values()))

    def to_dict(self) -> dict:
        return _plain({"name": self.name, "targets": self.targets, "fitted": self.fitted,
                       "band": self.band, "checks": self.checks, "passed": self.passed,
                       "diagnostics": self.diagnostics})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    return obj


def rel_band(target: float, rel: float) -> tuple[float, float]:
    lo, hi = target * (1 - rel), target * (1 + rel)
    return (min(lo, hi), max(lo, hi))


def loglog_slope(x, y):
    """Least-squares slope of log y on log x with a 95% interval."""
    x, y = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    if x.size < 3:
        raise ValueError("a fit needs at least 3 points")
    r = stats.linregress(x, y)
    q = stats.t.ppf(0.975, x.size - 2) * r.stderr
    return float(r.slope), float(r.intercept), (float(r.slope - q), float(r.slope + q))


def median_of_batches(values, batches: int = 10) -> tuple[float, float]:
    """Median and spread (half inter-quartile range) of per-batch estimates."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return float("nan"), float("nan")
    q1, q2, q3 = np.percentile(v, [25, 50, 75])
    return float(q2), float(0.5 * (q3 - q1))
