"""Cycle-to-cycle write variability of an RRAM cell.

Written resistances in the low- and high-resistive state follow lognormal
distributions.  A read threshold is placed where a LRS cell reads as HRS
with the same probability as a HRS cell reads as LRS; that common
probability is the bit-flip probability used for noise sweeps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property


class SolverError(RuntimeError):
    pass


_SQRT1_2 = 0.7071067811865476
_SQRT1_2_LO = -4.833646656726457e-17  # 1/sqrt(2) - _SQRT1_2
_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


def _two_product(a: float, b: float) -> tuple[float, float]:
    """Dekker's error-free product: a * b == hi + lo exactly."""
    def split(v):
        c = 134217729.0 * v
        h = c - (c - v)
        return h, v - h

    hi = a * b
    ah, al = split(a)
    bh, bl = split(b)
    lo = ((ah * bh - hi) + ah * bl + al * bh) + al * bl
    return hi, lo


def std_normal_cdf(z: float) -> float:
    """Phi(z) through erfc, accurate in both tails.

    The argument -z/sqrt(2) is carried as hi + lo; its rounding error would
    otherwise be amplified by the slope of erfc (relative error ~ z**2 * eps).
    """
    if not math.isfinite(z):
        return 0.5 * math.erfc(-z)
    x, lo = _two_product(-z, _SQRT1_2)
    lo += -z * _SQRT1_2_LO
    # first-order Taylor term: d/dx erfc(x) = -2/sqrt(pi) * exp(-x**2)
    return 0.5 * (math.erfc(x) - _TWO_OVER_SQRT_PI * math.exp(-x * x) * lo)


@dataclass(frozen=True)
class ResistanceDistribution:
    log_median: float
    log_sigma: float

    def __post_init__(self):
        if not self.log_sigma > 0:
            raise ValueError(f"log_sigma must be positive, got {self.log_sigma}")

    @classmethod
    def from_median(cls, median_ohm: float, log_sigma: float) -> ResistanceDistribution:
        if median_ohm <= 0:
            raise ValueError(f"median resistance must be positive, got {median_ohm}")
        return cls(math.log(median_ohm), log_sigma)

    @property
    def median(self) -> float:
        return math.exp(self.log_median)

    def z(self, r: float) -> float:
        if not r > 0:
            raise ValueError(f"resistance must be positive, got {r}")
        return (math.log(r) - self.log_median) / self.log_sigma

    def cdf(self, r: float) -> float:
        return lognormal_cdf(r, self)

    def sf(self, r: float) -> float:
        """1 - cdf(r), without cancellation."""
        return std_normal_cdf(-self.z(r))


def lognormal_cdf(r: float, d: ResistanceDistribution) -> float:
    if r == math.inf:
        return 1.0
    return std_normal_cdf(d.z(r))


def solve_threshold(lrs: ResistanceDistribution, hrs: ResistanceDistribution) -> tuple[float, float]:
    """Threshold resistance and bit-flip probability with equal error in both directions.

    Bisection on ln R for the root of ``CDF_HRS(R) - (1 - CDF_LRS(R))``,
    carried to the limit of float resolution.
    """
    if not hrs.log_median > lrs.log_median:
        raise ValueError(
            f"HRS median ({hrs.median:.6g} ohm) must exceed LRS median ({lrs.median:.6g} ohm)"
        )

    def g(log_r: float) -> float:
        r = math.exp(log_r)
        return hrs.cdf(r) - lrs.sf(r)

    lo = lrs.log_median - 10.0 * lrs.log_sigma
    hi = hrs.log_median + 10.0 * hrs.log_sigma
    for _ in range(60):
        if g(lo) < 0 < g(hi):
            break
        width = hi - lo
        lo, hi = lo - width, hi + width
    else:
        raise SolverError(f"could not bracket threshold for lrs={lrs}, hrs={hrs}")

    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        gm = g(mid)
        if gm == 0.0:
            lo = hi = mid
            break
        if gm < 0:
            lo = mid
        else:
            hi = mid
    log_r = lo if abs(g(lo)) <= abs(g(hi)) else hi
    r_thresh = math.exp(log_r)
    return r_thresh, hrs.cdf(r_thresh)


@dataclass(frozen=True)
class DeviceModel:
    lrs: ResistanceDistribution
    hrs: ResistanceDistribution

    def __post_init__(self):
        if not self.hrs.log_median > self.lrs.log_median:
            raise ValueError("HRS median must exceed LRS median")

    @cached_property
    def _solution(self) -> tuple[float, float]:
        return solve_threshold(self.lrs, self.hrs)

    @property
    def r_thresh(self) -> float:
        return self._solution[0]

    @property
    def p_bf(self) -> float:
        return self._solution[1]

    @property
    def resistance_window(self) -> float:
        return self.hrs.median - self.lrs.median

    @classmethod
    def from_config(cls, cfg: dict) -> DeviceModel:
        """Build from ``{"lrs": {...}, "hrs": {...}}``; each entry gives either
        ``log_median`` or ``median_ohm``, plus ``log_sigma``."""

        def dist(d):
            if "log_median" in d:
                return ResistanceDistribution(float(d["log_median"]), float(d["log_sigma"]))
            return ResistanceDistribution.from_median(float(d["median_ohm"]), float(d["log_sigma"]))

        return cls(dist(cfg["lrs"]), dist(cfg["hrs"]))

    def to_dict(self) -> dict:
        return {
            "lrs": {"log_median": self.lrs.log_median, "log_sigma": self.lrs.log_sigma},
            "hrs": {"log_median": self.hrs.log_median, "log_sigma": self.hrs.log_sigma},
            "r_thresh": self.r_thresh,
            "p_bf": self.p_bf,
            "resistance_window": self.resistance_window,
        }
