"""Logistic fits of accuracy-vs-flip-probability curves and resilience metrics.

The fitted form, in ``x = log10(p)``, is::

    F(x) = 2 * delta_a / (1 + exp((x - mu_log) / sigma)) + a_min

with ``a_min = 1/K`` and ``delta_a = (a_max - a_min) / 2`` held fixed; only
``mu_log`` and ``sigma`` are optimised.  The midpoint noise level is
``10 ** mu_log``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

FIT_SPACE = "log10(p)"


@dataclass
class AccuracyCurve:
    p: np.ndarray
    accuracy_mean: np.ndarray
    accuracy_std: np.ndarray
    repetitions: np.ndarray
    num_classes: int
    a_max: float
    n_samples: int | None = None  # evaluated images per accuracy value

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.accuracy_mean = np.asarray(self.accuracy_mean, dtype=np.float64)
        self.accuracy_std = np.asarray(self.accuracy_std, dtype=np.float64)
        self.repetitions = np.broadcast_to(np.asarray(self.repetitions, dtype=np.int64), self.p.shape).copy()
        if not (self.p.shape == self.accuracy_mean.shape == self.accuracy_std.shape):
            raise ValueError("p, accuracy_mean and accuracy_std must have equal length")
        if np.any(np.diff(self.p) <= 0):
            raise ValueError("p values must be strictly increasing")
        if np.any(self.repetitions < 1):
            raise ValueError("repetitions must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @classmethod
    def from_samples(cls, p, accuracies, num_classes: int, a_max: float, n_samples=None) -> AccuracyCurve:
        """Build from a ``(points, repetitions)`` array of raw accuracies."""
        acc = np.asarray(accuracies, dtype=np.float64)
        reps = acc.shape[1]
        std = acc.std(axis=1, ddof=1) if reps > 1 else np.zeros(len(acc))
        return cls(p, acc.mean(axis=1), std, np.full(len(acc), reps), num_classes, a_max, n_samples)

    @property
    def a_min(self) -> float:
        return 1.0 / self.num_classes

    def standard_error(self) -> np.ndarray:
        """Standard error of each mean accuracy.

        The spread over repetitions, floored by the binomial error of a
        proportion measured on ``n_samples * repetitions`` predictions (with
        five repetitions the empirical spread alone can collapse to zero).
        """
        se = self.accuracy_std / np.sqrt(self.repetitions)
        if self.n_samples:
            a = np.clip(self.accuracy_mean, 0.0, 1.0)
            se = np.maximum(se, np.sqrt(a * (1 - a) / (self.n_samples * self.repetitions)))
        return se


@dataclass
class LogisticFit:
    mu: float
    sigma: float
    delta_a: float
    a_min: float
    a_max: float
    rss: float
    converged: bool
    mu_log: float = math.nan
    iterations: int = 0
    diagnostic: str = ""
    fit_space: str = field(default=FIT_SPACE)

    def __call__(self, p):
        """Fitted accuracy at flip probability ``p``."""
        return logistic(np.log10(p), self.mu_log, self.sigma, self.delta_a, self.a_min)

    def to_dict(self) -> dict:
        return asdict(self)


def _lower_tail(z):
    """1 / (1 + exp(z)) without overflow."""
    return 0.5 * (1.0 - np.tanh(0.5 * np.asarray(z, dtype=np.float64)))


def logistic(x, mu_log, sigma, delta_a, a_min):
    return 2.0 * delta_a * _lower_tail((np.asarray(x, dtype=np.float64) - mu_log) / sigma) + a_min


def _crossing(x, y, level):
    """First abscissa where ``y`` falls through ``level`` (linear interpolation)."""
    below = np.flatnonzero(y < level)
    i = below[0]
    if i == 0:
        return x[0]
    x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
    return x0 + (y0 - level) * (x1 - x0) / (y0 - y1)


def fit_logistic(curve: AccuracyCurve, tol: float = 1e-10, max_iter: int = 500) -> LogisticFit:
    """Damped Gauss-Newton (Levenberg-Marquardt) fit of ``(mu_log, ln sigma)``."""
    x = np.log10(curve.p)
    y = curve.accuracy_mean
    if x.size < 4:
        raise ValueError(f"need at least 4 points, got {x.size}")
    if x[-1] - x[0] < 1.0:
        raise ValueError("probability grid must span at least one decade")

    a_min = curve.a_min
    a_max = float(curve.a_max)
    delta_a = (a_max - a_min) / 2.0
    level = a_min + delta_a

    def result(mu_log, sigma, rss, converged, it=0, diag=""):
        mu = 10.0 ** mu_log if np.isfinite(mu_log) else math.nan
        return LogisticFit(mu, sigma, delta_a, a_min, a_max, rss, converged, mu_log, it, diag)

    if delta_a <= 0:
        return result(math.nan, math.nan, math.nan, False, diag="peak accuracy is not above chance level")
    if not np.any(y < a_min + delta_a / 2.0):
        return result(math.nan, math.nan, math.nan, False,
                      diag="curve never drops below a_min + delta_a/2 within the probed range")
    if np.all(y < level):
        return result(math.nan, math.nan, math.nan, False,
                      diag="curve is below its midpoint over the whole probed range")

    def model(theta):
        mu_log, log_s = theta
        s = math.exp(log_s)
        z = (x - mu_log) / s
        lt = _lower_tail(z)
        f = 2.0 * delta_a * lt + a_min
        d = 2.0 * delta_a * lt * (1.0 - lt)
        jac = np.column_stack([d / s, d * z])
        return f - y, jac

    theta = np.array([_crossing(x, y, level), math.log(0.3)])
    r, jac = model(theta)
    rss = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        a = jac.T @ jac
        g = jac.T @ r
        try:
            step = np.linalg.solve(a + lam * np.diag(np.diag(a) + 1e-12), -g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        cand = theta + step
        r_new, jac_new = model(cand)
        rss_new = float(r_new @ r_new)
        if rss_new <= rss:
            theta, r, jac, rss = cand, r_new, jac_new, rss_new
            lam = max(lam / 10.0, 1e-15)
            if np.max(np.abs(step)) <= tol * (1.0 + np.max(np.abs(theta))):
                converged = True
                break
        else:
            lam *= 10.0
            if lam > 1e15:
                # no downhill step left: stationary to working precision
                converged = np.max(np.abs(jac.T @ r)) <= 1e-8
                break

    mu_log, sigma = float(theta[0]), math.exp(theta[1])
    diag = ""
    if not converged:
        diag = f"optimizer stopped after {it} iterations without meeting tolerance"
    elif not (x[0] <= mu_log <= x[-1]):
        converged = False
        diag = f"midpoint 10^{mu_log:.3f} lies outside the probed range"
    return result(mu_log, sigma, rss, converged, it, diag)


def midpoint_noise(fit: LogisticFit) -> float:
    if not fit.converged:
        raise ValueError(f"fit did not converge: {fit.diagnostic}")
    return fit.mu


def noise_at_accuracy_fraction(fit: LogisticFit, fraction: float) -> float:
    """Flip probability at which the fitted accuracy equals ``fraction * a_max``."""
    if not fit.converged:
        raise ValueError(f"fit did not converge: {fit.diagnostic}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    target = fraction * fit.a_max
    if target <= fit.a_min:
        raise ValueError(f"target accuracy {target:.4g} is not above the asymptote a_min={fit.a_min:.4g}")
    ratio = 2.0 * fit.delta_a / (target - fit.a_min) - 1.0
    if ratio <= 0.0:
        return 0.0
    return 10.0 ** (fit.mu_log + fit.sigma * math.log(ratio))


def monotone_violations(curve: AccuracyCurve, k: float = 2.0) -> list[tuple[int, float]]:
    """Grid steps ``i -> i+1`` where the mean rises by more than ``k`` combined standard errors."""
    se = curve.standard_error()
    rise = np.diff(curve.accuracy_mean)
    bound = k * np.hypot(se[:-1], se[1:])
    return [(int(i), float(rise[i])) for i in np.flatnonzero(rise > bound)]


def pointwise_disagreements(a: AccuracyCurve, b: AccuracyCurve, k: float = 2.0) -> list[tuple[float, float]]:
    """Grid points where two curves differ by more than ``k`` combined standard errors."""
    if not np.array_equal(a.p, b.p):
        raise ValueError("curves must share the probability grid")
    se = np.hypot(a.standard_error(), b.standard_error())
    diff = np.abs(a.accuracy_mean - b.accuracy_mean)
    return [(float(p), float(d)) for p, d, s in zip(a.p, diff, se) if d > k * s]
