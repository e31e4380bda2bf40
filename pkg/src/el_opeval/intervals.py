"""Wilks intervals and the chi-square quantiles that calibrate them."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import LoggedDataset, log_el_value, mele
from .errors import UnsupportedDf, ValidationError

# Wichura (1988), algorithm AS 241, PPND16: |relative error| < 1e-16
_A = (
    3.3871328727963666080e0, 1.3314166789178437745e2, 1.9715909503065514427e3,
    1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
    3.3430575583588128105e4, 2.5090809287301226727e3,
)
_B = (
    1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
    5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
    2.8729085735721942674e4, 5.2264952788528545610e3,
)
_C = (
    1.42343711074968357734e0, 4.63033784615654529590e0, 5.76949722146069140550e0,
    3.64784832476320460504e0, 1.27045825245236838258e0, 2.41780725177450611770e-1,
    2.27238449892691845833e-2, 7.74545014278341407640e-4,
)
_D = (
    1.0, 2.05319162663775882187e0, 1.67638483018380384940e0,
    6.89767334985100004550e-1, 1.48103976427480074590e-1, 1.51986665636164571966e-2,
    5.47593808499534494600e-4, 1.05075007164441684324e-9,
)
_E = (
    6.65790464350110377720e0, 5.46378491116411436990e0, 1.78482653991729133580e0,
    2.96560571828504891230e-1, 2.65321895265761230930e-2, 1.24266094738807843860e-3,
    2.71155556874348757815e-5, 2.01033439929228813265e-7,
)
_F = (
    1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
    1.48753612908506148525e-2, 7.86869131145613259100e-4, 1.84631831751005468180e-5,
    1.42151175831644588870e-7, 2.04426310338993978564e-15,
)


def _poly(coef, x):
    acc = 0.0
    for c in reversed(coef):
        acc = acc * x + c
    return acc


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        if p == 0.0:
            return -math.inf
        if p == 1.0:
            return math.inf
        raise ValidationError(f"probability {p} outside [0, 1]")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0.0 else val


def chi2_quantile(df: int, q: float) -> float:
    """Quantile of the chi-square distribution with one or two degrees of freedom."""
    if df not in (1, 2):
        raise UnsupportedDf(f"chi-square quantile implemented for df 1 and 2 only, got {df}")
    if not 0.0 <= q < 1.0:
        raise ValidationError(f"quantile level {q} outside [0, 1)")
    if df == 2:
        return -2.0 * math.log1p(-q)
    if q == 0.0:
        return 0.0
    z = normal_quantile(0.5 + 0.5 * q)
    return z * z


@dataclass(frozen=True)
class WilksInterval:
    lo: float
    hi: float
    alpha: float
    threshold_log: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def __contains__(self, v: float) -> bool:
        return self.lo <= v <= self.hi


_MAX_BISECT = 80
_TOL_V = 1e-10


def _crossing(ratio, inside: float, limit: float, threshold: float) -> float:
    """Locate where ``ratio`` falls through ``threshold`` between ``inside`` and ``limit``.

    ``ratio(inside) >= threshold`` is assumed; returns ``limit`` when the
    whole segment stays above it. The bracket grows geometrically first.
    """
    span = limit - inside
    if span == 0.0:
        return limit
    step = math.copysign(min(abs(span), 1e-3), span)
    good = inside
    while True:
        x = good + step
        if abs(x - inside) >= abs(span):
            x = limit
        if ratio(x) < threshold:
            bad = x
            break
        if x == limit:
            return limit
        good = x
        step *= 2.0
    for _ in range(_MAX_BISECT):
        if abs(bad - good) <= _TOL_V:
            break
        mid = 0.5 * (good + bad)
        if ratio(mid) >= threshold:
            good = mid
        else:
            bad = mid
    return good


def wilks_interval(ds: LoggedDataset, alpha: float) -> WilksInterval:
    """Invert the chi-square calibrated log-EL ratio test for a single policy."""
    if ds.policy_count != 1:
        raise ValidationError("Wilks interval is defined here for a single policy")
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"alpha {alpha} outside (0, 1)")
    threshold = -0.5 * chi2_quantile(1, 1.0 - alpha)
    m = mele(ds)
    top = m.max_loglik

    def ratio(v):
        return log_el_value(ds, [v]) - top

    lo_box, hi_box = float(m.value_box[0, 0]), float(m.value_box[0, 1])
    lo = _crossing(ratio, lo_box, 0.0, threshold)
    hi = _crossing(ratio, hi_box, 1.0, threshold)
    return WilksInterval(lo, hi, alpha, threshold)


def wilks_threshold_ratio(alpha: float) -> float:
    """Relative likelihood at the edge of the (1 - alpha) Wilks interval."""
    return float(np.exp(-0.5 * chi2_quantile(1, 1.0 - alpha)))
