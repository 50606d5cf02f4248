"""Quadrature helpers for semi-infinite integrals.

scipy's QAGI transform handles the [0, inf) domain; tolerances follow the
package-wide policy (relative 1e-9, absolute floor 1e-14).  Divergent
integrals are recognized by a log-scale slope test on truncated values at
geometric cutoffs rather than by trusting a quadrature error estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import NumericError

REL_TOL = 1e-9
ABS_FLOOR = 1e-14


def quad_0_inf(f, rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR) -> float:
    val, err = integrate.quad(f, 0.0, np.inf, epsabs=abs_floor, epsrel=rel_tol, limit=400)
    if not math.isfinite(val):
        raise NumericError(f"quadrature returned non-finite value {val}")
    if err > max(abs_floor, 1e-5 * max(1.0, abs(val))):
        raise NumericError(f"quadrature did not converge: value={val}, err_estimate={err}")
    return val


def quad_0_a(f, a: float, rel_tol: float = REL_TOL, abs_floor: float = ABS_FLOOR) -> float:
    val, _err = integrate.quad(f, 0.0, a, epsabs=abs_floor, epsrel=rel_tol, limit=400)
    return val


@dataclass(frozen=True)
class DivergenceVerdict:
    """Outcome of an improper integral that fails to stabilize.

    ``cutoffs`` and ``truncated`` trace the growth of the truncated
    integral; ``log_slope`` is the fitted d(log I)/d(log T) over the last
    two cutoffs.
    """

    cutoffs: tuple
    truncated: tuple
    log_slope: float

    @property
    def finite(self) -> bool:
        return False

    def to_json(self) -> dict:
        return {
            "finite": False,
            "cutoffs": list(self.cutoffs),
            "truncated": list(self.truncated),
            "log_slope": self.log_slope,
        }


def growth_curve(f, min_rate: float, cutoff_multipliers=(10.0, 100.0, 1000.0)):
    """Truncated integrals of ``f`` at cutoffs scaled by 1/min_rate.

    Diagnostic quality only: evaluations are clipped into float range so
    exponentially divergent integrands still yield a usable curve.
    """
    import warnings

    cutoffs = tuple(m / min_rate for m in cutoff_multipliers)

    def clipped(t: float) -> float:
        val = f(t)
        if not math.isfinite(val):
            return 1e290
        return min(val, 1e290)

    vals = []
    lo = 0.0
    acc = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=integrate.IntegrationWarning)
        for hi in cutoffs:
            seg, _ = integrate.quad(
                lambda t: clipped(lo + t), 0.0, hi - lo, epsabs=1e-12, epsrel=1e-7, limit=200
            )
            acc += seg
            vals.append(min(acc, 1e290))
            lo = hi
    return cutoffs, tuple(vals)


def diverges(f, min_rate: float, slope_tol: float = 0.05):
    """Slope-test an improper integral of a non-negative integrand.

    Returns (verdict_or_None, cutoffs, truncated): a DivergenceVerdict when
    the truncated integral keeps growing on a log-log scale, else None.
    """
    cutoffs, vals = growth_curve(f, min_rate)
    if vals[-1] <= 0:
        return None, cutoffs, vals
    with np.errstate(divide="ignore"):
        slope = (math.log(max(vals[-1], 1e-300)) - math.log(max(vals[-2], 1e-300))) / (
            math.log(cutoffs[-1]) - math.log(cutoffs[-2])
        )
    if slope > slope_tol:
        return DivergenceVerdict(cutoffs, vals, slope), cutoffs, vals
    return None, cutoffs, vals
