"""Exact algebra on finite sums of c * x^m * exp(-a*x) over [0, inf).

All three service-time families (and every convolution among them, the
idle-tilted density, and Erlang-stage convolutions) live in this class of
functions, which is closed under convolution.  Working symbolically here
keeps density ratios and quadrature integrands exact and cheap to
evaluate on numpy arrays.

Rates within RATE_SNAP of each other are merged before convolving; the
a != b branch of the convolution divides by (a-b)^k and loses precision
for nearly equal rates.
"""

from __future__ import annotations

import math
from typing import Iterable, Tuple

import numpy as np

RATE_SNAP = 1e-9

Term = Tuple[float, int, float]  # (coefficient, power, rate)


class ExpPoly:
    """f(x) = sum of c * x^m * exp(-a*x), represented as (c, m, a) terms."""

    __slots__ = ("terms",)

    def __init__(self, terms: Iterable[Term]):
        merged: dict = {}
        for c, m, a in terms:
            if c == 0.0:
                continue
            key = (int(m), float(a))
            merged[key] = merged.get(key, 0.0) + float(c)
        self.terms = tuple((c, m, a) for (m, a), c in sorted(merged.items()) if c != 0.0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for c, m, a in self.terms:
            out = out + c * x**m * np.exp(-a * x)
        return float(out) if out.ndim == 0 else out

    def __add__(self, other: "ExpPoly") -> "ExpPoly":
        return ExpPoly(self.terms + other.terms)

    def scaled(self, k: float) -> "ExpPoly":
        return ExpPoly((c * k, m, a) for c, m, a in self.terms)

    def convolve(self, other: "ExpPoly") -> "ExpPoly":
        out = []
        for c1, m1, a1 in self.terms:
            for c2, m2, a2 in other.terms:
                out.extend(_conv_term(c1, m1, a1, c2, m2, a2))
        return ExpPoly(out)

    def integral(self) -> float:
        """Integral over [0, inf)."""
        return sum(c * math.factorial(m) / a ** (m + 1) for c, m, a in self.terms)

    def lst(self, s: float) -> float:
        """Laplace transform at s >= 0."""
        return sum(c * math.factorial(m) / (a + s) ** (m + 1) for c, m, a in self.terms)

    def first_moment(self) -> float:
        """Integral of x*f(x) over [0, inf)."""
        return sum(c * math.factorial(m + 1) / a ** (m + 2) for c, m, a in self.terms)

    def tail(self) -> "ExpPoly":
        """T(x) = integral of f over [x, inf), again an ExpPoly."""
        out = []
        for c, m, a in self.terms:
            for i in range(m + 1):
                out.append((c * math.factorial(m) / math.factorial(m - i) / a ** (i + 1), m - i, a))
        return ExpPoly(out)

    def shift_mix(self, lam: float) -> "ExpPoly":
        """g(t) = integral over v of lam*exp(-lam*v) * f(v + t) dv.

        Expands f(v+t) binomially; each (c, m, a) term contributes
        c * C(m,j) * t^j e^{-a t} * lam * (m-j)! / (lam+a)^{m-j+1}.
        """
        out = []
        for c, m, a in self.terms:
            for j in range(m + 1):
                w = lam * math.factorial(m - j) / (lam + a) ** (m - j + 1)
                out.append((c * math.comb(m, j) * w, j, a))
        return ExpPoly(out)

    def leading(self) -> Term:
        """Lowest-power term (behaviour as x -> 0), coefficient summed over rates."""
        if not self.terms:
            return (0.0, 0, 1.0)
        m0 = min(m for _, m, _ in self.terms)
        c0 = sum(c for c, m, _ in self.terms if m == m0)
        return (c0, m0, 0.0)


def _conv_term(c1, m1, a1, c2, m2, a2):
    """Convolution of c1*x^m1*e^(-a1 x) with c2*x^m2*e^(-a2 x)."""
    c = c1 * c2
    if abs(a1 - a2) <= RATE_SNAP * max(a1, a2):
        # int_0^x u^m1 (x-u)^m2 du = B(m1+1, m2+1) x^(m1+m2+1)
        coef = c * math.factorial(m1) * math.factorial(m2) / math.factorial(m1 + m2 + 1)
        return [(coef, m1 + m2 + 1, a1)]
    d = a1 - a2
    out = []
    for j in range(m2 + 1):
        base = c * math.comb(m2, j) * (-1.0) ** j
        k = m1 + j
        # int_0^x u^k e^{-d u} du = k!/d^(k+1) - e^{-d x} sum_i (k!/i!) x^i / d^(k+1-i)
        out.append((base * math.factorial(k) / d ** (k + 1), m2 - j, a2))
        for i in range(k + 1):
            out.append(
                (-base * math.factorial(k) / math.factorial(i) / d ** (k + 1 - i), m2 - j + i, a1)
            )
    return out


def from_dist(dist) -> ExpPoly:
    """ExpPoly form of a ServiceDist pdf."""
    from .dists import Erlang, Exponential, HyperExponential

    if isinstance(dist, Exponential):
        return ExpPoly([(dist.rate, 0, dist.rate)])
    if isinstance(dist, HyperExponential):
        return ExpPoly([(w * r, 0, r) for w, r in dist.branches])
    if isinstance(dist, Erlang):
        k, nu = dist.stages, dist.stage_rate
        return ExpPoly([(nu**k / math.factorial(k - 1), k - 1, nu)])
    raise TypeError(f"not a ServiceDist: {dist!r}")


def erlang_stage_pdf(s: int, rate: float) -> ExpPoly:
    """pdf of a sum of s iid exponentials with the given rate."""
    return ExpPoly([(rate**s / math.factorial(s - 1), s - 1, rate)])


def shift_basis(dist) -> list:
    """Decompose f(v + t) = sum_b phi_b(v) * psi_b(t) with phi_b(v) = c_b v^p e^{-a v}.

    Returns a list of ((c_b, p_b, a_b), psi_b) pairs where psi_b is an ExpPoly
    in t.  Exact for all three families; the Erlang case expands the
    polynomial factor binomially.
    """
    from .dists import Erlang, Exponential, HyperExponential

    if isinstance(dist, Exponential):
        r = dist.rate
        return [((1.0, 0, r), ExpPoly([(r, 0, r)]))]
    if isinstance(dist, HyperExponential):
        return [((w, 0, r), ExpPoly([(r, 0, r)])) for w, r in dist.branches]
    if isinstance(dist, Erlang):
        k, nu = dist.stages, dist.stage_rate
        c = nu**k / math.factorial(k - 1)
        out = []
        for j in range(k):
            out.append(((c * math.comb(k - 1, j), k - 1 - j, nu), ExpPoly([(1.0, j, nu)])))
        return out
    raise TypeError(f"not a ServiceDist: {dist!r}")
