"""Real-argument special functions: gamma, Kummer's 1F1, Hermite functions.

Self-contained implementations sized for the moderate argument ranges the
reduction machinery produces:

* gamma via the Lanczos approximation (g = 7, 9 coefficients) with the
  reflection formula below 1/2; at least 12 significant digits for |x| <= 50.
* Kummer's confluent hypergeometric 1F1(a; b; x) by direct ascending series
  for x >= 0 and the Kummer transformation 1F1(a;b;x) = e^x 1F1(b-a;b;-x)
  for x < 0, which keeps every series term positive-argument and the error
  model simple.  No asymptotic branch: arguments are guarded to |x| <= 700.
* The Hermite function of real order through the standard two-term 1F1
  connection

      H_nu(x) = 2^nu sqrt(pi) [ 1F1(-nu/2; 1/2; x^2) / Gamma((1-nu)/2)
                               - 2x 1F1((1-nu)/2; 3/2; x^2) / Gamma(-nu/2) ],

  physicists' normalization (H_1(x) = 2x); for nonnegative integer order it
  reduces to the Hermite polynomial because one of the 1/Gamma factors
  vanishes exactly at the pole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import EngineError


class SpecialFunctionError(EngineError):
    pass


class PoleError(SpecialFunctionError):
    pass


class SeriesError(SpecialFunctionError):
    def __init__(self, message: str, terms_used: int | None = None):
        super().__init__(message)
        self.terms_used = terms_used


@dataclass(frozen=True)
class SpecialFnResult:
    value: float
    est_error: float
    terms_used: int

    def __post_init__(self):
        if self.est_error < 0.0 or self.terms_used < 1:
            raise ValueError("invalid SpecialFnResult fields")


_LANCZOS_G = 7.0
_LANCZOS_C = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_SQRT_TWO_PI = math.sqrt(2.0 * math.pi)


def _is_nonpositive_integer(x: float, tol: float = 0.0) -> bool:
    if x > 0.5:
        return False
    n = round(x)
    return abs(x - n) <= tol and n <= 0


def gamma_fn(x: float) -> float:
    """Gamma function for real x away from the poles at 0, -1, -2, ..."""
    if _is_nonpositive_integer(x):
        raise PoleError(f"gamma pole at x={x}")
    if x < 0.5:
        # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
        s = math.sin(math.pi * x)
        if s == 0.0:
            raise PoleError(f"gamma pole at x={x}")
        return math.pi / (s * gamma_fn(1.0 - x))
    z = x - 1.0
    a = _LANCZOS_C[0]
    for i in range(1, len(_LANCZOS_C)):
        a += _LANCZOS_C[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _SQRT_TWO_PI * t ** (z + 0.5) * math.exp(-t) * a


def kummer_1f1(a: float, b: float, x: float, max_terms: int = 1500) -> SpecialFnResult:
    """Kummer's confluent hypergeometric function 1F1(a; b; x)."""
    if _is_nonpositive_integer(b):
        raise PoleError(f"1F1 undefined for nonpositive integer b={b}")
    if abs(x) > 700.0:
        raise SpecialFunctionError(f"|x|={abs(x)} exceeds the overflow guard 700")
    if x < 0.0:
        inner = kummer_1f1(b - a, b, -x, max_terms)
        scale = math.exp(x)
        return SpecialFnResult(
            value=scale * inner.value,
            est_error=scale * inner.est_error + abs(scale * inner.value) * 1e-16,
            terms_used=inner.terms_used,
        )
    # ascending series, all terms of one sign for a >= 0; for a < 0 the series
    # terminates (integer a) or alternates only until k exceeds -a
    term = 1.0
    total = 1.0
    max_partial = 1.0
    k = 0
    while k < max_terms:
        ratio_num = a + k
        if ratio_num == 0.0:
            break  # terminating polynomial
        term *= ratio_num * x / ((b + k) * (k + 1))
        total += term
        max_partial = max(max_partial, abs(total))
        k += 1
        if abs(term) <= 1e-17 * max(abs(total), 1e-300):
            break
    else:
        raise SeriesError(
            f"1F1 series did not converge for a={a}, b={b}, x={x}", terms_used=k
        )
    terms_used = max(k + 1, 1)
    # round-off accumulates with the largest partial sum; truncation is
    # bounded by the last term for the geometric-decay tail
    est = abs(term) + terms_used * 1e-16 * max_partial
    return SpecialFnResult(value=total, est_error=est, terms_used=terms_used)


def kummer_1f1_derivative(a: float, b: float, x: float) -> float:
    """d/dx 1F1(a; b; x) = (a/b) 1F1(a+1; b+1; x)."""
    return (a / b) * kummer_1f1(a + 1.0, b + 1.0, x).value


def hermite_fn(nu: float, x: float) -> SpecialFnResult:
    """Hermite function H_nu(x) of real order, physicists' normalization."""
    if abs(x) > 25.0:
        raise SpecialFunctionError(f"|x|={abs(x)} exceeds the Hermite guard 25")
    x2 = x * x
    pole_tol = 1e-12
    value = 0.0
    err = 0.0
    terms = 1
    # first branch: 1F1(-nu/2; 1/2; x^2) / Gamma((1-nu)/2)
    g1_arg = 0.5 * (1.0 - nu)
    if not _is_nonpositive_integer(g1_arg, pole_tol):
        f1 = kummer_1f1(-0.5 * nu, 0.5, x2)
        g1 = gamma_fn(g1_arg)
        value += f1.value / g1
        err += f1.est_error / abs(g1)
        terms += f1.terms_used
    # second branch: -2x 1F1((1-nu)/2; 3/2; x^2) / Gamma(-nu/2)
    g2_arg = -0.5 * nu
    if not _is_nonpositive_integer(g2_arg, pole_tol):
        f2 = kummer_1f1(0.5 * (1.0 - nu), 1.5, x2)
        g2 = gamma_fn(g2_arg)
        value -= 2.0 * x * f2.value / g2
        err += 2.0 * abs(x) * f2.est_error / abs(g2)
        terms += f2.terms_used
    scale = 2.0 ** nu * math.sqrt(math.pi)
    return SpecialFnResult(value=scale * value, est_error=scale * err, terms_used=terms)


def hermite_fn_derivative(nu: float, x: float) -> float:
    """d/dx H_nu(x) = 2 nu H_{nu-1}(x)."""
    return 2.0 * nu * hermite_fn(nu - 1.0, x).value
