"""Time-dependent market parameter curves.

A :class:`CoefficientCurve` represents one scalar market parameter (volatility,
interest rate, dividend yield, expected return) as a function of time on
[0, T].  Five kinds are supported: constant, piecewise-constant (right
continuous), piecewise-linear, exponential v0*exp(a*t), and sampled data
interpolated with monotone cubics.

Antiderivatives are always anchored at t = 0, which pins down every free
integration constant downstream.  The three transforms cover the integrals the
pricing machinery needs: f, f^2 and 1/f^2.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import EngineError
from .numerics import integrate_adaptive

TRANSFORMS = ("identity", "square", "inverse-square")

_QUAD_TOL = 1e-12


class CurveError(EngineError):
    pass


class CurveDomainError(CurveError):
    """Evaluation outside the curve's valid time range."""


class NonDifferentiableError(CurveError):
    """Derivative requested at a kink or jump. ``location`` is the time."""

    def __init__(self, message: str, location: float | None = None):
        super().__init__(message)
        self.location = location


def _apply(transform: str, v: float) -> float:
    if transform == "identity":
        return v
    if transform == "square":
        return v * v
    if transform == "inverse-square":
        return 1.0 / (v * v)
    raise ValueError(f"unknown transform {transform!r}")


class CoefficientCurve:
    """Immutable scalar curve with evaluation, derivatives and anchored
    antiderivatives.  Construct through the classmethods."""

    __slots__ = ("kind", "_params", "_pchip", "_dpchip", "_d2pchip", "_ipchip", "t_max")

    def __init__(self, kind, params, t_max=None):
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "_params", params)
        object.__setattr__(self, "t_max", t_max)
        object.__setattr__(self, "_pchip", None)
        object.__setattr__(self, "_dpchip", None)
        object.__setattr__(self, "_d2pchip", None)
        object.__setattr__(self, "_ipchip", None)
        if kind == "sampled":
            times, values = params
            p = PchipInterpolator(times, values, extrapolate=False)
            object.__setattr__(self, "_pchip", p)
            object.__setattr__(self, "_dpchip", p.derivative(1))
            object.__setattr__(self, "_d2pchip", p.derivative(2))
            object.__setattr__(self, "_ipchip", p.antiderivative(1))

    def __setattr__(self, name, value):
        raise AttributeError("CoefficientCurve is immutable")

    def __repr__(self):
        return f"CoefficientCurve(kind={self.kind!r}, params={self._params!r})"

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, value: float, t_max: float | None = None) -> "CoefficientCurve":
        return cls("constant", float(value), t_max)

    @classmethod
    def piecewise_constant(
        cls, times: Sequence[float], values: Sequence[float], t_max: float | None = None
    ) -> "CoefficientCurve":
        t, v = cls._check_breaks(times, values)
        return cls("piecewise_constant", (t, v), t_max)

    @classmethod
    def piecewise_linear(
        cls, times: Sequence[float], values: Sequence[float], t_max: float | None = None
    ) -> "CoefficientCurve":
        t, v = cls._check_breaks(times, values)
        if len(t) < 2:
            raise CurveError("piecewise-linear curves need at least two breakpoints")
        return cls("piecewise_linear", (t, v), t_max)

    @classmethod
    def exponential(cls, base: float, rate: float, t_max: float | None = None) -> "CoefficientCurve":
        return cls("exp", (float(base), float(rate)), t_max)

    @classmethod
    def sampled(
        cls, times: Sequence[float], values: Sequence[float], t_max: float | None = None
    ) -> "CoefficientCurve":
        t, v = cls._check_breaks(times, values)
        if len(t) < 2:
            raise CurveError("sampled curves need at least two samples")
        return cls("sampled", (t, v), t_max)

    @staticmethod
    def _check_breaks(times, values):
        t = np.asarray(times, dtype=float)
        v = np.asarray(values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape:
            raise CurveError("times and values must be 1-d and the same length")
        if t.size == 0:
            raise CurveError("empty breakpoint list")
        if t[0] != 0.0:
            raise CurveError("breakpoint times must start at 0")
        if np.any(np.diff(t) <= 0.0):
            raise CurveError("breakpoint times must be strictly increasing")
        return t, v

    # -- introspection ------------------------------------------------------

    def breakpoints(self) -> tuple[float, ...]:
        """Interior times where the curve is not smooth (used by ODE drivers
        to split integration ranges)."""
        if self.kind in ("piecewise_constant", "piecewise_linear", "sampled"):
            return tuple(float(t) for t in self._params[0][1:])
        return ()

    def minimum_on(self, lo: float, hi: float, samples: int = 257) -> float:
        """Lower bound of the curve on [lo, hi] (exact for the parametric
        kinds; sampled kinds use a dense probe)."""
        if self.kind == "constant":
            return self._params
        if self.kind == "piecewise_constant":
            return float(np.min(self._params[1]))
        if self.kind == "piecewise_linear":
            return float(np.min(self._params[1]))
        if self.kind == "exp":
            v0, a = self._params
            return min(v0 * math.exp(a * lo), v0 * math.exp(a * hi))
        ts = np.linspace(lo, hi, samples)
        return float(np.min(self._pchip(ts)))

    def _check_domain(self, t: float):
        if t < 0.0 or (self.t_max is not None and t > self.t_max * (1.0 + 1e-12)):
            hi = self.t_max if self.t_max is not None else math.inf
            raise CurveDomainError(f"time {t} outside curve domain [0, {hi}]")

    # -- evaluation ---------------------------------------------------------

    def eval(self, t: float) -> float:
        self._check_domain(t)
        k = self.kind
        if k == "constant":
            return self._params
        if k == "piecewise_constant":
            times, values = self._params
            i = int(np.searchsorted(times, t, side="right")) - 1
            return float(values[max(i, 0)])
        if k == "piecewise_linear":
            times, values = self._params
            if t >= times[-1]:
                return float(values[-1])
            return float(np.interp(t, times, values))
        if k == "exp":
            v0, a = self._params
            return v0 * math.exp(a * t)
        if t > self._params[0][-1]:
            raise CurveDomainError(f"time {t} beyond sampled range {self._params[0][-1]}")
        return float(self._pchip(t))

    def __call__(self, t: float) -> float:
        return self.eval(t)

    def derivative(self, t: float, order: int = 1, on_kink: str = "raise") -> float:
        """Analytic derivative of the given order (1 or 2).

        One-sided limits are rejected: asking at an interior breakpoint of a
        non-smooth kind raises :class:`NonDifferentiableError` unless
        ``on_kink="right"`` requests the right-continuous branch (used by the
        ODE drivers which integrate segment-by-segment).
        """
        if order not in (1, 2):
            raise ValueError("order must be 1 or 2")
        self._check_domain(t)
        k = self.kind
        if k == "constant":
            return 0.0
        if k == "exp":
            v0, a = self._params
            return v0 * (a ** order) * math.exp(a * t)
        if k in ("piecewise_constant", "piecewise_linear"):
            times, values = self._params
            at_kink = np.any(np.abs(times[1:] - t) <= 1e-14 * max(1.0, abs(t)))
            if at_kink and on_kink == "raise":
                raise NonDifferentiableError(
                    f"curve not differentiable at breakpoint t={t}", location=t
                )
            if k == "piecewise_constant":
                return 0.0
            if order == 2:
                return 0.0
            i = int(np.searchsorted(times, t, side="right")) - 1
            i = min(max(i, 0), len(times) - 2)
            return float((values[i + 1] - values[i]) / (times[i + 1] - times[i]))
        d = self._dpchip if order == 1 else self._d2pchip
        return float(d(t))

    def antiderivative(self, transform: str, t: float) -> float:
        """Anchored integral: integral from 0 to t of transform(curve(s)) ds.

        Exact closed forms for the constant / piecewise kinds, adaptive
        quadrature at tolerance 1e-12 otherwise.
        """
        if transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}")
        self._check_domain(t)
        if t == 0.0:
            return 0.0
        k = self.kind
        if k == "constant":
            return t * _apply(transform, self._params)
        if k == "piecewise_constant":
            times, values = self._params
            total = 0.0
            for i in range(len(times)):
                lo = times[i]
                if lo >= t:
                    break
                hi = times[i + 1] if i + 1 < len(times) else t
                total += (min(hi, t) - lo) * _apply(transform, float(values[i]))
            return total
        if k == "piecewise_linear":
            return self._pwl_antiderivative(transform, t)
        if k == "sampled" and transform == "identity":
            return float(self._ipchip(t))
        return integrate_adaptive(
            lambda s: _apply(transform, self.eval(s)), 0.0, t, tol=_QUAD_TOL
        )

    def _pwl_antiderivative(self, transform: str, t: float) -> float:
        times, values = self._params
        total = 0.0
        for i in range(len(times) - 1):
            lo = float(times[i])
            if lo >= t:
                return total
            hi = min(float(times[i + 1]), t)
            v0 = float(values[i])
            slope = (float(values[i + 1]) - v0) / (float(times[i + 1]) - lo)
            total += _segment_integral(transform, v0, slope, hi - lo)
            if hi == t:
                return total
        # beyond the last breakpoint the curve is flat
        v_end = float(values[-1])
        total += (t - float(times[-1])) * _apply(transform, v_end)
        return total


def _segment_integral(transform: str, v0: float, slope: float, dt: float) -> float:
    """Exact integral of transform(v0 + slope*s) over s in [0, dt]."""
    if dt <= 0.0:
        return 0.0
    b = slope
    if transform == "identity":
        return dt * (v0 + 0.5 * b * dt)
    if abs(b) * dt <= 1e-14 * max(1.0, abs(v0)):
        return dt * _apply(transform, v0)
    v1 = v0 + b * dt
    if transform == "square":
        return (v1 ** 3 - v0 ** 3) / (3.0 * b)
    # inverse-square: [-1/(b v)] between endpoints; the segment must not
    # cross zero (volatility curves are validated positive)
    if v0 == 0.0 or v1 == 0.0 or (v0 < 0.0) != (v1 < 0.0):
        raise CurveError("inverse-square antiderivative across a zero of the curve")
    return (1.0 / v0 - 1.0 / v1) / b
