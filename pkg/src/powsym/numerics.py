"""Deterministic numerical kernels shared across the package.

Adaptive Simpson quadrature, an embedded Dormand-Prince 4(5) initial-value
solver with cubic-Hermite dense output, central finite differences, and a
Thomas-algorithm tridiagonal solve.

Everything here is pure: no global state, no caching, no RNG.  Values are
immutable after construction, so concurrent use from independent tasks is
safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import EngineError

EPS = float(np.finfo(float).eps)

#: default finite-difference step scale: cube root of machine epsilon,
#: the usual balance between truncation and round-off for central stencils.
FD_STEP_SCALE = EPS ** (1.0 / 3.0)


class NumericsError(EngineError):
    """Base class for kernel failures."""


class QuadratureError(NumericsError):
    """Adaptive quadrature exhausted its refinement depth.

    ``worst_interval`` is the (lo, hi) subinterval that failed to converge.
    """

    def __init__(self, message: str, worst_interval: tuple[float, float] | None = None):
        super().__init__(message)
        self.worst_interval = worst_interval


class StiffnessError(NumericsError):
    """Step-size underflow in the IVP solver. ``failing_time`` records where."""

    def __init__(self, message: str, failing_time: float | None = None):
        super().__init__(message)
        self.failing_time = failing_time


class SingularSystemError(NumericsError):
    """Zero pivot in the tridiagonal solve. ``index`` is the failing row."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------

def _simpson(fa: float, fm: float, fb: float, h: float) -> float:
    return h / 6.0 * (fa + 4.0 * fm + fb)


def integrate_adaptive(
    f: Callable[[float], float],
    a: float,
    b: float,
    tol: float = 1e-10,
    max_depth: int = 50,
) -> float:
    """Integral of ``f`` over [a, b] with adaptive Simpson refinement.

    The returned value Q satisfies |Q - integral| <= tol * max(1, |Q|) for
    integrands that are smooth on all but finitely many points.  ``a > b`` is
    allowed and flips the sign.  Raises :class:`QuadratureError` carrying the
    worst subinterval if the recursion depth cap is reached.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    if a == b:
        return 0.0
    sign = 1.0
    if b < a:
        a, b = b, a
        sign = -1.0

    # crude first estimate to convert the relative tolerance into an
    # absolute budget for the recursion
    xs = np.linspace(a, b, 9)
    fs = [float(f(x)) for x in xs]
    rough = 0.0
    for i in range(0, 8, 2):
        rough += _simpson(fs[i], fs[i + 1], fs[i + 2], xs[i + 2] - xs[i])
    tol_abs = tol * max(1.0, abs(rough))

    def recurse(lo, hi, flo, fmid, fhi, whole, budget, depth):
        mid = 0.5 * (lo + hi)
        lm = 0.5 * (lo + mid)
        rm = 0.5 * (mid + hi)
        flm = float(f(lm))
        frm = float(f(rm))
        left = _simpson(flo, flm, fmid, mid - lo)
        right = _simpson(fmid, frm, fhi, hi - mid)
        err = (left + right - whole) / 15.0
        if abs(err) <= budget or (hi - lo) <= 8.0 * EPS * max(1.0, abs(lo), abs(hi)):
            return left + right + err
        if depth >= max_depth:
            raise QuadratureError(
                f"quadrature failed to converge on [{lo!r}, {hi!r}] "
                f"after depth {max_depth}",
                worst_interval=(lo, hi),
            )
        return recurse(lo, mid, flo, flm, fmid, left, budget / 2.0, depth + 1) + recurse(
            mid, hi, fmid, frm, fhi, right, budget / 2.0, depth + 1
        )

    fa_, fm_, fb_ = fs[0], fs[4], fs[8]
    whole = _simpson(fa_, fm_, fb_, b - a)
    return sign * recurse(a, b, fa_, fm_, fb_, whole, tol_abs, 0)


# ---------------------------------------------------------------------------
# initial value problems
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """Dense ODE solution: accepted step nodes plus cubic-Hermite interpolation.

    ``ts`` is strictly monotone (increasing or decreasing with the direction
    of integration), ``ys[k]`` the state at ``ts[k]`` and ``fs[k]`` the
    right-hand side there.  Evaluation at a node time reproduces the stored
    value exactly; between nodes the interpolant is the C^1 cubic Hermite.
    """

    ts: np.ndarray
    ys: np.ndarray
    fs: np.ndarray
    interpolation_order: int = 3

    def __post_init__(self):
        dt = np.diff(self.ts)
        if dt.size and not (np.all(dt > 0) or np.all(dt < 0)):
            raise ValueError("trajectory nodes must be strictly monotone in time")

    @property
    def t0(self) -> float:
        return float(self.ts[0])

    @property
    def t1(self) -> float:
        return float(self.ts[-1])

    @property
    def terminal_value(self) -> np.ndarray:
        return self.ys[-1]

    def _bracket(self, t: float) -> int:
        ts = self.ts
        if ts[-1] >= ts[0]:
            i = int(np.searchsorted(ts, t, side="right")) - 1
        else:
            i = int(np.searchsorted(-ts, -t, side="right")) - 1
        return min(max(i, 0), len(ts) - 2)

    def eval(self, t: float) -> np.ndarray:
        ts, ys, fs = self.ts, self.ys, self.fs
        if t == ts[0]:
            return ys[0].copy()
        if t == ts[-1]:
            return ys[-1].copy()
        lo = min(ts[0], ts[-1])
        hi = max(ts[0], ts[-1])
        if not (lo <= t <= hi):
            raise ValueError(f"time {t} outside trajectory span [{lo}, {hi}]")
        i = self._bracket(t)
        h = ts[i + 1] - ts[i]
        s = (t - ts[i]) / h
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        h01 = s * s * (3 - 2 * s)
        h11 = s * s * (s - 1)
        return h00 * ys[i] + h10 * h * fs[i] + h01 * ys[i + 1] + h11 * h * fs[i + 1]

    def eval_derivative(self, t: float) -> np.ndarray:
        """Time derivative of the Hermite interpolant (exact rhs at nodes)."""
        ts, ys, fs = self.ts, self.ys, self.fs
        if t == ts[0]:
            return fs[0].copy()
        if t == ts[-1]:
            return fs[-1].copy()
        i = self._bracket(t)
        h = ts[i + 1] - ts[i]
        s = (t - ts[i]) / h
        d00 = 6 * s * (s - 1) / h
        d10 = (1 - s) * (1 - 3 * s)
        d01 = -6 * s * (s - 1) / h
        d11 = s * (3 * s - 2)
        return d00 * ys[i] + d10 * fs[i] + d01 * ys[i + 1] + d11 * fs[i + 1]


# Dormand-Prince 4(5) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def solve_ivp(
    rhs: Callable[[float, np.ndarray], Sequence[float]],
    t0: float,
    y0: Sequence[float],
    t1: float,
    tol: float = 1e-10,
    max_step: float | None = None,
) -> Trajectory:
    """Integrate ``y' = rhs(t, y)`` from t0 to t1 with local error control.

    Embedded Dormand-Prince 4(5) pairs with FSAL reuse; ``t1 < t0`` integrates
    backward.  ``tol`` is used as both absolute and relative local tolerance.
    Raises :class:`StiffnessError` on step-size underflow.
    """
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    y = np.asarray(y0, dtype=float).copy()
    if y.ndim == 0:
        y = y.reshape(1)
    t = float(t0)
    span = float(t1) - float(t0)
    if span == 0.0:
        f0 = np.asarray(rhs(t, y), dtype=float)
        return Trajectory(np.array([t]), y[None, :].copy(), f0[None, :].copy())
    direction = math.copysign(1.0, span)
    h = span / 64.0
    if max_step is not None:
        h = direction * min(abs(h), abs(max_step))

    ts = [t]
    ys = [y.copy()]
    k1 = np.asarray(rhs(t, y), dtype=float)
    fs = [k1.copy()]

    k = [np.zeros_like(y) for _ in range(7)]
    while (t1 - t) * direction > 0.0:
        h_min = 64.0 * EPS * max(1.0, abs(t))
        if abs(h) < h_min:
            raise StiffnessError(
                f"step size underflow at t={t!r} (|h|={abs(h):.3e})", failing_time=t
            )
        if (t + h - t1) * direction > 0.0:
            h = t1 - t
        k[0] = k1
        failed = False
        for i in range(1, 7):
            yi = y.copy()
            for j, aij in enumerate(_DP_A[i]):
                if aij != 0.0:
                    yi += h * aij * k[j]
            k[i] = np.asarray(rhs(t + _DP_C[i] * h, yi), dtype=float)
            if not np.all(np.isfinite(k[i])):
                failed = True
                break
        if failed:
            h *= 0.5
            continue
        y5 = y.copy()
        y4 = y.copy()
        for i in range(7):
            if _DP_B5[i] != 0.0:
                y5 += h * _DP_B5[i] * k[i]
            if _DP_B4[i] != 0.0:
                y4 += h * _DP_B4[i] * k[i]
        scale = tol + tol * np.maximum(np.abs(y), np.abs(y5))
        err = math.sqrt(float(np.mean(((y5 - y4) / scale) ** 2)))
        if err <= 1.0 or abs(h) <= h_min * 1.0001:
            t = t + h
            y = y5
            k1 = k[6]  # FSAL
            ts.append(t)
            ys.append(y.copy())
            fs.append(k1.copy())
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h *= factor
        else:
            h *= max(0.2, 0.9 * err ** -0.2)
        if max_step is not None and abs(h) > abs(max_step):
            h = direction * abs(max_step)

    return Trajectory(np.array(ts), np.array(ys), np.array(fs))


def solve_ivp_piecewise(
    rhs: Callable[[float, np.ndarray], Sequence[float]],
    t0: float,
    y0: Sequence[float],
    t1: float,
    breakpoints: Sequence[float] = (),
    tol: float = 1e-10,
    max_step: float | None = None,
) -> Trajectory:
    """Like :func:`solve_ivp` but integrating segment-by-segment between
    interior breakpoints, so right-hand sides that are only piecewise smooth
    (piecewise-constant or piecewise-linear market curves) are handled without
    step-control thrash across the kinks."""
    lo, hi = (t0, t1) if t1 >= t0 else (t1, t0)
    cuts = sorted({float(b) for b in breakpoints if lo < b < hi})
    if t1 < t0:
        cuts = cuts[::-1]
    ts_all, ys_all, fs_all = [], [], []
    y = np.asarray(y0, dtype=float)
    start = t0
    for stop in [*cuts, t1]:
        seg = solve_ivp(rhs, start, y, stop, tol=tol, max_step=max_step)
        if ts_all:
            ts_all.extend(seg.ts[1:])
            ys_all.extend(seg.ys[1:])
            fs_all.extend(seg.fs[1:])
        else:
            ts_all.extend(seg.ts)
            ys_all.extend(seg.ys)
            fs_all.extend(seg.fs)
        y = seg.terminal_value
        start = stop
    return Trajectory(np.array(ts_all), np.array(ys_all), np.array(fs_all))


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def differentiate(
    f: Callable[[float], float],
    t: float,
    order: int = 1,
    h: float | None = None,
) -> float:
    """Central-difference derivative of ``f`` at ``t`` (order 1 or 2).

    O(h^2) truncation for smooth integrands; the caller owns the step choice,
    defaulting to cbrt(eps) * max(1, |t|).
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if h is None:
        h = FD_STEP_SCALE * max(1.0, abs(t))
    if h <= 0.0:
        raise ValueError("h must be positive")
    if order == 1:
        return (float(f(t + h)) - float(f(t - h))) / (2.0 * h)
    return (float(f(t + h)) - 2.0 * float(f(t)) + float(f(t - h))) / (h * h)


# ---------------------------------------------------------------------------
# tridiagonal systems
# ---------------------------------------------------------------------------

def solve_tridiagonal(
    lower: Sequence[float],
    diag: Sequence[float],
    upper: Sequence[float],
    rhs: Sequence[float],
) -> np.ndarray:
    """Thomas-algorithm solve of a tridiagonal system.

    ``lower`` and ``upper`` have length n-1 for a main diagonal of length n.
    Raises :class:`SingularSystemError` with the failing row index on a zero
    pivot; intended for the diagonally dominant systems produced by
    Crank-Nicolson stepping.
    """
    d = np.asarray(diag, dtype=float)
    lo = np.asarray(lower, dtype=float)
    up = np.asarray(upper, dtype=float)
    b = np.asarray(rhs, dtype=float)
    n = d.size
    if lo.size != n - 1 or up.size != n - 1 or b.size != n:
        raise ValueError("inconsistent band lengths")
    scale = max(float(np.max(np.abs(d))), float(np.max(np.abs(b), initial=0.0)), 1.0)
    tiny = 1e3 * EPS * scale

    cp = np.empty(n)
    dp = np.empty(n)
    piv = d[0]
    if abs(piv) <= tiny:
        raise SingularSystemError("zero pivot at row 0", index=0)
    cp[0] = up[0] / piv if n > 1 else 0.0
    dp[0] = b[0] / piv
    for i in range(1, n):
        piv = d[i] - lo[i - 1] * cp[i - 1]
        if abs(piv) <= tiny:
            raise SingularSystemError(f"zero pivot at row {i}", index=i)
        cp[i] = up[i] / piv if i < n - 1 else 0.0
        dp[i] = (b[i] - lo[i - 1] * dp[i - 1]) / piv
    x = np.empty(n)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x
