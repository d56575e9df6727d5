"""The pricing problem: scenario data, payoff, PDE coefficients, residual probe.

A power option on an underlying S pays max(psi * (S^beta - K), 0) at maturity.
Writing z = S^beta for the *power level* of the underlying, the no-arbitrage
value V(z, t) satisfies

    V_t + X(t) z^2 V_zz + Y(t) z V_z - Z(t) V = 0,
    X = sigma^2 beta^2 / 2,
    Y = (r - y) beta + beta (beta - 1) sigma^2 / 2,
    Z = r,

with terminal data V(z, T) = max(psi * (z - K), 0); the payoff kink sits at
z = K, i.e. at underlying spot S = K^(1/beta).  Everything downstream (finite
differences, symmetry functions, invariant charts) works in the z coordinate;
user-facing spot arguments are underlying prices and are converted via
z = S^beta.  For beta = 1 the two coordinates coincide.

:func:`pde_residual` evaluates the PDE operator on an arbitrary function of
(z, t) by central differences and is the universal correctness probe used by
the verification machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .coefficients import CoefficientCurve
from .errors import ConfigError, EngineError


class ModelError(EngineError):
    pass


class ModelDomainError(ModelError):
    pass


class ScenarioError(ConfigError):
    pass


_SIGMA_MIN = 1e-10


@dataclass(frozen=True)
class MarketScenario:
    """Full pricing problem: payoff parameters plus the market curves.

    ``psi`` is +1 for a call, -1 for a put.  ``mu`` (physical-measure expected
    return) defaults to the risk-free curve, in which case the physical and
    risk-neutral measures coincide.
    """

    beta: float
    strike: float
    psi: int
    maturity: float
    sigma: CoefficientCurve
    r: CoefficientCurve
    y: CoefficientCurve
    mu: CoefficientCurve | None = None

    def __post_init__(self):
        if self.beta == 0.0:
            raise ScenarioError("beta must be nonzero")
        if self.strike <= 0.0:
            raise ScenarioError("strike must be positive")
        if self.maturity <= 0.0:
            raise ScenarioError("maturity must be positive")
        if self.psi not in (+1, -1):
            raise ScenarioError("psi must be +1 (call) or -1 (put)")
        if self.sigma.minimum_on(0.0, self.maturity) <= _SIGMA_MIN:
            raise ScenarioError("volatility curve must stay positive on [0, T]")
        for name in ("sigma", "r", "y"):
            curve = getattr(self, name)
            bps = curve.breakpoints()
            if bps and max(bps) > self.maturity:
                raise ScenarioError(f"{name} curve breakpoints exceed maturity")

    @property
    def mu_curve(self) -> CoefficientCurve:
        return self.mu if self.mu is not None else self.r

    @property
    def kink_spot(self) -> float:
        """Underlying spot where the payoff kinks: K^(1/beta)."""
        return self.strike ** (1.0 / self.beta)

    def level(self, spot: float) -> float:
        """Power level z = S^beta of an underlying spot."""
        if spot <= 0.0:
            raise ModelDomainError("spot must be positive")
        return spot ** self.beta

    def spot_from_level(self, z: float) -> float:
        if z <= 0.0:
            raise ModelDomainError("level must be positive")
        return z ** (1.0 / self.beta)

    def curve_breakpoints(self) -> tuple[float, ...]:
        bps = set()
        for c in (self.sigma, self.r, self.y, self.mu_curve):
            bps.update(c.breakpoints())
        return tuple(sorted(b for b in bps if 0.0 < b < self.maturity))


def payoff(scenario: MarketScenario, spot: float) -> float:
    """Terminal payoff max(psi * (spot^beta - K), 0) for an underlying spot."""
    if spot <= 0.0:
        raise ModelDomainError("spot must be positive")
    return max(scenario.psi * (spot ** scenario.beta - scenario.strike), 0.0)


def payoff_level(scenario: MarketScenario, z: float) -> float:
    """Terminal payoff expressed in the power-level coordinate z = S^beta."""
    if z <= 0.0:
        raise ModelDomainError("level must be positive")
    return max(scenario.psi * (z - scenario.strike), 0.0)


def xyz_coefficients(scenario: MarketScenario, t: float) -> tuple[float, float, float]:
    """PDE coefficient triple (X, Y, Z) at time t."""
    b = scenario.beta
    sig = scenario.sigma.eval(t)
    r = scenario.r.eval(t)
    y = scenario.y.eval(t)
    X = 0.5 * sig * sig * b * b
    Y = (r - y) * b + 0.5 * b * (b - 1.0) * sig * sig
    Z = r
    return X, Y, Z


class CoefficientState(NamedTuple):
    """(X, Y, Z) and their first/second time derivatives at one time."""

    X: float
    Y: float
    Z: float
    Xd: float
    Yd: float
    Zd: float
    Xdd: float
    Ydd: float


def xyz_state(scenario: MarketScenario, t: float, on_kink: str = "raise") -> CoefficientState:
    """Coefficients plus the time derivatives the determining system needs."""
    b = scenario.beta
    sig = scenario.sigma.eval(t)
    sigd = scenario.sigma.derivative(t, 1, on_kink)
    sigdd = scenario.sigma.derivative(t, 2, on_kink)
    r = scenario.r.eval(t)
    rd = scenario.r.derivative(t, 1, on_kink)
    rdd = scenario.r.derivative(t, 2, on_kink)
    y = scenario.y.eval(t)
    yd = scenario.y.derivative(t, 1, on_kink)
    ydd = scenario.y.derivative(t, 2, on_kink)

    X = 0.5 * sig * sig * b * b
    Xd = sig * sigd * b * b
    Xdd = (sigd * sigd + sig * sigdd) * b * b
    Y = (r - y) * b + 0.5 * b * (b - 1.0) * sig * sig
    Yd = (rd - yd) * b + b * (b - 1.0) * sig * sigd
    Ydd = (rdd - ydd) * b + b * (b - 1.0) * (sigd * sigd + sig * sigdd)
    return CoefficientState(X, Y, Z=r, Xd=Xd, Yd=Yd, Zd=rd, Xdd=Xdd, Ydd=Ydd)


def pde_residual(
    scenario: MarketScenario,
    v: Callable[[float, float], float],
    z: float,
    t: float,
    hz: float,
    ht: float,
) -> float:
    """Central-difference evaluation of V_t + X z^2 V_zz + Y z V_z - Z V.

    ``v`` is a scalar function of the power-level coordinate and time.  For an
    exact solution the residual vanishes at rate O(hz^2 + ht^2).
    """
    T = scenario.maturity
    if not (0.0 < t < T):
        raise ModelDomainError(f"t={t} must be interior to (0, {T})")
    if t - ht <= 0.0 or t + ht >= T:
        raise ModelDomainError("time stencil leaves (0, T)")
    if z - hz <= 0.0:
        raise ModelDomainError("level stencil leaves the positive axis")
    X, Y, Z = xyz_coefficients(scenario, t)
    v0 = float(v(z, t))
    vt = (float(v(z, t + ht)) - float(v(z, t - ht))) / (2.0 * ht)
    vp = float(v(z + hz, t))
    vm = float(v(z - hz, t))
    vz = (vp - vm) / (2.0 * hz)
    vzz = (vp - 2.0 * v0 + vm) / (hz * hz)
    return vt + X * z * z * vzz + Y * z * vz - Z * v0
