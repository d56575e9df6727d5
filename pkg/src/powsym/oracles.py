"""Independent ground-truth pricers.

* :func:`fd_price` - Crank-Nicolson in x = ln(S^beta) = beta ln S with
  Rannacher start-up, marching backward from the payoff.  In the x
  coordinate the PDE reads V_t + X V_xx + (Y - X) V_x - Z V = 0, the grid is
  centered on the payoff kink, and the upper boundary carries the exact
  far-field solution A(t) z - B(t) K (the discounted power-forward minus the
  discounted strike).
* :func:`bs_reference` - the classical constant-coefficient lognormal call
  formula, used as an oracle for beta = 1.
* :func:`mc_price` - risk-neutral Monte Carlo with exact per-step lognormal
  updates (step integrals of r, y, sigma^2 are computed by the coefficients
  module, so the only time-discretization enters through nothing: the
  terminal sample is exact in distribution).  Path randomness comes from
  counter-based Philox blocks keyed on (seed, block index), so results are
  bit-for-bit reproducible regardless of how the blocks would be scheduled.
* :func:`martingale_diagnostic` - simulates (S, psi_kernel) jointly under the
  physical measure and checks E[psi_T payoff] against the risk-neutral
  estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EngineError
from .model import MarketScenario, payoff, payoff_level, xyz_coefficients
from .numerics import solve_tridiagonal


class OracleError(EngineError):
    pass


class NumericalFailureError(OracleError):
    pass


class MarketPriceOfRiskError(OracleError):
    pass


_MC_BLOCK = 65536


@dataclass(frozen=True)
class PriceSurface:
    """Backward-solved option values on a rectangular (spot, time) grid.

    ``s_grid`` holds underlying spots, ``x_grid`` the uniform grid in
    x = beta ln S (the PDE coordinate), ``values[j, i]`` the option value at
    time ``t_grid[j]`` and spot ``s_grid[i]``.  The last time row is exactly
    the payoff.
    """

    s_grid: np.ndarray
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray
    ns: int
    nt: int
    domain_mult: float
    beta: float

    def terminal_row(self) -> np.ndarray:
        return self.values[-1]

    def value_at(self, spot: float, t: float = 0.0) -> float:
        """Value at an underlying spot, bilinear in (x, t)."""
        return self.value_at_level(float(spot) ** self.beta, t)

    def value_at_level(self, z: float, t: float = 0.0) -> float:
        x = math.log(z)
        xg, tg, V = self.x_grid, self.t_grid, self.values
        if not (xg[0] <= x <= xg[-1]):
            raise OracleError(f"level {z} outside the grid")
        if not (tg[0] <= t <= tg[-1]):
            raise OracleError(f"time {t} outside the grid")
        i = min(int(np.searchsorted(xg, x, side="right")) - 1, len(xg) - 2)
        j = min(int(np.searchsorted(tg, t, side="right")) - 1, len(tg) - 2)
        fx = (x - xg[i]) / (xg[i + 1] - xg[i])
        ft = (t - tg[j]) / (tg[j + 1] - tg[j])
        v00, v01 = V[j, i], V[j, i + 1]
        v10, v11 = V[j + 1, i], V[j + 1, i + 1]
        return float((1 - ft) * ((1 - fx) * v00 + fx * v01) + ft * ((1 - fx) * v10 + fx * v11))


def _payoff_cell_average(scenario: MarketScenario, lo_x: float, hi_x: float) -> float:
    """Average of the level-payoff over one log-level grid cell (Simpson on
    each side of the interior kink)."""
    K = scenario.strike
    kink_x = math.log(K)
    pieces = []
    if lo_x < kink_x < hi_x:
        pieces = [(lo_x, kink_x), (kink_x, hi_x)]
    else:
        pieces = [(lo_x, hi_x)]
    total = 0.0
    for a, b in pieces:
        fa = payoff_level(scenario, math.exp(a))
        fm = payoff_level(scenario, math.exp(0.5 * (a + b)))
        fb = payoff_level(scenario, math.exp(b))
        total += (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    return total / (hi_x - lo_x)


def _far_field_factors(scenario: MarketScenario, t: float) -> tuple[float, float]:
    """A(t), B(t) with V = A z - B K the exact far-field (all-in-the-money)
    solution: A discounts the power forward, B the strike."""
    b = scenario.beta
    T = scenario.maturity

    def anchored(curve, transform):
        return curve.antiderivative(transform, T) - curve.antiderivative(transform, t)

    int_r = anchored(scenario.r, "identity")
    int_y = anchored(scenario.y, "identity")
    int_s2 = anchored(scenario.sigma, "square")
    A = math.exp(-(b * int_y - 0.5 * b * (b - 1.0) * int_s2 - (b - 1.0) * int_r))
    B = math.exp(-int_r)
    return A, B


def fd_price(
    scenario: MarketScenario,
    ns: int = 400,
    nt: int = 400,
    domain_mult: float = 4.0,
) -> PriceSurface:
    """Crank-Nicolson solve of the pricing PDE, backward from the payoff.

    The spatial grid covers underlying spots [K^(1/beta)/domain_mult,
    K^(1/beta)*domain_mult] uniformly in x = beta ln S with the kink exactly
    on the center node.  The first two time steps are split into four
    implicit-Euler half-steps (Rannacher start-up) to damp the kink-induced
    oscillation, keeping the scheme second order and the surface nonnegative
    for calls.
    """
    if ns < 16 or nt < 16:
        raise OracleError("ns and nt must both be at least 16")
    if domain_mult < 4.0:
        raise OracleError("domain_mult must be at least 4")
    if ns % 2:
        ns += 1  # keep the kink on a node

    b = scenario.beta
    K = scenario.strike
    T = scenario.maturity
    half_width = abs(b) * math.log(domain_mult)
    x0 = math.log(K)
    x = np.linspace(x0 - half_width, x0 + half_width, ns + 1)
    z = np.exp(x)
    s_grid = z ** (1.0 / b)
    t_grid = np.linspace(0.0, T, nt + 1)
    dx = x[1] - x[0]

    values = np.empty((nt + 1, ns + 1))
    values[-1] = np.array([payoff_level(scenario, zi) for zi in z])

    # the stored terminal row is the exact payoff; the backward march starts
    # from the L2 cell-average projection at the kink node, which removes the
    # O(dx) projection error of the nodal kink without touching the surface
    start = values[-1].copy()
    kink_i = ns // 2
    lo_x, hi_x = x[kink_i] - 0.5 * dx, x[kink_i] + 0.5 * dx
    cell = _payoff_cell_average(scenario, lo_x, hi_x)
    start[kink_i] = cell

    call = scenario.psi == +1

    def boundary(t):
        A, B = _far_field_factors(scenario, t)
        if call:
            return 0.0, A * z[-1] - B * K
        return B * K - A * z[0], 0.0

    def implicit_step(v_in, t_new, dt_step, t_mid):
        X, Y, Z = xyz_coefficients(scenario, t_mid)
        a = X / dx ** 2 - (Y - X) / (2.0 * dx)
        bb = -2.0 * X / dx ** 2 - Z
        c = X / dx ** 2 + (Y - X) / (2.0 * dx)
        lo, hi = boundary(t_new)
        n = ns - 1
        diag = np.full(n, 1.0 - dt_step * bb)
        lower = np.full(n - 1, -dt_step * a)
        upper = np.full(n - 1, -dt_step * c)
        rhs = v_in[1:-1].copy()
        rhs[0] += dt_step * a * lo
        rhs[-1] += dt_step * c * hi
        out = np.empty_like(v_in)
        out[1:-1] = solve_tridiagonal(lower, diag, upper, rhs)
        out[0], out[-1] = lo, hi
        return out

    v = start

    def cn_step(v_in, t_new, t_old):
        dt_step = t_old - t_new
        t_mid = 0.5 * (t_old + t_new)
        X, Y, Z = xyz_coefficients(scenario, t_mid)
        a = X / dx ** 2 - (Y - X) / (2.0 * dx)
        bb = -2.0 * X / dx ** 2 - Z
        c = X / dx ** 2 + (Y - X) / (2.0 * dx)
        lo_new, hi_new = boundary(t_new)
        lo_old, hi_old = v_in[0], v_in[-1]
        n = ns - 1
        h = 0.5 * dt_step
        diag = np.full(n, 1.0 - h * bb)
        lower = np.full(n - 1, -h * a)
        upper = np.full(n - 1, -h * c)
        rhs = (v_in[1:-1]
               + h * (a * v_in[:-2] + bb * v_in[1:-1] + c * v_in[2:]))
        rhs[0] += h * a * lo_new
        rhs[-1] += h * c * hi_new
        out = np.empty_like(v_in)
        out[1:-1] = solve_tridiagonal(lower, diag, upper, rhs)
        out[0], out[-1] = lo_new, hi_new
        return out

    rannacher = 2
    for j in range(nt - 1, -1, -1):
        t_old = t_grid[j + 1]
        t_new = t_grid[j]
        if nt - 1 - j < rannacher:
            dt_q = (t_old - t_new) / 2.0
            vv = v
            for q in range(2):
                t_sub = t_old - (q + 1) * dt_q
                vv = implicit_step(vv, t_sub, dt_q, t_sub + 0.5 * dt_q)
            v = vv
        else:
            v = cn_step(v, t_new, t_old)
        if not np.all(np.isfinite(v)):
            raise NumericalFailureError(f"non-finite values at t={t_new}")
        values[j] = v

    return PriceSurface(
        s_grid=s_grid, t_grid=t_grid, x_grid=x, values=values,
        ns=ns, nt=nt, domain_mult=domain_mult, beta=b,
    )


def bs_reference(S: float, K: float, r: float, sigma: float, T: float, y: float = 0.0) -> float:
    """Constant-coefficient lognormal call value (beta = 1 oracle)."""
    if sigma <= 0.0 or T <= 0.0:
        raise ValueError("sigma and T must be positive")
    st = sigma * math.sqrt(T)
    d1 = (math.log(S / K) + (r - y + 0.5 * sigma * sigma) * T) / st
    d2 = d1 - st
    N = lambda u: 0.5 * (1.0 + math.erf(u / math.sqrt(2.0)))
    return S * math.exp(-y * T) * N(d1) - K * math.exp(-r * T) * N(d2)


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    paths: int
    seed: int

    def __post_init__(self):
        if self.stderr < 0.0:
            raise ValueError("stderr must be nonnegative")


def _step_moments(scenario: MarketScenario, steps: int, drift_curve) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-step integrals: drift of ln S and the variance of its shock."""
    T = scenario.maturity
    ts = np.linspace(0.0, T, steps + 1)
    var = np.empty(steps)
    drift = np.empty(steps)
    s2 = [scenario.sigma.antiderivative("square", float(t)) for t in ts]
    ri = [drift_curve.antiderivative("identity", float(t)) for t in ts]
    yi = [scenario.y.antiderivative("identity", float(t)) for t in ts]
    for j in range(steps):
        dv = s2[j + 1] - s2[j]
        var[j] = max(dv, 0.0)
        drift[j] = (ri[j + 1] - ri[j]) - (yi[j + 1] - yi[j]) - 0.5 * dv
    return drift, var


def _philox_normals(seed: int, tag: int, block_index: int, shape: tuple[int, ...], draws: int = 1) -> list[np.ndarray]:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF),
                    np.uint64((tag << 32) ^ block_index)], dtype=np.uint64)
    g = np.random.Generator(np.random.Philox(key=key))
    return [g.standard_normal(shape) for _ in range(draws)]


def mc_price(
    scenario: MarketScenario,
    S0: float,
    paths: int,
    steps: int = 8,
    seed: int = 0,
) -> McEstimate:
    """Risk-neutral Monte Carlo estimate of the option value at (S0, 0).

    Per-step updates are exact lognormal increments
    ln S += int(r - y - sigma^2/2) + sqrt(int sigma^2) N(0,1), so the number
    of steps affects only the shock granularity, never the bias.  The payoff
    is discounted with the exact integral of r.
    """
    if paths < 1000:
        raise OracleError("paths must be at least 1000")
    if steps < 1:
        raise OracleError("steps must be at least 1")
    drift, var = _step_moments(scenario, steps, scenario.r)
    svol = np.sqrt(var)
    disc = math.exp(-scenario.r.antiderivative("identity", scenario.maturity))
    K = scenario.strike
    psi = scenario.psi
    b = scenario.beta
    total = 0.0
    total_sq = 0.0
    done = 0
    block = 0
    x0 = math.log(S0)
    while done < paths:
        n = min(_MC_BLOCK, paths - done)
        (zmat,) = _philox_normals(seed, 0, block, (n, steps))
        lx = np.full(n, x0)
        for j in range(steps):
            lx += drift[j] + svol[j] * zmat[:, j]
        pay = np.maximum(psi * (np.exp(b * lx) - K), 0.0) * disc
        total += float(np.sum(pay))
        total_sq += float(np.sum(pay * pay))
        done += n
        block += 1
    mean = total / paths
    var_est = max(total_sq / paths - mean * mean, 0.0)
    stderr = math.sqrt(var_est / paths) if paths > 1 else 0.0
    # identical paths (sigma == 0) must report exactly zero spread
    if var_est < 1e-24 * max(1.0, mean * mean):
        stderr = 0.0
    return McEstimate(mean=mean, stderr=stderr, paths=paths, seed=seed)


@dataclass(frozen=True)
class MartingaleReport:
    kernel_estimate: float
    kernel_stderr: float
    risk_neutral_estimate: float
    risk_neutral_stderr: float
    joint_stderr: float
    passed: bool


def martingale_diagnostic(
    scenario: MarketScenario,
    S0: float,
    paths: int,
    steps: int = 8,
    seed: int = 0,
) -> MartingaleReport:
    """Check the pricing-kernel identity by simulation.

    Under the physical measure the asset follows dS/S = (mu - y) dt + sigma dW
    and the kernel d(psi)/psi = -r dt - lambda dW with lambda = (mu - r)/sigma.
    E[psi_T payoff(S_T)] must match the risk-neutral discounted expectation.

    The kernel simulation reuses the risk-neutral stream for the shared
    Brownian shocks (the kernel's extra randomness comes from an orthogonal
    substream), so the comparison is paired: with mu = r the two estimators
    coincide path by path and the joint standard error is exactly zero.
    """
    if scenario.sigma.minimum_on(0.0, scenario.maturity) < 1e-8:
        raise MarketPriceOfRiskError(
            "market price of risk overflows: sigma too small for mu != r"
        )
    mu = scenario.mu_curve
    T = scenario.maturity
    ts = np.linspace(0.0, T, steps + 1)
    K = scenario.strike
    b = scenario.beta
    psi_sign = scenario.psi

    # per-step exact second moments of the joint Gaussian
    # (int sigma dW, int lambda dW); covariance is int lambda sigma = int (mu-r)
    drift_p, var_s = _step_moments(scenario, steps, mu)
    drift_q, _ = _step_moments(scenario, steps, scenario.r)
    lam2 = []
    lam_sig = []
    rint = []
    for j in range(steps):
        lo, hi = float(ts[j]), float(ts[j + 1])
        from .numerics import integrate_adaptive

        lam2.append(integrate_adaptive(
            lambda s: ((mu.eval(s) - scenario.r.eval(s)) / scenario.sigma.eval(s)) ** 2,
            lo, hi, tol=1e-12))
        lam_sig.append(integrate_adaptive(
            lambda s: (mu.eval(s) - scenario.r.eval(s)), lo, hi, tol=1e-12))
        rint.append(scenario.r.antiderivative("identity", hi)
                    - scenario.r.antiderivative("identity", lo))
    lam2 = np.array(lam2)
    lam_sig = np.array(lam_sig)
    rint = np.array(rint)
    svol = np.sqrt(var_s)
    disc = math.exp(-scenario.r.antiderivative("identity", T))

    sum_k = sum_k2 = 0.0
    sum_q = sum_q2 = 0.0
    sum_d = sum_d2 = 0.0
    done = 0
    block = 0
    x0 = math.log(S0)
    while done < paths:
        n = min(_MC_BLOCK, paths - done)
        (z1,) = _philox_normals(seed, 0, block, (n, steps))
        (z2,) = _philox_normals(seed, 1, block, (n, steps))
        lx_p = np.full(n, x0)
        lx_q = np.full(n, x0)
        lpsi = np.zeros(n)
        for j in range(steps):
            gs = svol[j] * z1[:, j]
            if var_s[j] > 0.0:
                c = lam_sig[j] / var_s[j]
                resid = lam2[j] - lam_sig[j] ** 2 / var_s[j]
            else:
                c = 0.0
                resid = lam2[j]
            gl = c * gs + math.sqrt(max(resid, 0.0)) * z2[:, j]
            lx_p += drift_p[j] + gs
            lx_q += drift_q[j] + gs
            lpsi += -rint[j] - 0.5 * lam2[j] - gl
        pay_k = np.maximum(psi_sign * (np.exp(b * lx_p) - K), 0.0) * np.exp(lpsi)
        pay_q = np.maximum(psi_sign * (np.exp(b * lx_q) - K), 0.0) * disc
        d = pay_k - pay_q
        sum_k += float(np.sum(pay_k))
        sum_k2 += float(np.sum(pay_k * pay_k))
        sum_q += float(np.sum(pay_q))
        sum_q2 += float(np.sum(pay_q * pay_q))
        sum_d += float(np.sum(d))
        sum_d2 += float(np.sum(d * d))
        done += n
        block += 1

    def mean_se(total, total_sq):
        m = total / paths
        v = max(total_sq / paths - m * m, 0.0)
        se = math.sqrt(v / paths)
        if v < 1e-24 * max(1.0, m * m):
            se = 0.0
        return m, se

    kernel_mean, kernel_se = mean_se(sum_k, sum_k2)
    rn_mean, rn_se = mean_se(sum_q, sum_q2)
    diff_mean, diff_se = mean_se(sum_d, sum_d2)
    if diff_se > 0.0:
        passed = abs(diff_mean) < 3.0 * diff_se
    else:
        passed = abs(diff_mean) < 1e-12 * max(1.0, abs(rn_mean))
    return MartingaleReport(
        kernel_estimate=kernel_mean,
        kernel_stderr=kernel_se,
        risk_neutral_estimate=rn_mean,
        risk_neutral_stderr=rn_se,
        joint_stderr=diff_se,
        passed=passed,
    )
