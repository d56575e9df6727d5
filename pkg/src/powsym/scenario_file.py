"""Flat key=value scenario files.

UTF-8 text, ``#`` comments, one ``key = value`` pair per line.  Scalar keys:
``beta``, ``strike``, ``psi``, ``maturity``.  Curve blocks use dotted
prefixes ``sigma.``, ``r.``, ``y.`` and optionally ``mu.`` with

    <prefix>.kind = constant | piecewise_constant | piecewise_linear | exp | sampled
    <prefix>.value = ...                    (constant)
    <prefix>.times = 0,0.5,...              (piecewise/sampled; strictly
    <prefix>.values = ...,...                increasing, starting at 0)
    <prefix>.base = ...   <prefix>.rate = ...   (exp: base*e^(rate*t))

Unknown keys are rejected by name; so are missing mandatory keys.  The
scenario digest is a SHA-256 over the canonical semantic content, so
formatting, comments and key order never change it.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

from .coefficients import CoefficientCurve, CurveError
from .errors import ConfigError
from .model import MarketScenario, ScenarioError


class ScenarioFileError(ConfigError):
    pass


_SCALAR_KEYS = ("beta", "strike", "psi", "maturity")
_CURVE_PREFIXES = ("sigma", "r", "y", "mu")
_CURVE_KEYS = ("kind", "value", "times", "values", "base", "rate")
_KINDS = ("constant", "piecewise_constant", "piecewise_linear", "exp", "sampled")


def _parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ScenarioFileError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        value = value.strip()
        if not key:
            raise ScenarioFileError(f"line {lineno}: empty key")
        if key in pairs:
            raise ScenarioFileError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _check_known(pairs: dict[str, str]):
    for key in pairs:
        if key in _SCALAR_KEYS:
            continue
        if "." in key:
            prefix, sub = key.split(".", 1)
            if prefix in _CURVE_PREFIXES and sub in _CURVE_KEYS:
                continue
        raise ScenarioFileError(f"unknown key {key!r}")


def _require(pairs: dict[str, str], key: str) -> str:
    if key not in pairs:
        raise ScenarioFileError(f"missing mandatory key {key!r}")
    return pairs[key]


def _to_float(key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ScenarioFileError(f"key {key!r}: not a number: {value!r}") from None


def _to_float_list(key: str, value: str) -> list[float]:
    items = [s.strip() for s in value.split(",") if s.strip()]
    if not items:
        raise ScenarioFileError(f"key {key!r}: empty list")
    return [_to_float(key, s) for s in items]


def _build_curve(prefix: str, pairs: dict[str, str], horizon: float) -> CoefficientCurve:
    kind = _require(pairs, f"{prefix}.kind")
    if kind not in _KINDS:
        raise ScenarioFileError(f"key '{prefix}.kind': unknown kind {kind!r}")
    used = {f"{prefix}.kind"}
    try:
        if kind == "constant":
            value = _to_float(f"{prefix}.value", _require(pairs, f"{prefix}.value"))
            used.add(f"{prefix}.value")
            curve = CoefficientCurve.constant(value, t_max=horizon)
        elif kind == "exp":
            base = _to_float(f"{prefix}.base", _require(pairs, f"{prefix}.base"))
            rate = _to_float(f"{prefix}.rate", _require(pairs, f"{prefix}.rate"))
            used.update((f"{prefix}.base", f"{prefix}.rate"))
            curve = CoefficientCurve.exponential(base, rate, t_max=horizon)
        else:
            times = _to_float_list(f"{prefix}.times", _require(pairs, f"{prefix}.times"))
            values = _to_float_list(f"{prefix}.values", _require(pairs, f"{prefix}.values"))
            used.update((f"{prefix}.times", f"{prefix}.values"))
            builder = {
                "piecewise_constant": CoefficientCurve.piecewise_constant,
                "piecewise_linear": CoefficientCurve.piecewise_linear,
                "sampled": CoefficientCurve.sampled,
            }[kind]
            curve = builder(times, values, t_max=horizon)
    except CurveError as e:
        raise ScenarioFileError(f"curve {prefix!r}: {e}") from e
    extra = [k for k in pairs if k.startswith(prefix + ".") and k not in used]
    if extra:
        raise ScenarioFileError(
            f"curve {prefix!r} (kind {kind}): unexpected keys {sorted(extra)}")
    return curve


def parse_scenario_text(text: str) -> tuple[MarketScenario, str]:
    """Parse scenario text; returns (scenario, semantic digest)."""
    pairs = _parse_pairs(text)
    _check_known(pairs)

    beta = _to_float("beta", _require(pairs, "beta"))
    strike = _to_float("strike", _require(pairs, "strike"))
    maturity = _to_float("maturity", _require(pairs, "maturity"))
    psi_raw = _require(pairs, "psi").lstrip("+")
    try:
        psi = int(psi_raw)
    except ValueError:
        raise ScenarioFileError(f"key 'psi': expected +1 or -1, got {pairs['psi']!r}") from None
    if psi not in (1, -1):
        raise ScenarioFileError(f"key 'psi': expected +1 or -1, got {psi}")

    curves = {}
    for prefix in _CURVE_PREFIXES:
        present = any(k.startswith(prefix + ".") for k in pairs)
        if prefix == "mu" and not present:
            curves["mu"] = None
            continue
        if not present:
            raise ScenarioFileError(f"missing mandatory key '{prefix}.kind'")
        curves[prefix] = _build_curve(prefix, pairs, maturity)

    try:
        scenario = MarketScenario(
            beta=beta, strike=strike, psi=psi, maturity=maturity,
            sigma=curves["sigma"], r=curves["r"], y=curves["y"], mu=curves["mu"],
        )
    except ScenarioError as e:
        raise ScenarioFileError(str(e)) from e
    return scenario, scenario_digest(scenario)


def parse_scenario_file(path: str | Path) -> tuple[MarketScenario, str]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioFileError(f"cannot read scenario file {p}: {e}") from e
    return parse_scenario_text(text)


def _curve_signature(curve: CoefficientCurve | None) -> str:
    if curve is None:
        return "none"
    kind = curve.kind
    params = curve._params
    if kind == "constant":
        return f"constant:{float(params)!r}"
    if kind == "exp":
        return f"exp:{params[0]!r}:{params[1]!r}"
    times, values = params
    ts = ",".join(repr(float(t)) for t in times)
    vs = ",".join(repr(float(v)) for v in values)
    return f"{kind}:[{ts}]:[{vs}]"


def scenario_digest(scenario: MarketScenario) -> str:
    """SHA-256 digest that changes iff a semantic field changes."""
    parts = [
        f"beta={scenario.beta!r}",
        f"strike={scenario.strike!r}",
        f"psi={scenario.psi}",
        f"maturity={scenario.maturity!r}",
        f"sigma={_curve_signature(scenario.sigma)}",
        f"r={_curve_signature(scenario.r)}",
        f"y={_curve_signature(scenario.y)}",
        f"mu={_curve_signature(scenario.mu)}",
    ]
    return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()
