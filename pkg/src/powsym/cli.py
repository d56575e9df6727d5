"""Command-line front end.

Subcommands: ``price``, ``verify-symmetry``, ``oracle fd|mc``, ``compare``,
``sweep``.  Exit codes: 0 all checks passed, 1 numerical or tolerance
failure, 2 configuration error.  Every CSV carries a header row; numbers are
serialized with 17 significant digits so identical inputs (and seeds)
reproduce byte-identical files.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import oracles, reduction, symmetry
from .errors import ConfigError, EngineError
from .model import MarketScenario
from .scenario_file import parse_scenario_file
from .symmetry import SymmetryConstants

_VERIFY_TOL = 1e-7
_COMPARE_TOL = 1e-2


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _emit_csv(header: str, rows: list[tuple], out: str | None) -> None:
    lines = [header]
    lines.extend(",".join(_fmt(v) if isinstance(v, float) else str(v) for v in row)
                 for row in rows)
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8", newline="\n")
    else:
        sys.stdout.write(text)


def _load(path: str) -> tuple[MarketScenario, str]:
    scenario, digest = parse_scenario_file(path)
    return scenario, digest


def _parse_constants(spec: str) -> SymmetryConstants:
    fields = {"theta1": 0.0, "theta2": 0.0, "gamma1": 0.0,
              "gamma2": 0.0, "alpha1": 0.0, "k1": 0.0}
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigError(f"constants: expected name=value, got {item!r}")
        name, value = item.split("=", 1)
        name = name.strip()
        if name not in fields:
            raise ConfigError(f"constants: unknown name {name!r}")
        try:
            fields[name] = float(value)
        except ValueError:
            raise ConfigError(f"constants: bad number for {name!r}: {value!r}") from None
    return SymmetryConstants(**fields)


def _report_header(args, digest: str) -> None:
    print(f"command: {' '.join(args)}")
    print(f"scenario-digest: {digest}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_price(ns: argparse.Namespace, argv: list[str]) -> int:
    scenario, digest = _load(ns.scenario)
    if not (0.0 <= ns.time < scenario.maturity):
        raise ConfigError(f"--time must satisfy 0 <= t < maturity ({scenario.maturity})")
    backend = "numeric" if ns.backend == "numeric" else "experimental-closed-form"
    branch = reduction.Branch.parse(ns.branch)
    result = reduction.price(branch, scenario, ns.spot, ns.time, backend=backend)
    _report_header(argv, digest)
    print(f"fit-error: {_fmt(result.fit_error)}")
    _emit_csv("S,t,V,pde_residual",
              [(result.spot, result.time, result.value, result.pde_residual)], ns.out)
    return 0


def cmd_verify_symmetry(ns: argparse.Namespace, argv: list[str]) -> int:
    scenario, digest = _load(ns.scenario)
    constants = _parse_constants(ns.constants)
    sf = symmetry.solve_symmetry_ode(scenario, constants)
    T = scenario.maturity
    n = ns.samples
    ts = np.linspace(T / (n + 1), T * n / (n + 1), n)
    rows = []
    worst = 0.0
    for t in ts:
        rb, rc, rd = symmetry.determining_residuals(scenario, sf, float(t))
        nb, ncn, ndn = symmetry.normalized_determining_residuals(scenario, sf, float(t))
        worst = max(worst, nb, ncn, ndn)
        rows.append((float(t), rb, rc, rd))
    _report_header(argv, digest)
    print(f"max-normalized-residual: {_fmt(worst)} (tolerance {_fmt(_VERIFY_TOL)})")

    # alpha consistency: how much of the third equation is carried by the
    # alpha' term the backend solved for
    t_mid = 0.5 * T
    from .model import xyz_state
    c = xyz_state(scenario, t_mid, on_kink="right")
    alpha_term = 4.0 * c.X ** 2 * sf.alpha_dot(t_mid)
    if abs(alpha_term) > 1e-14:
        print(f"alpha-consistency: the alpha' term contributes "
              f"{_fmt(alpha_term)} to the third determining equation at "
              f"t={_fmt(t_mid)}; a constant alpha would leave a residual of "
              f"that size")

    gen_note = ""
    if ns.generator:
        report = symmetry.verify_generator(
            scenario, sf, levels=((64, 64), (128, 128)), require_symmetry=False)
        ratios = ",".join(_fmt(r) for r in report.rms_ratios)
        print(f"generator-residuals: "
              f"{','.join(_fmt(l.rms_residual) for l in report.levels)}")
        print(f"generator-convergence-ratios: {ratios if ratios else 'n/a'}")

    _emit_csv("t,Rb,Rc,Rd", rows, ns.out)
    if worst < _VERIFY_TOL:
        print("verify-symmetry: PASS")
        return 0
    print(f"verify-symmetry: FAIL quantity=max-normalized-residual "
          f"value={_fmt(worst)} tolerance={_fmt(_VERIFY_TOL)}")
    return 1


def cmd_oracle(ns: argparse.Namespace, argv: list[str]) -> int:
    scenario, digest = _load(ns.scenario)
    _report_header(argv, digest)
    if ns.oracle == "fd":
        surface = oracles.fd_price(scenario, ns.ns, ns.nt, ns.domain_mult)
        rows = []
        for j, t in enumerate(surface.t_grid):
            for i, s in enumerate(surface.s_grid):
                rows.append((float(s), float(t), float(surface.values[j, i])))
        if ns.spot is not None:
            print(f"fd-value-at-spot: {_fmt(surface.value_at(ns.spot, 0.0))}")
        _emit_csv("S,t,V", rows, ns.out)
        return 0
    est = oracles.mc_price(scenario, ns.spot, ns.paths, ns.steps, ns.seed)
    _emit_csv("mean,stderr,paths,seed",
              [(est.mean, est.stderr, est.paths, est.seed)], ns.out)
    return 0


def cmd_compare(ns: argparse.Namespace, argv: list[str]) -> int:
    scenario, digest = _load(ns.scenario)
    branch = reduction.Branch.parse(ns.branch)
    spots = [float(s) for s in ns.spots.split(",") if s.strip()]
    if not spots:
        raise ConfigError("--spots must list at least one spot")
    kink = scenario.kink_spot
    need = max(max(kink / min(spots), max(spots) / kink) * 1.3, 4.0)
    surface = oracles.fd_price(scenario, ns.ns, ns.nt, domain_mult=need)
    pipeline = reduction.ReductionPipeline(scenario, branch)
    rows = []
    worst_rel = 0.0
    mc_ok = True
    for k, s in enumerate(spots):
        v_sym = pipeline.price(s, 0.0).value
        v_fd = surface.value_at(s, 0.0)
        est = oracles.mc_price(scenario, s, ns.paths, ns.steps, ns.seed + k)
        abs_diff = abs(v_sym - v_fd)
        rel_diff = abs_diff / max(abs(v_fd), 1e-12)
        worst_rel = max(worst_rel, rel_diff)
        if abs(est.mean - v_fd) > 3.0 * max(est.stderr, 1e-12):
            mc_ok = False
        rows.append((s, v_sym, v_fd, est.mean, est.stderr, abs_diff, rel_diff))
    _report_header(argv, digest)
    _emit_csv("S,V_sym,V_fd,V_mc,mc_stderr,abs_diff,rel_diff", rows, ns.out)
    ok = worst_rel <= ns.tol and mc_ok
    if ok:
        print(f"compare: PASS max-rel-diff={_fmt(worst_rel)} tol={_fmt(ns.tol)}")
        return 0
    if worst_rel > ns.tol:
        print(f"compare: FAIL quantity=max-rel-diff value={_fmt(worst_rel)} "
              f"tolerance={_fmt(ns.tol)}")
    if not mc_ok:
        print("compare: FAIL quantity=mc-vs-fd tolerance=3*stderr")
    return 1


def cmd_sweep(ns: argparse.Namespace, argv: list[str]) -> int:
    src = Path(ns.scenario_dir)
    if not src.is_dir():
        raise ConfigError(f"--scenario-dir {src} is not a directory")
    out_dir = Path(ns.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in src.iterdir() if p.is_file())
    summary = []
    any_fail = False
    for p in files:
        out_file = out_dir / (p.stem + ".csv")
        try:
            sub_argv = _sweep_argv(ns, p, out_file)
            code = main(sub_argv)
            status = "PASS" if code == 0 else "FAIL"
            any_fail |= code != 0
        except ConfigError as e:
            status = "CONFIG-ERROR"
            any_fail = True
            print(f"sweep: {p.name}: CONFIG-ERROR {e}", file=sys.stderr)
        except EngineError as e:
            status = "FAIL"
            any_fail = True
            print(f"sweep: {p.name}: {e}", file=sys.stderr)
        summary.append((p.name, status))
    _emit_csv("scenario,status", summary, str(out_dir / "summary.csv"))
    print(f"sweep: {len(files)} scenario(s), "
          f"{sum(1 for _, s in summary if s == 'PASS')} PASS")
    return 1 if any_fail else 0


def _sweep_argv(ns: argparse.Namespace, scenario_path: Path, out_file: Path) -> list[str]:
    if ns.command_name == "price":
        scenario, _ = _load(str(scenario_path))
        return [
            "price", "--scenario", str(scenario_path),
            "--branch", "call-payoff",
            "--spot", _fmt(scenario.kink_spot), "--time", "0",
            "--out", str(out_file),
        ]
    scenario, _ = _load(str(scenario_path))
    kink = scenario.kink_spot
    spots = ",".join(_fmt(kink * f) for f in (0.8, 0.9, 1.0, 1.1, 1.2))
    return [
        "compare", "--scenario", str(scenario_path), "--branch", "call-payoff",
        "--spots", spots, "--tol", _fmt(_COMPARE_TOL),
        "--seed", "0", "--paths", "20000", "--ns", "200", "--nt", "200",
        "--out", str(out_file),
    ]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="powsym",
        description="Symmetry-reduction pricing engine for power options",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("price", help="price via the reduction pipeline")
    p.add_argument("--scenario", required=True)
    p.add_argument("--branch", required=True, choices=["zero-payoff", "call-payoff"])
    p.add_argument("--spot", required=True, type=float)
    p.add_argument("--time", required=True, type=float)
    p.add_argument("--backend", default="numeric", choices=["numeric", "closed"])
    p.add_argument("--out")

    v = sub.add_parser("verify-symmetry", help="determining-system residual check")
    v.add_argument("--scenario", required=True)
    v.add_argument("--constants", required=True,
                   help='e.g. "theta1=1,theta2=0,gamma1=0,gamma2=0,alpha1=0,k1=0"')
    v.add_argument("--samples", type=int, default=64)
    v.add_argument("--generator", action="store_true",
                   help="also run the generator convergence study")
    v.add_argument("--out")

    o = sub.add_parser("oracle", help="finite-difference / Monte Carlo oracles")
    osub = o.add_subparsers(dest="oracle", required=True)
    ofd = osub.add_parser("fd")
    ofd.add_argument("--scenario", required=True)
    ofd.add_argument("--ns", type=int, default=400)
    ofd.add_argument("--nt", type=int, default=400)
    ofd.add_argument("--domain-mult", type=float, default=4.0)
    ofd.add_argument("--spot", type=float)
    ofd.add_argument("--out")
    omc = osub.add_parser("mc")
    omc.add_argument("--scenario", required=True)
    omc.add_argument("--spot", required=True, type=float)
    omc.add_argument("--paths", type=int, default=200000)
    omc.add_argument("--steps", type=int, default=8)
    omc.add_argument("--seed", type=int, default=0)
    omc.add_argument("--out")

    c = sub.add_parser("compare", help="symmetry price vs FD vs MC")
    c.add_argument("--scenario", required=True)
    c.add_argument("--branch", required=True, choices=["zero-payoff", "call-payoff"])
    c.add_argument("--spots", required=True)
    c.add_argument("--tol", type=float, default=_COMPARE_TOL)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--paths", type=int, default=200000)
    c.add_argument("--steps", type=int, default=8)
    c.add_argument("--ns", type=int, default=400)
    c.add_argument("--nt", type=int, default=400)
    c.add_argument("--out")

    s = sub.add_parser("sweep", help="run a command over a scenario directory")
    s.add_argument("--scenario-dir", required=True)
    s.add_argument("--command", dest="command_name", required=True,
                   choices=["price", "compare"])
    s.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    ns = parser.parse_args(argv)
    try:
        if ns.cmd == "price":
            return cmd_price(ns, argv)
        if ns.cmd == "verify-symmetry":
            return cmd_verify_symmetry(ns, argv)
        if ns.cmd == "oracle":
            return cmd_oracle(ns, argv)
        if ns.cmd == "compare":
            return cmd_compare(ns, argv)
        if ns.cmd == "sweep":
            return cmd_sweep(ns, argv)
        raise ConfigError(f"unknown command {ns.cmd!r}")
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except EngineError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
