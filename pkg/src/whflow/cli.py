"""Command line entry point: ``whflow run``, ``whflow sweep`` and ``whflow oracle``.

Exit status is 0 on success, 2 when a time step fails and 3 for configuration
problems (including unreadable files).
"""
from __future__ import annotations

import argparse
import logging
import sys

from .analysis import format_value, two_node_closed_form
from .config import ConfigError, ScenarioConfig, SweepConfig, load_config
from .scenarios import run_scenario, sweep_beta_tau

EXIT_OK = 0
EXIT_STEP_FAILURE = 2
EXIT_CONFIG = 3

log = logging.getLogger("whflow")


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="whflow",
                                description="Wasserstein-Hamiltonian flows on graphs.")
    p.add_argument("-v", "--verbose", action="count", default=0,
                   help="more logging on stderr (repeat for debug output)")
    sub = p.add_subparsers(dest="command", required=True)

    for name, helptext in (("run", "run one scenario and write CSV artifacts"),
                           ("sweep", "largest stable time step for each beta")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", required=True, help="key = value configuration file")
        c.add_argument("--out", default=None, help="output directory (default: output_path)")
        c.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a configuration entry; may be repeated")

    orc = sub.add_parser("oracle", help="closed-form reference solutions")
    osub = orc.add_subparsers(dest="oracle", required=True)
    two = osub.add_parser("two-node", help="exact state of the two-node system at time t")
    two.add_argument("--t", type=float, required=True)
    two.add_argument("--rho0", type=float, nargs=2, default=(0.7, 0.3), metavar=("R1", "R2"))
    two.add_argument("--s0", type=float, nargs=2, default=(0.0, 0.0), metavar=("S1", "S2"))
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    if not isinstance(cfg, ScenarioConfig):
        raise ConfigError("this file describes a sweep; use 'whflow sweep'")
    res = run_scenario(cfg, args.out)
    for path in res.paths:
        print(path)
    if not res.completed:
        print(f"step failure at t={res.failure_time:.9g}: {res.failure}", file=sys.stderr)
        return EXIT_STEP_FAILURE
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    if not isinstance(cfg, SweepConfig):
        raise ConfigError("no sweep keys found (beta_values is required)")
    rows, path = sweep_beta_tau(cfg, args.out)
    for r in rows:
        log.info("beta=%g H0/beta=%.6g tau_max=%.6g", r.beta, r.H0_over_beta, r.tau_max)
    print(path)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    try:
        st = two_node_closed_form(args.rho0, args.s0, args.t)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print("t,rho1,rho2,s1,s2")
    print(",".join(format_value(v) for v in (args.t, *st.rho, *st.s)))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "sweep": _cmd_sweep, "oracle": _cmd_oracle}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
