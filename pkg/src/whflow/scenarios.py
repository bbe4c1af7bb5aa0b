"""Build problems from configurations, run them, and write CSV artifacts."""
from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .analysis import DiagnosticsRecorder, write_csv, write_diagnostics_csv
from .config import DENSITIES, POTENTIALS, ScenarioConfig, SweepConfig
from .graph import WeightedGraph, build_lattice_1d
from .hamiltonian import HamiltonianSpec, State, energy_breakdown
from .integrators import SolverConfig, StepReport, integrate, make_stepper
from .viscosity import CFLError, MonotonicityError, ViscosityConfig, step_viscosity_upwind
from .weights import WeightRule

log = logging.getLogger(__name__)

# explicit steps carry no Newton statistics
_NO_NEWTON = StepReport()

SNAPSHOT_COLUMNS = ("x", "rho", "s", "density")


def interaction_matrix(token: str, n: int) -> np.ndarray | None:
    if token == "none":
        return None
    kind, _, val = token.partition(":")
    c = float(val)
    return c * np.eye(n) if kind == "diag" else np.full((n, n), c)


def build_problem(cfg: ScenarioConfig) -> tuple[WeightedGraph, HamiltonianSpec, State]:
    """Lattice, energy and initial state for ``cfg``.

    Node masses are density samples times ``h``, renormalised to sum to one.
    """
    g = build_lattice_1d(cfg.n, cfg.h, cfg.boundary)
    x = g.node_positions
    V = np.asarray(cfg.V, dtype=float) if isinstance(cfg.V, tuple) else float(cfg.V)
    spec = HamiltonianSpec(beta=cfg.beta, V=V, W=interaction_matrix(cfg.W, cfg.n),
                           theta=WeightRule.from_token(cfg.theta),
                           theta_tilde=WeightRule.from_token(cfg.theta_tilde))
    dens = np.asarray(cfg.rho0, dtype=float) if isinstance(cfg.rho0, tuple) else DENSITIES[cfg.rho0](x)
    rho = dens * cfg.h
    rho = rho / rho.sum()
    s = np.asarray(cfg.s0, dtype=float) if isinstance(cfg.s0, tuple) else POTENTIALS[cfg.s0](x)
    return g, spec, State(rho, np.array(s, dtype=float), 0.0)


def solver_config(cfg: ScenarioConfig, **extra) -> SolverConfig:
    return SolverConfig(residual_tol=cfg.newton_tol, max_iterations=cfg.max_iterations,
                        jacobian_mode=cfg.jacobian_mode, upwind_freeze=cfg.upwind_freeze,
                        chord=cfg.chord, **extra)


def snapshot_steps(cfg: ScenarioConfig) -> dict[int, float]:
    """Step index -> nominal time for every snapshot (always including 0 and ``T``)."""
    n, tau = cfg.n_steps, cfg.tau_eff
    out = {0: 0.0, n: cfg.T}
    for t in cfg.snapshot_times:
        out[min(n, int(round(t / tau)))] = t
    return dict(sorted(out.items()))


def write_snapshot(path, g: WeightedGraph, st: State, h: float) -> None:
    x = g.node_positions
    write_csv(path, SNAPSHOT_COLUMNS, zip(x, st.rho, st.s, st.rho / h))


@dataclass
class RunResult:
    completed: bool
    steps_taken: int
    t_final: float
    final_state: State
    records: list = field(default_factory=list)
    paths: list = field(default_factory=list)
    failure: str | None = None
    failure_time: float | None = None


def _integrate(cfg: ScenarioConfig, g, spec, st0, recorder, snaps: dict[int, float], on_snapshot):
    """Run the configured scheme; returns ``(final_state, steps, failure_message, failure_time)``."""
    n, tau = cfg.n_steps, cfg.tau_eff
    if cfg.is_viscosity:
        vcfg = ViscosityConfig(tau=tau, h=cfg.h, alpha=cfg.alpha)
        st = st0
        recorder(st, None)
        on_snapshot(0, st)
        for k in range(1, n + 1):
            try:
                st, _ = step_viscosity_upwind(st, vcfg)
            except (CFLError, MonotonicityError) as exc:
                return st, k - 1, str(exc), st.t
            st.t = k * tau
            recorder(st, _NO_NEWTON)
            if k in snaps:
                on_snapshot(k, st)
        return st, n, None, None

    counter = {"k": 0}

    def snap_observer(st, rep):
        k = counter["k"]
        if k in snaps:
            on_snapshot(k, st)
        counter["k"] = k + 1

    stepper = make_stepper(cfg.scheme)
    traj = integrate(g, spec, stepper, st0, tau, n, observers=(recorder, snap_observer),
                     cfg=solver_config(cfg), keep_every=None)
    if traj.failure is not None:
        return traj.final, traj.steps_taken, str(traj.failure), traj.failure.t
    return traj.final, traj.steps_taken, None, None


def run_scenario(cfg: ScenarioConfig, out_dir=None) -> RunResult:
    """Run ``cfg`` and write ``diagnostics.csv`` plus ``snapshot_t<time>.csv`` files.

    Artifacts go to ``out_dir`` (default ``cfg.output_path``).  On a step failure
    the partial diagnostics and the snapshots reached so far are still written.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_path)
    out.mkdir(parents=True, exist_ok=True)
    g, spec, st0 = build_problem(cfg)
    snaps = snapshot_steps(cfg)
    recorder = DiagnosticsRecorder(g, spec, every=cfg.record_every)
    paths = []

    def on_snapshot(k, st):
        p = out / f"snapshot_t{snaps[k]:.6f}.csv"
        write_snapshot(p, g, st, cfg.h)
        paths.append(str(p))

    log.info("running %s: n=%d h=%.6g tau=%.6g steps=%d scheme=%s", cfg.scenario, cfg.n, cfg.h,
             cfg.tau_eff, cfg.n_steps, cfg.scheme)
    st, steps, failure, t_fail = _integrate(cfg, g, spec, st0, recorder, snaps, on_snapshot)
    records = recorder.finish()
    diag = out / "diagnostics.csv"
    write_diagnostics_csv(diag, records)
    paths.insert(0, str(diag))
    if failure is not None:
        log.warning("step failure: %s", failure)
    return RunResult(failure is None, steps, st.t, st, records, paths, failure, t_fail)


# --- beta / tau sweep -------------------------------------------------------


def run_succeeds(cfg: ScenarioConfig, energy_rel_tol: float, require_positivity: bool = True,
                 require_newton_convergence: bool = True) -> bool:
    """Success test for one sweep run.

    The run must reach ``T`` and satisfy ``|H(T) - H0| <= energy_rel_tol * max(|H0|, 1)``.
    With ``require_newton_convergence=False`` unconverged Newton solves are kept
    instead of ending the run.  Densities must stay positive in any case (the
    Fisher term is undefined otherwise), and ``require_positivity`` adds a
    check of the final state.  Newton solves that stall at the rounding floor
    (see :class:`SolverConfig`) are accepted here: with a large ``beta`` the
    Fisher terms are big enough that an absolute residual of ``newton_tol`` is
    below what double precision can resolve.
    """
    g, spec, st0 = build_problem(cfg)
    H0 = energy_breakdown(g, spec, st0).H
    scfg = solver_config(cfg, accept_unconverged=not require_newton_convergence,
                         accept_roundoff_floor=True)
    traj = integrate(g, spec, make_stepper(cfg.scheme), st0, cfg.tau_eff, cfg.n_steps,
                     cfg=scfg, keep_every=None)
    if traj.failure is not None:
        return False
    final = traj.final
    if require_positivity and not final.is_interior():
        return False
    H = energy_breakdown(g, spec, final).H
    return abs(H - H0) <= energy_rel_tol * max(abs(H0), 1.0)


def largest_stable_tau(sweep: SweepConfig, beta: float) -> float:
    """Largest ``tau`` in ``[tau_lo, tau_hi]`` below the first failure; 0 if ``tau_lo`` fails.

    Success is not monotone in ``tau`` when the density barrier is weak, so a
    plain bisection can jump past an isolated failure.  We therefore walk up a
    geometric grid of ``scan_points`` values from ``tau_lo`` until the first
    failure and then bisect between the last success and that failure.
    """
    base = replace(sweep.base, beta=beta)

    def ok(tau):
        good = run_succeeds(replace(base, tau=tau), sweep.energy_rel_tol,
                            sweep.require_positivity, sweep.require_newton_convergence)
        log.debug("beta=%g tau=%g -> %s", beta, tau, good)
        return good

    lo, hi = sweep.tau_lo, sweep.tau_hi
    if not ok(lo):
        return 0.0
    if lo == hi:
        return lo
    grid = np.geomspace(lo, hi, max(sweep.scan_points, 2))
    for tau in grid[1:]:
        if not ok(tau):
            hi = float(tau)
            break
        lo = float(tau)
    else:
        return hi
    while hi - lo > sweep.bisection_tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo


@dataclass
class SweepRow:
    beta: float
    H0_over_beta: float
    tau_max: float


def _sweep_point(args):
    sweep, beta = args
    g, spec, st0 = build_problem(replace(sweep.base, beta=beta))
    H0 = energy_breakdown(g, spec, st0).H
    return SweepRow(beta, H0 / beta, largest_stable_tau(sweep, beta))


def sweep_beta_tau(sweep: SweepConfig, out_dir=None) -> tuple[list[SweepRow], str]:
    """Run the sweep and write ``sweep.csv`` with columns ``beta, H0_over_beta, tau_max``."""
    out = Path(out_dir if out_dir is not None else sweep.base.output_path)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(sweep, b) for b in sweep.beta_values]
    if sweep.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(sweep.workers, len(jobs), os.cpu_count() or 1)) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    path = out / "sweep.csv"
    write_csv(path, ("beta", "H0_over_beta", "tau_max"),
              ((r.beta, r.H0_over_beta, r.tau_max) for r in rows))
    return rows, str(path)


def initial_energy(cfg: ScenarioConfig) -> float:
    g, spec, st0 = build_problem(cfg)
    return energy_breakdown(g, spec, st0).H

