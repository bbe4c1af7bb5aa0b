import math
from dataclasses import replace

import numpy as np
import pytest

from whflow.analysis import two_node_closed_form, two_node_graph, two_node_spec
from whflow.graph import build_lattice_1d
from whflow.hamiltonian import HamiltonianSpec, State, energy_breakdown, vector_field
from whflow.integrators import (EXPLICIT_EULER, GAUSS2, MIDPOINT, SYMPLECTIC_EULER, SolverConfig,
                                StepFailure, Tableau, check_tableau_symplectic, integrate,
                                make_stepper, step_explicit_euler, step_implicit_midpoint,
                                step_prk, step_symplectic_euler, symplecticity_residual)
from whflow.config import parse_config
from whflow.scenarios import build_problem
from whflow.weights import AVERAGE, LOGMEAN, UPWIND

from conftest import random_state

RHO0, S0 = (0.7, 0.3), (0.1, -0.1)


def two_node_error(stepper, tau, T):
    g, spec = two_node_graph(), two_node_spec()
    n = int(round(T / tau))
    traj = integrate(g, spec, stepper, State(RHO0, S0), T / n, n)
    assert traj.completed
    return max(np.abs(st.rho - two_node_closed_form(RHO0, S0, st.t).rho).max() for st in traj.states)


def test_tableau_predicate():
    assert check_tableau_symplectic(SYMPLECTIC_EULER, 1e-14)
    assert check_tableau_symplectic(MIDPOINT, 1e-14)
    assert check_tableau_symplectic(GAUSS2, 1e-14)
    assert not check_tableau_symplectic(EXPLICIT_EULER, 1e-14)
    assert symplecticity_residual(EXPLICIT_EULER) == 1.0


@pytest.mark.parametrize("kwargs", [
    dict(a=[[0.5]], a_tilde=[[0.5]], b=[0.9]),
    dict(a=[[0.5]], a_tilde=[[0.5, 0.1]], b=[1.0]),
    dict(a=[[0, 0], [0, 0]], a_tilde=[[0, 0], [0, 0]], b=[1.0, 0.0]),
])
def test_tableau_validation(kwargs):
    with pytest.raises(ValueError):
        Tableau("bad", **kwargs)


def test_prk_refuses_nonsymplectic_tableau():
    g, spec = two_node_graph(), two_node_spec()
    with pytest.raises(ValueError):
        step_prk(g, spec, EXPLICIT_EULER, State(RHO0, S0), 1e-3)


def test_solver_config_validation():
    for bad in (dict(residual_tol=0), dict(max_iterations=0), dict(jacobian_mode="x"),
                dict(upwind_freeze="never")):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


@pytest.mark.parametrize("stepper", [step_symplectic_euler, step_implicit_midpoint,
                                     make_stepper("prk:gauss2"), step_explicit_euler])
def test_uniform_state_is_fixed(stepper):
    g = build_lattice_1d(6, 1 / 6)
    st = State(np.full(6, 1 / 6), np.full(6, 0.3))
    out, rep = stepper(g, HamiltonianSpec(beta=0.5), st, 1e-2, SolverConfig())
    assert np.array_equal(out.rho, st.rho) and np.array_equal(out.s, st.s)
    assert rep.newton_iterations == 0 and rep.converged


def test_midpoint_is_second_order():
    e1 = two_node_error(step_implicit_midpoint, math.pi / 200, math.pi)
    e2 = two_node_error(step_implicit_midpoint, math.pi / 400, math.pi)
    assert math.log2(e1 / e2) == pytest.approx(2.0, abs=0.2)


def test_symplectic_euler_is_first_order():
    e1 = two_node_error(step_symplectic_euler, math.pi / 400, math.pi / 2)
    e2 = two_node_error(step_symplectic_euler, math.pi / 800, math.pi / 2)
    assert math.log2(e1 / e2) == pytest.approx(1.0, abs=0.2)


def test_symplectic_euler_error_is_order_tau():
    tau = 1e-4
    err = two_node_error(step_symplectic_euler, tau, math.pi / 2)
    assert err <= 2 * tau


def test_gauss2_is_fourth_order():
    stepper = make_stepper("prk:gauss2")
    e1 = two_node_error(stepper, math.pi / 20, math.pi)
    e2 = two_node_error(stepper, math.pi / 40, math.pi)
    assert math.log2(e1 / e2) == pytest.approx(4.0, abs=0.3)


def test_full_period_returns_to_start():
    g, spec = two_node_graph(), two_node_spec()
    n, tau = 2000, 2 * math.pi / 2000
    traj = integrate(g, spec, step_implicit_midpoint, State(RHO0, S0), tau, n, keep_every=None)
    err = np.abs(traj.final.rho - np.array(RHO0)).max()
    per_step = two_node_error(step_implicit_midpoint, tau, tau * 10) / 10
    assert err <= 2 * max(per_step, 1e-15) * n


@pytest.mark.parametrize("theta", [AVERAGE, LOGMEAN, UPWIND])
def test_prk_reproduces_dedicated_steppers(rng, cycle8, theta):
    spec = HamiltonianSpec(beta=0.01, theta=theta, theta_tilde=LOGMEAN)
    st = random_state(rng, 8, spread=0.3, s_scale=0.05)
    a, _ = step_implicit_midpoint(cycle8, spec, st, 1e-3)
    b, _ = step_prk(cycle8, spec, MIDPOINT, st, 1e-3)
    assert np.allclose(a.rho, b.rho, rtol=0, atol=1e-12) and np.allclose(a.s, b.s, rtol=0, atol=1e-11)
    a, _ = step_symplectic_euler(cycle8, spec, st, 1e-3)
    b, _ = step_prk(cycle8, spec, SYMPLECTIC_EULER, st, 1e-3)
    assert np.allclose(a.rho, b.rho, rtol=0, atol=1e-12) and np.allclose(a.s, b.s, rtol=0, atol=1e-11)


def test_explicit_euler_matches_vector_field(rng, cycle8):
    spec = HamiltonianSpec(beta=0.01)
    st = random_state(rng, 8)
    out, _ = step_explicit_euler(cycle8, spec, st, 1e-3)
    drho, ds = vector_field(cycle8, spec, st)
    assert np.allclose(out.rho, st.rho + 1e-3 * drho, atol=1e-15)
    assert np.allclose(out.s, st.s + 1e-3 * ds, atol=1e-14)


def test_finite_difference_jacobian_agrees(rng, cycle8):
    spec = HamiltonianSpec(beta=0.02, theta_tilde=LOGMEAN)
    st = random_state(rng, 8, s_scale=0.1)
    a, ra = step_implicit_midpoint(cycle8, spec, st, 1e-3)
    b, rb = step_implicit_midpoint(cycle8, spec, st, 1e-3, SolverConfig(jacobian_mode="finite_difference"))
    assert np.allclose(a.rho, b.rho, atol=1e-12) and np.allclose(a.s, b.s, atol=1e-11)
    assert ra.converged and rb.converged


def test_chord_and_per_iterate_modes(rng, cycle8):
    spec = HamiltonianSpec(beta=0.02, theta=UPWIND)
    st = random_state(rng, 8, s_scale=0.1)
    ref, _ = step_implicit_midpoint(cycle8, spec, st, 1e-3)
    chord, rep = step_implicit_midpoint(cycle8, spec, st, 1e-3, SolverConfig(chord=True))
    assert np.allclose(ref.rho, chord.rho, atol=1e-12)
    assert rep.jacobian_evaluations <= rep.newton_iterations
    per, rep = step_implicit_midpoint(cycle8, spec, st, 1e-3, SolverConfig(upwind_freeze="per_iterate"))
    assert rep.converged and abs(per.mass - 1) < 1e-14


@pytest.mark.parametrize("token", ["symplectic_euler", "midpoint", "prk:gauss2", "explicit_euler"])
def test_mass_is_conserved_per_step(rng, cycle8, token):
    spec = HamiltonianSpec(beta=0.05, V=rng.standard_normal(8))
    st = random_state(rng, 8, s_scale=0.2)
    traj = integrate(cycle8, spec, make_stepper(token), st, 1e-3, 50)
    assert traj.completed
    masses = np.array([s.mass for s in traj.states])
    assert np.max(np.abs(np.diff(masses))) <= 10 * 1e-12


def test_newton_failure_is_reported(rng, cycle8):
    spec = HamiltonianSpec(beta=0.05)
    st = random_state(rng, 8, s_scale=0.05)
    with pytest.raises(StepFailure) as err:
        step_implicit_midpoint(cycle8, spec, st, 1e-2, SolverConfig(max_iterations=1))
    assert err.value.cause == "newton"
    out, rep = step_implicit_midpoint(cycle8, spec, st, 1e-2,
                                      SolverConfig(max_iterations=1, accept_unconverged=True))
    assert not rep.converged and rep.final_residual > 1e-12


def test_roundoff_floor_is_flagged_not_converged():
    # beta = 1000 makes the Fisher terms so large that the residual bottoms out
    # near 1e-11, above the default absolute tolerance
    sweep = parse_config("beta_values = 1000\n")
    g, spec, st = build_problem(replace(sweep.base, beta=1000.0))
    with pytest.raises(StepFailure) as err:
        step_implicit_midpoint(g, spec, st, 0.05)
    assert err.value.cause == "newton" and err.value.report.roundoff_limited
    assert err.value.report.newton_iterations < 10
    out, rep = step_implicit_midpoint(g, spec, st, 0.05, SolverConfig(accept_roundoff_floor=True))
    assert rep.roundoff_limited and not rep.converged
    assert 1e-12 < rep.final_residual < 1e-10
    assert abs(out.mass - 1.0) < 1e-12


def test_positivity_failure_stops_integration():
    g, spec = two_node_graph(), two_node_spec()
    traj = integrate(g, spec, step_implicit_midpoint, State((0.5, 0.5), (0.6, -0.6)), 1e-2, 400)
    assert not traj.completed and traj.failure.cause == "positivity"
    assert 0 < traj.steps_taken < 400
    assert traj.final.is_interior()


def test_integrate_zero_steps_and_observers():
    g, spec = two_node_graph(), two_node_spec()
    seen = []
    traj = integrate(g, spec, step_implicit_midpoint, State(RHO0, S0), 1e-2, 0,
                     observers=[lambda st, rep: seen.append(rep)])
    assert len(traj.states) == 1 and seen == [None] and traj.completed
    traj = integrate(g, spec, step_implicit_midpoint, State(RHO0, S0), 1e-2, 7, keep_every=3,
                     observers=[lambda st, rep: seen.append(rep)])
    assert [round(t, 12) for t in traj.times] == [0, 0.03, 0.06, 0.07]
    assert len(seen) == 9 and all(r.converged for r in seen[2:])
    with pytest.raises(ValueError):
        integrate(g, spec, step_implicit_midpoint, State(RHO0, S0), 0.0, 3)


def test_unknown_stepper_tokens():
    for tok in ("rk4", "prk:radau"):
        with pytest.raises(ValueError):
            make_stepper(tok)


def test_energy_nearly_conserved_by_midpoint(rng, cycle8):
    spec = HamiltonianSpec(beta=0.01, theta=AVERAGE)
    st = random_state(rng, 8, spread=0.2, s_scale=0.05)
    H0 = energy_breakdown(cycle8, spec, st).H
    traj = integrate(cycle8, spec, step_implicit_midpoint, st, 1e-3, 200)
    drift = max(abs(energy_breakdown(cycle8, spec, s).H - H0) for s in traj.states)
    assert drift <= 1e-4 * max(1.0, abs(H0))
