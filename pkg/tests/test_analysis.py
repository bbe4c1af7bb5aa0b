import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from whflow.analysis import (BlowUpError, BoundInapplicable, BoundInputs, DiagnosticsRecorder,
                             applicable_lower_bound, bound_inputs, consistency_residual,
                             lower_bound_boundary, lower_bound_periodic, min_potential,
                             observed_orders, read_diagnostics_csv, record_diagnostics,
                             step_size_bound, symplecticity_defect, trig_field,
                             two_node_closed_form, two_node_graph, two_node_min_density,
                             two_node_spec, two_node_upwind_blowup, two_node_upwind_reference,
                             two_node_upwind_rhs, two_node_upwind_spec, write_diagnostics_csv)
from whflow.graph import build_lattice_1d
from whflow.hamiltonian import HamiltonianSpec, State, vector_field
from whflow.integrators import StepReport, integrate, step_implicit_midpoint
from whflow.weights import AVERAGE, LOGMEAN


def inputs(M_over_beta, N, min_rho0, **kw):
    return BoundInputs(H0=M_over_beta, min_potential=0.0, beta=1.0, N=N, min_rho0=min_rho0, **kw)


# --- lower bounds


def test_periodic_bound_example():
    b = lower_bound_periodic(inputs(1.0, 4, 0.1))
    assert b.value == pytest.approx(1 / (1 + 4 * math.exp(6)), rel=1e-14)
    assert b.value == pytest.approx(6.193e-4, rel=1e-4)
    assert b.hypothesis_holds


def test_periodic_bound_zero_slack():
    assert lower_bound_periodic(inputs(0.0, 4, 0.1)).value == pytest.approx(0.05)
    assert lower_bound_periodic(inputs(0.0, 9, 0.3)).value == pytest.approx(0.1)


def test_boundary_bound_three_node_path():
    # exponent 2 * 1 * (d_max - 1) * (N - 1) = 4 and prefactor kappa (d_max - 1) = 2
    b = lower_bound_boundary(inputs(1.0, 3, 0.2, kappa=2, d_max=2))
    assert b.value == pytest.approx(1 / (1 + 2 * math.exp(4)), rel=1e-14)
    assert b.value == pytest.approx(9.0747e-3, rel=1e-4)


def test_boundary_bound_zero_slack():
    b = lower_bound_boundary(inputs(0.0, 5, 0.3, kappa=2, d_max=4))
    assert b.value == pytest.approx(min(0.15, 1 / (1 + 2 * 3)))


def test_boundary_bound_needs_two_boundary_nodes():
    with pytest.raises(BoundInapplicable):
        lower_bound_boundary(inputs(1.0, 5, 0.1, kappa=0, d_max=2))


def test_bounds_need_positive_beta():
    with pytest.raises(BoundInapplicable):
        lower_bound_periodic(BoundInputs(1.0, 0.0, 0.0, 4, 0.1))


def test_bound_never_underflows_in_log_space():
    b = lower_bound_periodic(inputs(1e4, 200, 1e-3))
    assert b.value == 0.0 and math.isfinite(b.log_value) and b.log_value < -1e6


@settings(max_examples=200)
@given(st.floats(0, 50), st.floats(0, 50), st.integers(3, 40), st.floats(1e-4, 0.3))
def test_bounds_monotone_and_capped(m1, m2, N, rho_min):
    lo, hi = sorted((m1, m2))
    a, b = lower_bound_periodic(inputs(lo, N, rho_min)), lower_bound_periodic(inputs(hi, N, rho_min))
    assert b.log_value <= a.log_value <= math.log(0.5 * rho_min) + 1e-12
    kw = dict(kappa=2, d_max=N - 1)
    a, b = lower_bound_boundary(inputs(lo, N, rho_min, **kw)), lower_bound_boundary(inputs(hi, N, rho_min, **kw))
    assert b.log_value <= a.log_value <= math.log(0.5 * rho_min) + 1e-12


def test_omega_tilde_rescaling():
    plain = lower_bound_periodic(inputs(1.0, 4, 0.1))
    scaled = lower_bound_periodic(inputs(2.0, 4, 0.1, omega_tilde_min=2.0))
    assert scaled.value == pytest.approx(plain.value)


def test_min_potential_and_bound_routing():
    W = np.array([[1.0, -0.5], [-0.5, 2.0]])
    spec = HamiltonianSpec(beta=0.1, V=np.array([0.3, -0.2]), W=W)
    assert min_potential(spec, 2) == pytest.approx(-0.2 - 0.5)
    path = build_lattice_1d(5, 0.25, "path")
    st0 = State(np.array([0.1, 0.2, 0.3, 0.2, 0.2]), np.zeros(5))
    spec = HamiltonianSpec(beta=0.5)
    b = bound_inputs(path, spec, st0)
    assert (b.kappa, b.d_max, b.N, b.omega_tilde_min) == (2, 4, 5, 16.0)
    assert applicable_lower_bound(path, spec, st0).value == lower_bound_boundary(b).value
    cyc = build_lattice_1d(5, 0.2)
    assert applicable_lower_bound(cyc, spec, st0).value == lower_bound_periodic(bound_inputs(cyc, spec, st0)).value


# --- step-size restriction


def test_step_size_example():
    assert step_size_bound(1.0, 1.0, 1.0, 1.0, 0.0, 1.0) == pytest.approx(0.5)


def test_step_size_limits():
    assert step_size_bound(0.5, 1.0, 2.0, 0.0, 1.0, 0.0) == pytest.approx(0.5)
    beta = 100.0
    ratio = step_size_bound(0.05, 1.0, 1.0, 1e-9, 0.0, beta) / step_size_bound(0.1, 1.0, 1.0, 1e-9, 0.0, beta)
    assert ratio == pytest.approx(0.25, rel=0.1)
    assert step_size_bound(1.0, 1.0, 1.0, 1.0, 0.0, 1.0, safety=0.1) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        step_size_bound(1.5, 1.0, 1.0, 1.0, 0.0, 1.0)


# --- diagnostics


def test_diagnostics_initial_and_stationary(tmp_path):
    g = build_lattice_1d(6, 1 / 6)
    spec = HamiltonianSpec(beta=0.3)
    st0 = State(np.full(6, 1 / 6), np.zeros(6))
    rec = DiagnosticsRecorder(g, spec, every=4)
    integrate(g, spec, step_implicit_midpoint, st0, 1e-2, 10, observers=[rec])
    records = rec.finish()
    assert [round(r.t, 12) for r in records] == [0, 0.04, 0.08, 0.1]
    assert all(r.energy_error == 0 and r.H == 0 and r.mass == pytest.approx(1.0) for r in records)
    path = tmp_path / "d.csv"
    write_diagnostics_csv(path, records)
    text = path.read_bytes()
    assert text.startswith(b"t,mass,H,energy_error,K,I,V,W,min_rho,newton_iters\n")
    assert b"\r" not in text
    assert read_diagnostics_csv(path) == records


def test_record_diagnostics_fields():
    g, spec = two_node_graph(), two_node_spec()
    st = State([0.7, 0.3], [0.2, 0.0], 1.5)
    r = record_diagnostics(g, spec, st, H0=0.1, newton_iterations=3)
    assert r.t == 1.5 and r.min_rho == 0.3 and r.newton_iters == 3
    assert r.energy_error == r.H - 0.1
    assert r.H == pytest.approx(r.K + r.V + r.W)


# --- symplecticity


def rotation_stepper(g, spec, st, tau, cfg=None):
    c, s = math.cos(tau), math.sin(tau)
    return State([c * st.rho[0] + s * st.s[0]], [-s * st.rho[0] + c * st.s[0]], st.t + tau), StepReport()


def shear_stepper(g, spec, st, tau, cfg=None):
    return State(2 * st.rho, st.s, st.t + tau), StepReport()


def test_exact_rotation_has_no_defect():
    # the map is linear, so a wide stencil is exact and keeps rounding small
    assert symplecticity_defect(rotation_stepper, None, None, State([0.3], [0.1]), 0.7, fd_eps=0.1) <= 1e-12
    assert symplecticity_defect(shear_stepper, None, None, State([0.3], [0.1]), 0.7) == pytest.approx(1.0)


# --- two-node oracles


def test_closed_form_examples():
    st = two_node_closed_form((0.7, 0.3), (0.0, 0.0), math.pi)
    assert st.rho == pytest.approx([0.3, 0.7], abs=1e-15)
    st = two_node_closed_form((0.5, 0.5), (0.4, 0.4), 2.3)
    assert np.array_equal(st.rho, [0.5, 0.5])
    assert two_node_min_density((0.5, 0.5), (0.6, -0.6)) == pytest.approx(-0.1)
    assert two_node_closed_form((0.5, 0.5), (0.6, -0.6), math.pi / 2).rho[1] == pytest.approx(-0.1)
    with pytest.raises(ValueError):
        two_node_closed_form((0.5, 0.6), (0, 0), 1.0)


def test_closed_form_solves_the_system(rng):
    g, spec = two_node_graph(), two_node_spec()
    rho0, s0 = (0.65, 0.35), (0.3, 0.1)
    for t in rng.uniform(0, 20, 100):
        st = two_node_closed_form(rho0, s0, t)
        eps = 1e-5
        a, b = two_node_closed_form(rho0, s0, t + eps), two_node_closed_form(rho0, s0, t - eps)
        drho, ds = vector_field(g, spec, st)
        assert np.allclose(drho, (a.rho - b.rho) / (2 * eps), atol=1e-9, rtol=0)
        assert np.allclose(ds, (a.s - b.s) / (2 * eps), atol=1e-9, rtol=0)


def test_blowup_closed_form():
    assert np.allclose(two_node_upwind_blowup((0.5, 0.5), (2.0, 0.0), 0.0).rho, [0.5, 0.5])
    st = two_node_upwind_blowup((0.5, 0.5), (2.0, 0.0), 0.9)
    assert st.s[0] - st.s[1] == pytest.approx(20.0)
    near = two_node_upwind_blowup((0.5, 0.5), (2.0, 0.0), 1 - 1e-6)
    assert near.rho == pytest.approx([1.0, 0.0], abs=1e-10)
    with pytest.raises(BlowUpError) as err:
        two_node_upwind_blowup((0.5, 0.5), (2.0, 0.0), 1.0)
    assert err.value.t_star == 1.0


def test_blowup_matches_graph_vector_field():
    g, spec = two_node_graph(), two_node_upwind_spec()
    st = two_node_upwind_blowup((0.6, 0.4), (1.5, 0.5), 0.3)
    drho, ds = vector_field(g, spec, st)
    assert np.allclose(two_node_upwind_rhs(*st.rho, *st.s), np.concatenate([drho, ds]), atol=1e-14)
    eps = 1e-6
    a = two_node_upwind_blowup((0.6, 0.4), (1.5, 0.5), 0.3 + eps)
    b = two_node_upwind_blowup((0.6, 0.4), (1.5, 0.5), 0.3 - eps)
    assert np.allclose(drho, (a.rho - b.rho) / (2 * eps), atol=1e-8)
    assert np.allclose(ds, (a.s - b.s) / (2 * eps), atol=1e-8)


def test_blowup_reference_tracks_closed_form():
    st, hit = two_node_upwind_reference((0.5, 0.5), (2.0, 0.0), 0.5, tau=1e-5)
    exact = two_node_upwind_blowup((0.5, 0.5), (2.0, 0.0), 0.5)
    assert hit is None
    assert np.allclose(st.rho, exact.rho, atol=1e-4) and np.allclose(st.s, exact.s, atol=1e-4)


# --- consistency


def test_constant_fields_have_zero_residual():
    for spec in (HamiltonianSpec(beta=0.1, theta=AVERAGE), HamiltonianSpec(beta=0.1, theta=LOGMEAN)):
        r = consistency_residual(1 / 32, trig_field(1.0, 0.0), trig_field(0.5, 0.0), spec)
        assert r == (0.0, 0.0)


def test_consistency_residual_decreases():
    rho, s = trig_field(1.0, 0.2), trig_field(0.0, 1.0, "cos")
    spec = HamiltonianSpec(beta=0.01, theta=LOGMEAN, theta_tilde=LOGMEAN)
    h = [1 / 32, 1 / 64, 1 / 128]
    res = [max(consistency_residual(x, rho, s, spec)) for x in h]
    assert np.all(np.diff(res) < 0)
    assert observed_orders(h, res) == pytest.approx([2.0, 2.0], abs=0.2)
    with pytest.raises(ValueError):
        consistency_residual(0.3, rho, s, spec)
    with pytest.raises(ValueError):
        trig_field(1.0, 0.1, "tan")
