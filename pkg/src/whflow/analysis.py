"""Density lower bounds, step-size restriction, diagnostics, closed-form oracles and
consistency measurements."""
from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields
from typing import Callable, Iterable

import numpy as np

from .graph import WeightedGraph, boundary_metrics, build_lattice_1d
from .hamiltonian import HamiltonianSpec, State, energy_breakdown, vector_field
from .weights import AVERAGE, UPWIND

# --- lower bounds -----------------------------------------------------------


class BoundInapplicable(ValueError):
    """The requested lower bound does not apply to these inputs."""


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of the energy-based density floors.

    ``min_potential`` must bound ``V_i + sum_j W_ij rho_j`` from below over the
    simplex.  ``omega_tilde_min`` rescales ``M`` for Fisher weights other than one.
    """

    H0: float
    min_potential: float
    beta: float
    N: int
    min_rho0: float
    kappa: int = 0
    d_max: int = 0
    omega_tilde_min: float = 1.0

    @property
    def M(self) -> float:
        return self.H0 - self.min_potential

    @property
    def scaled_M(self) -> float:
        return self.M / self.omega_tilde_min


@dataclass(frozen=True)
class DensityBound:
    """A density floor.

    ``value`` may underflow to zero for extreme inputs; ``log_value`` does not.
    ``hypothesis_holds`` records whether ``min_rho0 < 1/N``, the starting
    assumption under which the floor was proved.
    """

    value: float
    log_value: float
    hypothesis_holds: bool

    def __float__(self):
        return self.value


def _check_bound_inputs(b: BoundInputs):
    if not b.beta > 0:
        raise BoundInapplicable("density floors need beta > 0")
    if b.N < 2:
        raise BoundInapplicable("density floors need at least two nodes")
    if not b.min_rho0 > 0:
        raise ValueError("min_rho0 must be positive")
    if b.M < 0:
        raise ValueError(f"M = H0 - min_potential must be nonnegative, got {b.M}")
    if not b.omega_tilde_min > 0:
        raise ValueError("omega_tilde_min must be positive")


def _floor(b: BoundInputs, log_prefactor: float, exponent: float) -> DensityBound:
    # 1 / (1 + P exp(x)) evaluated as exp(-log(1 + exp(log P + x)))
    log_term = -np.logaddexp(0.0, log_prefactor + exponent)
    log_half = math.log(0.5 * b.min_rho0)
    log_value = min(log_half, float(log_term))
    return DensityBound(math.exp(log_value), log_value, b.min_rho0 < 1.0 / b.N)


def lower_bound_periodic(b: BoundInputs) -> DensityBound:
    """Floor ``min(rho0_min/2, 1/(1 + N exp(M (N-1) ([(N-1)/2] + 1) / beta)))`` for cycles."""
    _check_bound_inputs(b)
    N = b.N
    x = b.scaled_M * (N - 1) * ((N - 1) // 2 + 1) / b.beta
    return _floor(b, math.log(N), x)


def lower_bound_boundary(b: BoundInputs) -> DensityBound:
    """Floor ``min(rho0_min/2, 1/(1 + kappa (d-1) exp(2 M (d-1) (N-1) / beta)))``.

    ``kappa`` counts boundary nodes and ``d`` is their largest hop distance.
    """
    _check_bound_inputs(b)
    if b.kappa < 2:
        raise BoundInapplicable(f"needs at least two boundary nodes, got kappa={b.kappa}")
    if b.d_max < 2:
        raise BoundInapplicable(f"needs d_max >= 2, got {b.d_max}")
    d1 = b.d_max - 1
    x = 2.0 * b.scaled_M * d1 * (b.N - 1) / b.beta
    return _floor(b, math.log(b.kappa * d1), x)


def min_potential(spec: HamiltonianSpec, n: int) -> float:
    """State-independent lower bound of ``V_i + sum_j W_ij rho_j`` on the simplex.

    The ``W`` contribution is also valid for the halved interaction energy.
    """
    v = float(np.min(spec.potential(n)))
    if spec.W is None:
        return v
    w = float(spec.W.min())
    return v + min(w, 0.5 * w)


def bound_inputs(g: WeightedGraph, spec: HamiltonianSpec, st0: State) -> BoundInputs:
    """Collect :class:`BoundInputs` for an initial state on ``g``."""
    kappa, d_max = boundary_metrics(g) if g.boundary_nodes else (0, 0)
    return BoundInputs(
        H0=energy_breakdown(g, spec, st0).H,
        min_potential=min_potential(spec, g.n_nodes),
        beta=spec.beta,
        N=g.n_nodes,
        min_rho0=float(st0.rho.min()),
        kappa=kappa,
        d_max=d_max,
        omega_tilde_min=float(g.omega_tilde.min()),
    )


def applicable_lower_bound(g: WeightedGraph, spec: HamiltonianSpec, st0: State) -> DensityBound:
    """Boundary floor when the graph has two or more degree-one nodes, cycle floor otherwise."""
    b = bound_inputs(g, spec, st0)
    if b.kappa >= 2:
        return lower_bound_boundary(b)
    return lower_bound_periodic(b)


def step_size_bound(c: float, c0: float, C0: float, M: float, M0: float, beta: float,
                    safety: float = 1.0) -> float:
    """``safety * min(1/C0, sqrt(c c0 / M)/C0, c**2 / (beta (1 + c + M0 c**2)) / C0)``.

    The middle term is dropped when ``M = 0`` and the last one when ``beta = 0``.
    """
    if not 0 < c <= 1:
        raise ValueError(f"c must lie in (0, 1], got {c}")
    if not 0 < c0 <= C0:
        raise ValueError("need 0 < c0 <= C0")
    if M < 0 or beta < 0 or not safety > 0:
        raise ValueError("need M >= 0, beta >= 0 and safety > 0")
    terms = [1.0 / C0]
    if M > 0:
        terms.append(math.sqrt(c * c0 / M) / C0)
    if beta > 0:
        terms.append(c * c / (beta * (1.0 + c + M0 * c * c)) / C0)
    return safety * min(terms)


# --- diagnostics ------------------------------------------------------------


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    mass: float
    H: float
    energy_error: float
    K: float
    I: float
    V: float
    W: float
    min_rho: float
    newton_iters: int = 0


DIAGNOSTICS_COLUMNS = tuple(f.name for f in fields(DiagnosticsRecord))


def record_diagnostics(g: WeightedGraph, spec: HamiltonianSpec, st: State, H0: float,
                       newton_iterations: int = 0) -> DiagnosticsRecord:
    e = energy_breakdown(g, spec, st)
    return DiagnosticsRecord(st.t, st.mass, e.H, e.H - H0, e.K, e.I, e.V, e.W,
                             float(st.rho.min()), int(newton_iterations))


class DiagnosticsRecorder:
    """Observer for :func:`whflow.integrators.integrate` collecting records.

    Records the initial state, every ``every``-th step and always the last step
    seen.  ``H0`` defaults to the energy of the first state observed.
    """

    def __init__(self, g: WeightedGraph, spec: HamiltonianSpec, every: int = 1, H0: float | None = None):
        if every < 1:
            raise ValueError("every must be at least 1")
        self.g, self.spec, self.every, self.H0 = g, spec, every, H0
        self.records: list[DiagnosticsRecord] = []
        self._count = 0
        self._pending = None

    def __call__(self, st: State, report=None):
        if self.H0 is None:
            self.H0 = energy_breakdown(self.g, self.spec, st).H
        iters = 0 if report is None else report.newton_iterations
        if report is None or self._count % self.every == 0:
            self.records.append(record_diagnostics(self.g, self.spec, st, self.H0, iters))
            self._pending = None
        else:
            self._pending = (st.copy(), iters)
        self._count += 1

    def finish(self) -> list[DiagnosticsRecord]:
        """Flush the last observed state if it was skipped by the stride."""
        if self._pending is not None:
            st, iters = self._pending
            self.records.append(record_diagnostics(self.g, self.spec, st, self.H0, iters))
            self._pending = None
        return self.records


def format_value(v) -> str:
    """Integers verbatim, floats with 17 significant digits (round-trip exact)."""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    """Comma-separated, ``\\n`` line endings, header first, floats with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_value(v) for v in row])


def write_diagnostics_csv(path, records: Iterable[DiagnosticsRecord]) -> None:
    write_csv(path, DIAGNOSTICS_COLUMNS, (astuple(r) for r in records))


def read_diagnostics_csv(path) -> list[DiagnosticsRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [DiagnosticsRecord(*(float(r[c]) for c in DIAGNOSTICS_COLUMNS[:-1]),
                              int(r["newton_iters"])) for r in rows]


# --- symplecticity ----------------------------------------------------------


def canonical_form(n: int) -> np.ndarray:
    """``[[0, I], [-I, 0]]`` pairing ``rho`` with ``S``."""
    eye = np.eye(n)
    z = np.zeros((n, n))
    return np.block([[z, eye], [-eye, z]])


def step_jacobian(stepper, g, spec, st: State, tau: float, fd_eps: float = 1e-5, cfg=None) -> np.ndarray:
    """Central finite-difference Jacobian of one step with respect to ``(rho, S)``."""
    n = st.n
    y = st.as_vector()
    J = np.empty((2 * n, 2 * n))
    kwargs = {} if cfg is None else {"cfg": cfg}
    for k in range(2 * n):
        cols = []
        for sign in (1.0, -1.0):
            yp = y.copy()
            yp[k] += sign * fd_eps
            out, _ = stepper(g, spec, State.from_vector(yp, st.t), tau, **kwargs)
            cols.append(out.as_vector())
        J[:, k] = (cols[0] - cols[1]) / (2.0 * fd_eps)
    return J


def symplecticity_defect(stepper, g, spec, st: State, tau: float, fd_eps: float = 1e-5, cfg=None) -> float:
    """``||J^T Omega J - Omega||_inf`` (maximum absolute row sum) for one step.

    Step failures during the perturbed evaluations propagate.
    """
    J = step_jacobian(stepper, g, spec, st, tau, fd_eps, cfg)
    omega = canonical_form(st.n)
    return float(np.abs(J.T @ omega @ J - omega).sum(axis=1).max())


# --- two-node oracles -------------------------------------------------------


def two_node_graph() -> WeightedGraph:
    """Single edge with unit weights."""
    return WeightedGraph.from_edges(2, [(0, 1, 1.0, 1.0)])


def two_node_spec() -> HamiltonianSpec:
    """Averaged weight, no Fisher term, interaction ``W = I`` so ``F = (rho_1^2 + rho_2^2)/2``."""
    return HamiltonianSpec(beta=0.0, V=0.0, W=np.eye(2), theta=AVERAGE)


def _pair(x, name):
    arr = np.asarray(x, dtype=float)
    if arr.shape != (2,):
        raise ValueError(f"{name} must have two entries")
    return arr


def two_node_closed_form(rho0, s0, t) -> State:
    """Exact state of the two-node system of :func:`two_node_spec` at time ``t``.

    With ``d = rho_1 - rho_2``, ``sigma = S_1 - S_2`` and ``Sigma = S_1 + S_2``:
    ``d'' = -d``, ``sigma = d'`` and ``Sigma' = -sigma**2/2 - 1``.  Densities are not
    clipped; the result leaves the simplex when ``d0**2 + sigma0**2 > 1``.
    """
    r = _pair(rho0, "rho0")
    s = _pair(s0, "s0")
    if abs(r.sum() - 1.0) > 1e-12:
        raise ValueError("rho0 must sum to 1")
    d0, g0, S0 = r[0] - r[1], s[0] - s[1], s[0] + s[1]
    c, sn = math.cos(t), math.sin(t)
    d = d0 * c + g0 * sn
    sigma = -d0 * sn + g0 * c
    # integral of sigma**2 over [0, t]
    int_sig2 = (d0 * d0 * (0.5 * t - 0.25 * math.sin(2 * t)) - d0 * g0 * sn * sn
                + g0 * g0 * (0.5 * t + 0.25 * math.sin(2 * t)))
    Sigma = S0 - t - 0.5 * int_sig2
    return State(np.array([0.5 + 0.5 * d, 0.5 - 0.5 * d]),
                 np.array([0.5 * (Sigma + sigma), 0.5 * (Sigma - sigma)]), t)


def two_node_min_density(rho0, s0) -> float:
    """Smallest density reached along :func:`two_node_closed_form`: ``(1 - |(d0, sigma0)|)/2``."""
    r = _pair(rho0, "rho0")
    s = _pair(s0, "s0")
    return 0.5 - 0.5 * math.hypot(r[0] - r[1], s[0] - s[1])


class BlowUpError(ValueError):
    """Requested time is at or past the finite-time singularity ``t_star``."""

    def __init__(self, t, t_star):
        super().__init__(f"t={t} is not before the blow-up time t*={t_star}")
        self.t = t
        self.t_star = t_star


def two_node_upwind_spec() -> HamiltonianSpec:
    """Unregularised kinetic energy with the upwind weight."""
    return HamiltonianSpec(beta=0.0, theta=UPWIND)


def two_node_upwind_blowup(rho0, s0, t) -> State:
    """Exact solution of the unregularised upwind two-node system.

    For ``S_1 > S_2`` the upwind weight is ``rho_2``, so ``S_1`` stays constant,
    ``sigma = sigma0 / (1 - sigma0 t / 2)`` and ``rho_2 = rho_2^0 (1 - sigma0 t / 2)**2``.
    """
    r = _pair(rho0, "rho0")
    s = _pair(s0, "s0")
    g0 = s[0] - s[1]
    if not g0 > 0:
        raise ValueError("needs s0[0] > s0[1]")
    t_star = 2.0 / g0
    if t >= t_star:
        raise BlowUpError(t, t_star)
    f = 1.0 - 0.5 * g0 * t
    sigma = g0 / f
    rho2 = r[1] * f * f
    return State(np.array([r.sum() - rho2, rho2]), np.array([s[0], s[0] - sigma]), t)


def two_node_upwind_rhs(rho1, rho2, s1, s2):
    """Right-hand side of the unregularised upwind two-node system in scalars."""
    sig = s1 - s2
    if sig > 0:
        flux = sig * rho2
        return flux, -flux, 0.0, -0.5 * sig * sig
    if sig < 0:
        flux = sig * rho1
        return flux, -flux, -0.5 * sig * sig, 0.0
    return 0.0, 0.0, 0.0, 0.0


def two_node_upwind_reference(rho0, s0, t_end: float, tau: float = 1e-6, stop_below: float = 0.0):
    """Forward Euler on :func:`two_node_upwind_rhs` up to ``t_end``.

    Stops early once ``min(rho) < stop_below``.  Returns ``(State, t_hit)`` where
    ``t_hit`` is the time the threshold was crossed, or ``None``.
    """
    r1, r2 = (float(x) for x in _pair(rho0, "rho0"))
    s1, s2 = (float(x) for x in _pair(s0, "s0"))
    n = int(round(t_end / tau))
    t_hit = None
    k = 0
    for k in range(1, n + 1):
        sig = s1 - s2
        if sig > 0:
            flux = tau * sig * r2
            s2 -= 0.5 * tau * sig * sig
        elif sig < 0:
            flux = tau * sig * r1
            s1 -= 0.5 * tau * sig * sig
        else:
            flux = 0.0
        r1 += flux
        r2 -= flux
        if min(r1, r2) < stop_below:
            t_hit = k * tau
            break
    return State(np.array([r1, r2]), np.array([s1, s2]), k * tau), t_hit


# --- consistency ------------------------------------------------------------

Field = Callable[[np.ndarray], tuple]


def continuum_rhs(x, field_rho: Field, field_s: Field, beta: float, field_v: Field | None = None):
    """Right-hand side of the continuity and Hamilton-Jacobi equations at ``x``.

    ``rho_t = -(rho' S' + rho S'')`` and
    ``S_t = -S'**2/2 - beta (rho'**2/rho**2 - 2 rho''/rho) - V``.
    Each field returns ``(f, f', f'')`` at ``x``.
    """
    r, r1, r2 = field_rho(x)
    s, s1, s2 = field_s(x)
    v = 0.0 if field_v is None else field_v(x)[0]
    rho_t = -(r1 * s1 + r * s2)
    s_t = -0.5 * s1 * s1 - beta * (r1 * r1 / (r * r) - 2.0 * r2 / r) - v
    return rho_t, s_t


def consistency_residual(h: float, field_rho: Field, field_s: Field, spec: HamiltonianSpec,
                         field_v: Field | None = None) -> tuple[float, float]:
    """Max-norm gap between the lattice vector field and the continuum equations.

    The lattice is the periodic grid of spacing ``h`` on ``[0, 1)``; node values
    are samples of the fields (the lattice flow is invariant under rescaling
    ``rho`` by a constant, so densities and node masses give the same field).
    ``spec.V`` and ``spec.W`` are ignored in favour of ``field_v``.
    """
    n = int(round(1.0 / h))
    if abs(n * h - 1.0) > 1e-9:
        raise ValueError("1/h must be an integer")
    g = build_lattice_1d(n, h, "periodic")
    x = h * np.arange(n)
    rho = field_rho(x)[0]
    s = field_s(x)[0]
    v = 0.0 if field_v is None else field_v(x)[0]
    lat = spec.with_(V=v, W=None)
    drho, ds = vector_field(g, lat, State(rho, s))
    rho_t, s_t = continuum_rhs(x, field_rho, field_s, spec.beta, field_v)
    return float(np.abs(drho - rho_t).max()), float(np.abs(ds - s_t).max())


def observed_orders(h_values, residuals) -> np.ndarray:
    """Successive orders ``log(r_k / r_{k+1}) / log(h_k / h_{k+1})``."""
    h = np.asarray(h_values, dtype=float)
    r = np.asarray(residuals, dtype=float)
    return np.log(r[:-1] / r[1:]) / np.log(h[:-1] / h[1:])


def trig_field(mean: float, amp: float, kind: str = "sin", k: float = 2 * math.pi) -> Field:
    """``mean + amp * sin(k x)`` (or ``cos``) with its first two derivatives."""
    if kind == "sin":
        return lambda x: (mean + amp * np.sin(k * x), amp * k * np.cos(k * x),
                          -amp * k * k * np.sin(k * x))
    if kind == "cos":
        return lambda x: (mean + amp * np.cos(k * x), -amp * k * np.sin(k * x),
                          -amp * k * k * np.cos(k * x))
    raise ValueError(f"unknown kind {kind!r}")


def max_abs_energy_error(records, t_lo=-math.inf, t_hi=math.inf) -> float:
    """``max |H - H0|`` over records with ``t_lo <= t <= t_hi``."""
    vals = [abs(r.energy_error) for r in records if t_lo <= r.t <= t_hi]
    return max(vals) if vals else 0.0

