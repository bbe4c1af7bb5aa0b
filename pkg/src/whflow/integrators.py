"""Symplectic time steppers for the graph Hamiltonian system.

Three steppers share one damped Newton core:

* :func:`step_symplectic_euler` solves an ``n``-dimensional system for ``S^{n+1}``
  and then updates ``rho`` explicitly;
* :func:`step_implicit_midpoint` solves the ``2n``-dimensional midpoint system;
* :func:`step_prk` handles any partitioned Runge-Kutta tableau by Newton on the
  stacked stage values.  ``rho`` stages use ``a`` and ``S`` stages use ``a_tilde``.

All of them finish with ``rho^{n+1} = rho^n + tau * sum_i b_i dH/dS(stage_i)``.  The
update is a sum of antisymmetric edge fluxes, so total mass is preserved to
rounding no matter how accurately the stage equations were solved.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import splu

from .graph import WeightedGraph
from .hamiltonian import (
    HamiltonianSpec,
    State,
    edge_orientation,
    gradients,
    hessian_triplets,
)
from .weights import DensityDomainError


# --- tableaux ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Tableau:
    """Partitioned Runge-Kutta coefficients.

    ``a`` drives the ``rho`` stages, ``a_tilde`` the ``S`` stages and ``b`` the
    final update.  ``c`` holds the row sums of ``a``.
    """

    name: str
    a: np.ndarray
    a_tilde: np.ndarray
    b: np.ndarray
    c: np.ndarray = None

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        at = np.atleast_2d(np.asarray(self.a_tilde, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        s = b.size
        if a.shape != (s, s) or at.shape != (s, s):
            raise ValueError(f"tableau {self.name!r}: a and a_tilde must be {s}x{s}")
        if np.any(b == 0):
            raise ValueError(f"tableau {self.name!r}: all weights b_i must be nonzero")
        if abs(b.sum() - 1.0) > 1e-14:
            raise ValueError(f"tableau {self.name!r}: weights must sum to 1, got {b.sum()!r}")
        c = a.sum(axis=1) if self.c is None else np.atleast_1d(np.asarray(self.c, dtype=float))
        if c.shape != (s,):
            raise ValueError(f"tableau {self.name!r}: c must have {s} entries")
        for name, val in (("a", a), ("a_tilde", at), ("b", b), ("c", c)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @property
    def s(self) -> int:
        return self.b.size

    @property
    def c_tilde(self) -> np.ndarray:
        return self.a_tilde.sum(axis=1)


def symplecticity_residual(t: Tableau) -> float:
    """``max_ij |a~_ij b_i + a_ji b_j - b_i b_j|``."""
    b = t.b
    m = t.a_tilde * b[:, None] + t.a.T * b[None, :] - np.outer(b, b)
    return float(np.abs(m).max())


def check_tableau_symplectic(t: Tableau, tol: float = 1e-14) -> bool:
    """True when the tableau satisfies the partitioned symplecticity condition."""
    return symplecticity_residual(t) <= tol


_r3 = math.sqrt(3.0)

SYMPLECTIC_EULER = Tableau("symplectic_euler", [[0.0]], [[1.0]], [1.0])
MIDPOINT = Tableau("midpoint", [[0.5]], [[0.5]], [1.0])
EXPLICIT_EULER = Tableau("explicit_euler", [[0.0]], [[0.0]], [1.0])
_gauss2_a = [[0.25, 0.25 - _r3 / 6.0], [0.25 + _r3 / 6.0, 0.25]]
GAUSS2 = Tableau("gauss2", _gauss2_a, _gauss2_a, [0.5, 0.5])

TABLEAUX = {t.name: t for t in (SYMPLECTIC_EULER, MIDPOINT, EXPLICIT_EULER, GAUSS2)}


# --- solver plumbing --------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    """Newton settings shared by the implicit steppers.

    ``jacobian_mode`` picks the analytic sparse Jacobian or a dense
    finite-difference one.  ``upwind_freeze`` chooses whether the upwind edge
    orientation is fixed from ``S^n`` at the start of the step or re-evaluated from
    each iterate.  With ``chord=True`` the Jacobian from the first iteration is
    reused for the rest of the step (refreshed if the contraction stalls).
    ``accept_unconverged=True`` returns the last iterate, flagged in the report,
    instead of failing when ``max_iterations`` is exhausted.

    When a full Newton update no longer moves the iterate beyond rounding level
    while the residual is still above ``residual_tol``, the iterate is a
    floating-point fixed point and further iterations cannot help.  That
    situation fails immediately unless ``accept_roundoff_floor`` is set, in which
    case the iterate is returned with ``converged=False`` and
    ``roundoff_limited=True``.
    """

    residual_tol: float = 1e-12
    max_iterations: int = 50
    jacobian_mode: str = "analytic"
    upwind_freeze: str = "step_start"
    chord: bool = False
    fd_eps: float = 1e-7
    max_damping: int = 40
    accept_unconverged: bool = False
    accept_roundoff_floor: bool = False

    def __post_init__(self):
        if not self.residual_tol > 0:
            raise ValueError("residual_tol must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.jacobian_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown jacobian_mode {self.jacobian_mode!r}")
        if self.upwind_freeze not in ("step_start", "per_iterate"):
            raise ValueError(f"unknown upwind_freeze {self.upwind_freeze!r}")


DEFAULT_SOLVER = SolverConfig()


@dataclass
class StepReport:
    newton_iterations: int = 0
    final_residual: float = 0.0
    converged: bool = True
    jacobian_evaluations: int = 0
    roundoff_limited: bool = False


class StepFailure(RuntimeError):
    """A step could not be completed.

    ``cause`` is ``'newton'`` (no convergence), ``'positivity'`` (a density left
    the open simplex) or ``'domain'`` (a weight or Fisher term could not be
    evaluated along the Newton path).
    """

    def __init__(self, cause: str, message: str, report: StepReport | None = None, t: float = math.nan):
        super().__init__(f"{cause} failure at t={t:.6g}: {message}")
        self.cause = cause
        self.report = report or StepReport(converged=False)
        self.t = t


# systems up to this size are factored densely; the sparse path only pays off beyond
DENSE_LIMIT = 150


class _Triplets:
    """COO description ``(rows, cols, data)`` of a square Newton matrix."""

    __slots__ = ("size", "rows", "cols", "data")

    def __init__(self, size, rows, cols, data):
        self.size, self.rows, self.cols, self.data = size, rows, cols, data

    def factor(self):
        m = self.size
        if m <= DENSE_LIMIT:
            dense = np.bincount(self.rows * m + self.cols, weights=self.data,
                                minlength=m * m).reshape(m, m)
            lu = lu_factor(dense, check_finite=False)
            return lambda r: lu_solve(lu, r, check_finite=False)
        # interleave (rho_i, S_i) so each node's unknowns sit together; this
        # roughly halves the SuperLU factorization time on lattices
        half = m // 2
        pos = np.concatenate([2 * np.arange(half), 2 * np.arange(m - half) + 1])
        mat = sp.csc_matrix((self.data, (pos[self.rows], pos[self.cols])), shape=(m, m))
        solve = splu(mat).solve
        return lambda r: solve(r[_inverse(pos)])[pos]

    def toarray(self):
        m = self.size
        return np.bincount(self.rows * m + self.cols, weights=self.data,
                           minlength=m * m).reshape(m, m)


def _inverse(pos):
    inv = np.empty_like(pos)
    inv[pos] = np.arange(pos.size)
    return inv


def _identity(m, coef=1.0):
    idx = np.arange(m)
    return idx, idx, np.full(m, coef)


def _fd_jacobian(residual, x, r0, eps):
    m = x.size
    J = np.empty((r0.size, m))
    for k in range(m):
        dx = eps * max(1.0, abs(x[k]))
        xp = x.copy()
        xp[k] += dx
        J[:, k] = (residual(xp) - r0) / dx
    return J


# an update smaller than this many ulps of the iterate cannot change it meaningfully
_ROUNDOFF_STEP = 8 * np.finfo(float).eps


def _newton(residual, jacobian, x0, cfg: SolverConfig, positive_mask=None, t=math.nan):
    """Damped Newton iteration on ``residual(x) = 0``.

    Steps that would make a masked entry nonpositive, or that hit a density
    domain error, are halved.  Returns ``(x, report)``; raises :class:`StepFailure`.
    """
    rep = StepReport(converged=False)

    def admissible(x):
        return positive_mask is None or np.all(x[positive_mask] > 0)

    x = x0.copy()
    if not admissible(x):
        raise StepFailure("positivity", "initial guess outside the simplex", rep, t)
    try:
        r = residual(x)
    except DensityDomainError as exc:
        raise StepFailure("domain", str(exc), rep, t) from None
    res = float(np.abs(r).max())
    lu = None
    prev_res = math.inf
    while res > cfg.residual_tol:
        if rep.newton_iterations >= cfg.max_iterations:
            rep.final_residual = res
            if cfg.accept_unconverged:
                return x, rep
            raise StepFailure("newton", f"no convergence after {cfg.max_iterations} iterations "
                              f"(residual {res:.3e})", rep, t)
        if lu is None or not cfg.chord or res > 0.1 * prev_res:
            if cfg.jacobian_mode == "finite_difference":
                lu_fd = lu_factor(_fd_jacobian(residual, x, r, cfg.fd_eps))
                lu = functools.partial(lu_solve, lu_fd)
            else:
                lu = jacobian(x).factor()
            rep.jacobian_evaluations += 1
        dx = lu(r)
        lam = 1.0
        for _ in range(cfg.max_damping):
            xn = x - lam * dx
            if admissible(xn):
                try:
                    rn = residual(xn)
                except DensityDomainError:
                    rn = None
                if rn is not None and np.all(np.isfinite(rn)):
                    break
            lam *= 0.5
        else:
            rep.final_residual = res
            raise StepFailure("positivity", "Newton damping could not keep densities positive",
                              rep, t)
        rep.newton_iterations += 1
        prev_res = res
        step = float(np.abs(x - xn).max())
        x, r = xn, rn
        res = float(np.abs(r).max())
        if (lam == 1.0 and res > cfg.residual_tol
                and step <= _ROUNDOFF_STEP * max(1.0, float(np.abs(x).max()))):
            rep.final_residual = res
            rep.roundoff_limited = True
            if cfg.accept_roundoff_floor:
                return x, rep
            raise StepFailure("newton", f"residual stalled at {res:.3e}, above the tolerance, "
                              "with updates at rounding level", rep, t)
    rep.final_residual = res
    rep.converged = True
    return x, rep


def _orientation(spec: HamiltonianSpec, g, s, cfg: SolverConfig):
    """Frozen orientation, or ``None`` meaning 'take it from the current S'."""
    if spec.theta.symmetric and spec.theta_tilde.symmetric:
        return None
    return edge_orientation(g, s) if cfg.upwind_freeze == "step_start" else None


def _flow_jacobian_triplets(g, spec, rho, s, orient):
    """Triplets of the Jacobian of ``(dH/dS, -dH/drho)`` with respect to ``(rho, S)``."""
    n = g.n_nodes
    r, c, d = hessian_triplets(g, spec, rho, s, orient)
    top = r >= n
    return np.where(top, r - n, r + n), c, np.where(top, d, -d)


def _check_result(st_new: State, rep: StepReport, t):
    if not np.all(np.isfinite(st_new.rho)) or not np.all(np.isfinite(st_new.s)):
        raise StepFailure("newton", "non-finite state after step", rep, t)
    if not np.all(st_new.rho > 0):
        k = int(np.argmin(st_new.rho))
        raise StepFailure("positivity", f"rho[{k}] = {st_new.rho[k]:.3e} after step", rep, t)


def _require_interior(st: State):
    if not st.is_interior():
        raise StepFailure("positivity", "state is not in the open simplex", t=st.t)


# --- steppers ---------------------------------------------------------------


def step_symplectic_euler(g: WeightedGraph, spec: HamiltonianSpec, st: State, tau: float,
                          cfg: SolverConfig = DEFAULT_SOLVER):
    """One symplectic Euler step: implicit in ``S^{n+1}``, explicit in ``rho``."""
    _require_interior(st)
    n = g.n_nodes
    rho0, s0 = st.rho, st.s
    frozen = _orientation(spec, g, s0, cfg)

    def residual(s1):
        h_rho, _ = gradients(g, spec, rho0, s1, frozen)
        return s1 - s0 + tau * h_rho

    eye = _identity(n)

    def jacobian(s1):
        r, c, d = hessian_triplets(g, spec, rho0, s1, frozen)
        keep = (r < n) & (c >= n)
        return _Triplets(n, np.concatenate([eye[0], r[keep]]),
                         np.concatenate([eye[1], c[keep] - n]),
                         np.concatenate([eye[2], tau * d[keep]]))

    h_rho, _ = gradients(g, spec, rho0, s0, frozen)
    s1, rep = _newton(residual, jacobian, s0 - tau * h_rho, cfg, t=st.t)
    _, h_s = gradients(g, spec, rho0, s1, frozen)
    out = State(rho0 + tau * h_s, s1, st.t + tau)
    _check_result(out, rep, st.t)
    return out, rep


def step_implicit_midpoint(g: WeightedGraph, spec: HamiltonianSpec, st: State, tau: float,
                           cfg: SolverConfig = DEFAULT_SOLVER):
    """One implicit midpoint step, a ``2n``-dimensional Newton solve."""
    _require_interior(st)
    n = g.n_nodes
    y0 = st.as_vector()
    frozen = _orientation(spec, g, st.s, cfg)
    eye = _identity(2 * n)

    last = {}

    def f(y):
        h_rho, h_s = gradients(g, spec, y[:n], y[n:], frozen)
        return np.concatenate([h_s, -h_rho])

    def residual(y1):
        last["f"] = f(0.5 * (y0 + y1))
        return y1 - y0 - tau * last["f"]

    def jacobian(y1):
        m = 0.5 * (y0 + y1)
        r, c, d = _flow_jacobian_triplets(g, spec, m[:n], m[n:], frozen)
        return _Triplets(2 * n, np.concatenate([eye[0], r]), np.concatenate([eye[1], c]),
                         np.concatenate([eye[2], (-0.5 * tau) * d]))

    # the midpoint rho must stay positive, i.e. rho1 > -rho0
    mask = np.zeros(2 * n, dtype=bool)
    mask[:n] = True
    shift = np.concatenate([y0[:n], np.zeros(n)])
    guess = y0 + tau * f(y0)
    if not np.all(guess[:n] > 0):
        guess = y0.copy()
    _, rep = _newton(lambda z: residual(z - shift), lambda z: jacobian(z - shift),
                     guess + shift, cfg, positive_mask=mask, t=st.t)
    # residual(z - shift) ran last at the accepted iterate, so last["f"] is its
    # midpoint field; rebuilding from it makes the mass update a pure flux sum
    y1 = y0 + tau * last["f"]
    out = State(y1[:n], y1[n:], st.t + tau)
    _check_result(out, rep, st.t)
    return out, rep


def step_prk(g: WeightedGraph, spec: HamiltonianSpec, tableau: Tableau, st: State, tau: float,
             cfg: SolverConfig = DEFAULT_SOLVER, allow_nonsymplectic: bool = False):
    """One partitioned Runge-Kutta step by Newton on the stacked stage values.

    Stage ``i`` holds ``(Phi^i, Xi^i)``, the ``rho`` and ``S`` stage values.
    Non-symplectic tableaux are refused unless ``allow_nonsymplectic`` is set.
    """
    if not allow_nonsymplectic and not check_tableau_symplectic(tableau, 1e-12):
        raise ValueError(f"tableau {tableau.name!r} is not symplectic "
                         "(pass allow_nonsymplectic=True to use it anyway)")
    _require_interior(st)
    n = g.n_nodes
    ns = tableau.s
    A, At, b = tableau.a, tableau.a_tilde, tableau.b
    rho0, s0 = st.rho, st.s
    frozen = _orientation(spec, g, s0, cfg)

    def stage_fields(z):
        Z = z.reshape(ns, 2 * n)
        hs, hr = [], []
        for i in range(ns):
            h_rho, h_s = gradients(g, spec, Z[i, :n], Z[i, n:], frozen)
            hs.append(h_s)
            hr.append(h_rho)
        return Z, np.array(hs), np.array(hr)

    def residual(z):
        Z, HS, HR = stage_fields(z)
        r_rho = Z[:, :n] - rho0 - tau * (A @ HS)
        r_s = Z[:, n:] - s0 + tau * (At @ HR)
        return np.hstack([r_rho, r_s]).ravel()

    m = 2 * n

    def jacobian(z):
        Z = z.reshape(ns, m)
        rows, cols, data = [np.arange(ns * m)], [np.arange(ns * m)], [np.ones(ns * m)]
        for j in range(ns):
            r, c, d = _flow_jacobian_triplets(g, spec, Z[j, :n], Z[j, n:], frozen)
            top = r < n
            for i in range(ns):
                coef = np.where(top, A[i, j], At[i, j])
                if not np.any(coef):
                    continue
                rows.append(r + i * m)
                cols.append(c + j * m)
                data.append(-tau * coef * d)
        return _Triplets(ns * m, np.concatenate(rows), np.concatenate(cols), np.concatenate(data))

    h_rho0, h_s0 = gradients(g, spec, rho0, s0, frozen)
    guess = np.concatenate([np.concatenate([rho0 + tau * tableau.c[i] * h_s0,
                                            s0 - tau * tableau.c_tilde[i] * h_rho0])
                            for i in range(ns)])
    mask = np.zeros((ns, 2 * n), dtype=bool)
    mask[:, :n] = True
    mask = mask.ravel()
    if not np.all(guess[mask] > 0):
        guess = np.tile(np.concatenate([rho0, s0]), ns)
    z, rep = _newton(residual, jacobian, guess, cfg, positive_mask=mask, t=st.t)
    _, HS, HR = stage_fields(z)
    out = State(rho0 + tau * (b @ HS), s0 - tau * (b @ HR), st.t + tau)
    _check_result(out, rep, st.t)
    return out, rep


def step_explicit_euler(g: WeightedGraph, spec: HamiltonianSpec, st: State, tau: float,
                        cfg: SolverConfig = DEFAULT_SOLVER):
    """Forward Euler; not symplectic, kept as a negative control."""
    return step_prk(g, spec, EXPLICIT_EULER, st, tau, cfg, allow_nonsymplectic=True)


Stepper = Callable[..., tuple]


def make_stepper(token: str) -> Stepper:
    """Map a config token to a stepper ``f(g, spec, st, tau, cfg)``.

    Accepted tokens: ``symplectic_euler``, ``midpoint``, ``explicit_euler`` and
    ``prk:<name>`` with ``<name>`` one of the built-in tableaux.
    """
    token = token.strip()
    if token == "symplectic_euler":
        return step_symplectic_euler
    if token == "midpoint":
        return step_implicit_midpoint
    if token == "explicit_euler":
        return step_explicit_euler
    if token.startswith("prk:"):
        name = token[4:]
        if name not in TABLEAUX:
            raise ValueError(f"unknown tableau {name!r}; built-in: {sorted(TABLEAUX)}")
        tab = TABLEAUX[name]
        stepper = functools.partial(_prk_adapter, tab)
        stepper.__name__ = f"prk:{name}"
        return stepper
    raise ValueError(f"unknown stepper token {token!r}")


def _prk_adapter(tab, g, spec, st, tau, cfg=DEFAULT_SOLVER):
    return step_prk(g, spec, tab, st, tau, cfg, allow_nonsymplectic=tab is EXPLICIT_EULER)


# --- driver -----------------------------------------------------------------


@dataclass
class Trajectory:
    """States visited by :func:`integrate`.

    ``states`` holds every ``keep_every``-th state plus the last one reached.
    ``failure`` is the :class:`StepFailure` that stopped the run, if any.
    """

    states: list[State] = field(default_factory=list)
    reports: list[StepReport] = field(default_factory=list)
    steps_taken: int = 0
    failure: StepFailure | None = None

    @property
    def completed(self) -> bool:
        return self.failure is None

    @property
    def final(self) -> State:
        return self.states[-1]

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])


def integrate(g: WeightedGraph, spec: HamiltonianSpec, stepper: Stepper, st0: State, tau: float,
              n_steps: int, observers: Sequence[Callable] = (), cfg: SolverConfig = DEFAULT_SOLVER,
              keep_every: int | None = 1) -> Trajectory:
    """Apply ``stepper`` ``n_steps`` times.

    Each observer is called as ``obs(state, report)`` for the initial state
    (``report=None``) and after every successful step.  A :class:`StepFailure`
    ends the run early; the partial trajectory and the failure are returned.
    ``keep_every=None`` keeps only the initial and final states.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    traj = Trajectory(states=[st0])
    for obs in observers:
        obs(st0, None)
    st = st0
    for k in range(1, n_steps + 1):
        try:
            st, rep = stepper(g, spec, st, tau, cfg)
        except StepFailure as exc:
            traj.failure = exc
            break
        # keep time on a grid instead of accumulating rounding
        st.t = st0.t + k * tau
        traj.steps_taken = k
        traj.reports.append(rep)
        for obs in observers:
            obs(st, rep)
        if keep_every is not None and k % keep_every == 0:
            traj.states.append(st)
    if traj.states[-1] is not st:
        traj.states.append(st)
    return traj
