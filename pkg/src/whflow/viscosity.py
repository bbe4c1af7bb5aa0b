"""Explicit monotone upwind scheme with numerical viscosity on a periodic 1-D lattice.

One step reads

    rho_i <- rho_i + (tau/h^2) [ (S_i - S_{i+1})^+ rho_{i+1} + (S_i - S_{i-1})^+ rho_{i-1}
                                 + (S_i - S_{i+1})^- rho_i   + (S_i - S_{i-1})^- rho_i ]
    S_i   <- S_i - (tau/2) [ ((S_i - S_{i+1})^-/h)^2 + ((S_i - S_{i-1})^-/h)^2 ]
                 + alpha (S_{i+1} - 2 S_i + S_{i-1})

with ``x^+ = max(x, 0)`` and ``x^- = min(x, 0)``.  The density update is applied as
a flux between neighbours, so mass is conserved to rounding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .hamiltonian import State

ALPHA_CAP = 0.5


class CFLError(ValueError):
    """No admissible viscosity coefficient below one half exists for this ``S``."""


class MonotonicityError(ValueError):
    """A fixed viscosity coefficient violates the monotonicity conditions."""


@dataclass(frozen=True)
class ViscosityConfig:
    """Time step, lattice spacing and viscosity.

    ``alpha=None`` re-selects the smallest admissible coefficient from the current
    ``S`` at every step; a number fixes it.
    """

    tau: float
    h: float
    alpha: float | None = None
    tol: float = 1e-12

    def __post_init__(self):
        if not self.tau > 0 or not self.h > 0:
            raise ValueError("tau and h must be positive")
        if self.alpha is not None and not 0 <= self.alpha < ALPHA_CAP:
            raise ValueError(f"alpha must lie in [0, 1/2), got {self.alpha}")


def _upwind_slopes(s):
    """Positive parts ``(S_{i+1} - S_i)^+`` and ``(S_{i-1} - S_i)^+``."""
    fwd = np.roll(s, -1) - s
    bwd = np.roll(s, 1) - s
    return np.maximum(fwd, 0.0), np.maximum(bwd, 0.0)


def gradient_bound(s, h: float) -> float:
    """``R = max_i |S_{i+1} - S_i| / h`` with periodic wrap-around."""
    s = np.asarray(s, dtype=float)
    return float(np.abs(np.roll(s, -1) - s).max() / h)


def monotonicity_margin(s, alpha: float, tau: float, h: float) -> float:
    """Smallest left-hand side among the three monotonicity inequalities at every node.

    Nonnegative exactly when the S-update is nondecreasing in each stencil value.
    """
    up, dn = _upwind_slopes(np.asarray(s, dtype=float))
    lam = tau / (h * h)
    centre = 1.0 - lam * (up + dn) - 2.0 * alpha
    right = alpha - lam * up
    left = alpha - lam * dn
    return float(min(centre.min(), right.min(), left.min()))


def select_alpha(s, tau: float, h: float) -> tuple[float, float]:
    """Return ``(alpha, R)`` with ``alpha`` the smallest admissible viscosity.

    The neighbour inequalities force ``alpha >= R tau / h``.  Raises
    :class:`CFLError` when that value reaches one half or the centre inequality
    fails.
    """
    s = np.asarray(s, dtype=float)
    R = gradient_bound(s, h)
    alpha = R * tau / h
    if alpha >= ALPHA_CAP:
        raise CFLError(f"R tau / h = {alpha:.4g} is not below 1/2 (R={R:.4g})")
    if monotonicity_margin(s, alpha, tau, h) < -1e-14:
        raise CFLError(f"no alpha below 1/2 makes the update monotone (R={R:.4g})")
    return alpha, R


def s_update(s, alpha: float, tau: float, h: float) -> np.ndarray:
    """The potential half of the scheme, vectorised over nodes."""
    s = np.asarray(s, dtype=float)
    sp1 = np.roll(s, -1)
    sm1 = np.roll(s, 1)
    dp = np.minimum(s - sp1, 0.0) / h
    dm = np.minimum(s - sm1, 0.0) / h
    return s - 0.5 * tau * (dp * dp + dm * dm) + alpha * (sp1 - 2.0 * s + sm1)


def rho_update(rho, s, tau: float, h: float) -> np.ndarray:
    """The density half of the scheme in flux form."""
    rho = np.asarray(rho, dtype=float)
    s = np.asarray(s, dtype=float)
    rho_p = np.roll(rho, -1)
    ds = np.roll(s, -1) - s
    lam = tau / (h * h)
    # mass moved from node i to node i+1 across the edge (i, i+1)
    flux = lam * (np.maximum(ds, 0.0) * rho - np.maximum(-ds, 0.0) * rho_p)
    return rho - flux + np.roll(flux, 1)


def step_viscosity_upwind(st: State, cfg: ViscosityConfig) -> tuple[State, float]:
    """Advance one step; returns the new state and the viscosity used.

    Raises :class:`CFLError` (automatic ``alpha``) or :class:`MonotonicityError`
    (fixed ``alpha``) when the current ``S`` admits no monotone update.
    """
    if cfg.alpha is None:
        alpha, _ = select_alpha(st.s, cfg.tau, cfg.h)
    else:
        alpha = cfg.alpha
        margin = monotonicity_margin(st.s, alpha, cfg.tau, cfg.h)
        if margin < -cfg.tol:
            raise MonotonicityError(f"alpha={alpha} violates monotonicity by {-margin:.3e} "
                                    f"at t={st.t:.6g}")
    rho = rho_update(st.rho, st.s, cfg.tau, cfg.h)
    s = s_update(st.s, alpha, cfg.tau, cfg.h)
    return State(rho, s, st.t + cfg.tau), alpha


def s_range(s) -> float:
    return float(np.max(s) - np.min(s))


def run_to_steady(st0: State, cfg: ViscosityConfig, range_tol: float, max_steps: int,
                  observer: Callable[[State, int], None] | None = None) -> tuple[State, int, bool]:
    """Iterate until ``max S - min S <= range_tol`` or ``max_steps`` steps.

    ``observer(state, k)`` is called for the initial state (``k = 0``) and after
    every step.  Returns ``(state, steps_taken, converged)``.
    """
    if not range_tol > 0:
        raise ValueError("range_tol must be positive")
    st = st0
    if observer is not None:
        observer(st, 0)
    if s_range(st.s) <= range_tol:
        return st, 0, True
    for k in range(1, max_steps + 1):
        st, _ = step_viscosity_upwind(st, cfg)
        st.t = st0.t + k * cfg.tau
        if observer is not None:
            observer(st, k)
        if s_range(st.s) <= range_tol:
            return st, k, True
    return st, max_steps, False
