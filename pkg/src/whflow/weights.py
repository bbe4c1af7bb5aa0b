"""Density-dependent edge weights: upwind, arithmetic average and logarithmic mean.

Every rule is evaluated on arrays of edge endpoint densities ``a = rho_i`` and
``b = rho_j``.  The upwind rule additionally needs the edge orientation
``orient = sign(S_j - S_i)``: ``+1`` selects ``a``, ``-1`` selects ``b`` and a
tie (``0``) falls back to the average.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# second derivatives of the log mean lose ~eps/D**2 in closed form; switch earlier
_LOGMEAN_HESS_THRESHOLD = 1e-3


class DensityDomainError(ValueError):
    """A weight or Fisher term was evaluated at a nonpositive density."""


class WeightKind(str, Enum):
    UPWIND = "upwind"
    AVERAGE = "average"
    LOGMEAN = "logmean"


@dataclass(frozen=True)
class WeightRule:
    kind: WeightKind
    taylor_threshold: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "kind", WeightKind(self.kind))
        if not self.taylor_threshold > 0:
            raise ValueError("taylor_threshold must be positive")

    @classmethod
    def from_token(cls, token: str, **kwargs) -> "WeightRule":
        try:
            return cls(WeightKind(token.strip().lower()), **kwargs)
        except ValueError:
            raise ValueError(f"unknown weight rule {token!r}; "
                             f"expected one of {[k.value for k in WeightKind]}") from None

    @property
    def symmetric(self) -> bool:
        return self.kind is not WeightKind.UPWIND

    def __str__(self):
        return self.kind.value


UPWIND = WeightRule(WeightKind.UPWIND)
AVERAGE = WeightRule(WeightKind.AVERAGE)
LOGMEAN = WeightRule(WeightKind.LOGMEAN)


def _check_positive(a, b):
    if (a <= 0).any() or (b <= 0).any():
        raise DensityDomainError("edge weight evaluated at a nonpositive density")


def _log_ratio(a, b):
    # log(a/b) without the cancellation of log(a) - log(b) for a ~ b; taking log1p of
    # a nonnegative argument keeps it accurate and exactly antisymmetric
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    mag = np.log1p((hi - lo) / lo)
    return np.where(a >= b, mag, -mag)


def orientation(s_i, s_j):
    """Edge orientation ``sign(S_j - S_i)`` used by the upwind rule."""
    return np.sign(np.asarray(s_j, dtype=float) - np.asarray(s_i, dtype=float))


def edge_theta(rule: WeightRule, a, b, orient=None):
    """Return ``(theta, d theta/d a, d theta/d b)`` elementwise."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_positive(a, b)
    kind = rule.kind
    if kind is WeightKind.AVERAGE:
        half = np.full(np.broadcast(a, b).shape, 0.5)
        return 0.5 * (a + b), half, half.copy()
    if kind is WeightKind.UPWIND:
        o = np.zeros(np.broadcast(a, b).shape) if orient is None else np.asarray(orient, dtype=float)
        val = np.where(o > 0, a, np.where(o < 0, b, 0.5 * (a + b)))
        da = np.where(o > 0, 1.0, np.where(o < 0, 0.0, 0.5))
        return val, da, 1.0 - da
    # logarithmic mean
    d = _log_ratio(a, b)
    near = np.abs(d) < rule.taylor_threshold
    m = 0.5 * (a + b)
    r = a - b
    with np.errstate(divide="ignore", invalid="ignore"):
        val_c = r / d
        da_c = (1.0 - val_c / a) / d
        db_c = (val_c / b - 1.0) / d
    q = r / m
    val_s = m - r * q / 12.0
    da_s = 0.5 - q / 6.0 + q * q / 24.0
    db_s = 0.5 + q / 6.0 + q * q / 24.0
    return (np.where(near, val_s, val_c), np.where(near, da_s, da_c),
            np.where(near, db_s, db_c))


def edge_theta_hessian(rule: WeightRule, a, b, orient=None):
    """Return the second partials ``(d2/da2, d2/dadb, d2/db2)`` elementwise.

    Average and upwind are piecewise linear, so these vanish.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    shape = np.broadcast(a, b).shape
    if rule.kind is not WeightKind.LOGMEAN:
        z = np.zeros(shape)
        return z, z.copy(), z.copy()
    _check_positive(a, b)
    d = _log_ratio(a, b)
    near = np.abs(d) < _LOGMEAN_HESS_THRESHOLD
    with np.errstate(divide="ignore", invalid="ignore"):
        L = (a - b) / d
        La = (1.0 - L / a) / d
        Lb = (L / b - 1.0) / d
        Laa = (L / a**2 - 2.0 * La / a) / d
        Lbb = (2.0 * Lb / b - L / b**2) / d
        Lab = (La / b - Lb / a) / d
    m = 0.5 * (a + b)
    q = (a - b) / m
    Laa_s = (-1.0 / 6.0 + q / 6.0 - 13.0 / 120.0 * q * q) / m
    Lbb_s = (-1.0 / 6.0 - q / 6.0 - 13.0 / 120.0 * q * q) / m
    Lab_s = (1.0 / 6.0 + q * q / 40.0) / m
    return (np.where(near, Laa_s, Laa), np.where(near, Lab_s, Lab), np.where(near, Lbb_s, Lbb))


def _scalarize(x):
    return float(x) if np.ndim(x) == 0 else x


def theta_value(rule: WeightRule, rho_i, rho_j, s_i=0.0, s_j=0.0):
    """Edge weight for densities ``rho_i, rho_j``; potentials only matter for upwind."""
    val, _, _ = edge_theta(rule, rho_i, rho_j, orientation(s_i, s_j))
    return _scalarize(val)


def theta_partial(rule: WeightRule, rho_i, rho_j, s_i=0.0, s_j=0.0, wrt: str = "first"):
    """Partial derivative of :func:`theta_value` in its first or second density."""
    if wrt not in ("first", "second"):
        raise ValueError("wrt must be 'first' or 'second'")
    _, da, db = edge_theta(rule, rho_i, rho_j, orientation(s_i, s_j))
    return _scalarize(da if wrt == "first" else db)
