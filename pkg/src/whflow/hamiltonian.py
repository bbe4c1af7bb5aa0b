"""Discrete energy ``H = K + beta*I + V + W`` on a graph and its canonical vector field.

Conventions
-----------
The phase-space point is ``y = (rho, S)``.  The flow is

    d rho/dt =  dH/dS,      dS/dt = -dH/drho,

with the kinetic energy ``K = 1/2 sum_edges omega (S_i - S_j)**2 theta_ij`` and the
Fisher information ``I = sum_edges omega_tilde (log rho_i - log rho_j)**2 theta~_ij``
(one term per undirected edge).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .graph import WeightedGraph
from .weights import (
    AVERAGE,
    LOGMEAN,
    DensityDomainError,
    WeightKind,
    WeightRule,
    _log_ratio,
    edge_theta,
    edge_theta_hessian,
)


@dataclass(frozen=True, eq=False)
class HamiltonianSpec:
    """Fisher coefficient, potentials and weight rules defining ``H``.

    ``V`` is a scalar or a per-node array; ``W`` is ``None`` or a symmetric matrix.
    """

    beta: float = 0.0
    V: float | np.ndarray = 0.0
    W: np.ndarray | None = None
    theta: WeightRule = AVERAGE
    theta_tilde: WeightRule = LOGMEAN

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be nonnegative, got {self.beta}")
        if self.W is not None:
            W = np.asarray(self.W, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ValueError("W must be a square matrix")
            if not np.allclose(W, W.T, rtol=0, atol=1e-14 * max(1.0, np.abs(W).max())):
                raise ValueError("W must be symmetric")
            object.__setattr__(self, "W", W)
            wr, wc = np.nonzero(W)
            object.__setattr__(self, "_w_rows", wr)
            object.__setattr__(self, "_w_cols", wc)
            object.__setattr__(self, "_w_vals", W[wr, wc])
        V = np.asarray(self.V, dtype=float)
        if V.ndim > 1:
            raise ValueError("V must be a scalar or a per-node array")
        object.__setattr__(self, "V", V)

    def potential(self, n: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.V, dtype=float), (n,))

    def with_(self, **changes) -> "HamiltonianSpec":
        return replace(self, **changes)


@dataclass
class State:
    """Node probabilities ``rho``, node potentials ``s`` and the time ``t``."""

    rho: np.ndarray
    s: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.s = np.asarray(self.s, dtype=float)
        if self.rho.shape != self.s.shape or self.rho.ndim != 1:
            raise ValueError("rho and s must be 1-D arrays of equal length")

    @property
    def n(self) -> int:
        return self.rho.size

    @property
    def mass(self) -> float:
        return float(self.rho.sum())

    def is_interior(self) -> bool:
        return bool(np.all(self.rho > 0))

    def copy(self) -> "State":
        return State(self.rho.copy(), self.s.copy(), self.t)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.s])

    @classmethod
    def from_vector(cls, y, t=0.0) -> "State":
        n = len(y) // 2
        return cls(np.array(y[:n]), np.array(y[n:]), t)


class Energy(NamedTuple):
    K: float
    I: float
    V: float
    W: float
    H: float


def _check_dims(g: WeightedGraph, rho, s=None):
    if rho.shape != (g.n_nodes,) or (s is not None and s.shape != (g.n_nodes,)):
        raise ValueError(f"state dimension does not match graph with {g.n_nodes} nodes")


def edge_orientation(g: WeightedGraph, s) -> np.ndarray:
    """``sign(S_tail - S_head)`` per edge; the upwind node is the lower-potential one."""
    s = np.asarray(s, dtype=float)
    return np.sign(s[g.tails] - s[g.heads])


def _scatter(g: WeightedGraph, at_head, at_tail) -> np.ndarray:
    n = g.n_nodes
    return (np.bincount(g.heads, weights=at_head, minlength=n)
            + np.bincount(g.tails, weights=at_tail, minlength=n))


def _node_block(g: WeightedGraph, haa, hab, hbb, n=None):
    """Assemble per-edge 2x2 blocks into a sparse n x n matrix."""
    n = g.n_nodes if n is None else n
    h, t = g.heads, g.tails
    rows = np.concatenate([h, h, t, t])
    cols = np.concatenate([h, t, h, t])
    data = np.concatenate([haa, hab, hab, hbb])
    return sp.coo_matrix((data, (rows, cols)), shape=(n, n))


# --- Fisher information -----------------------------------------------------


def _fisher_edge_terms(g, rule, rho, orient):
    a, b = rho[g.heads], rho[g.tails]
    if np.any(a <= 0) or np.any(b <= 0):
        raise DensityDomainError("Fisher information needs strictly positive densities")
    return a, b, _log_ratio(a, b)


def fisher_information(g: WeightedGraph, spec: HamiltonianSpec, rho, s=None, orient=None) -> float:
    """Discrete Fisher information of ``rho`` (``s`` only matters for an upwind Fisher weight)."""
    rho = np.asarray(rho, dtype=float)
    _check_dims(g, rho)
    if orient is None and s is not None:
        orient = edge_orientation(g, s)
    rule = spec.theta_tilde
    a, b, d = _fisher_edge_terms(g, rule, rho, orient)
    if rule.kind is WeightKind.LOGMEAN:
        return float(np.sum(g.omega_tilde * d * (a - b)))
    th, _, _ = edge_theta(rule, a, b, orient)
    return float(np.sum(g.omega_tilde * d * d * th))


def fisher_gradient(g: WeightedGraph, spec: HamiltonianSpec, rho, s=None, orient=None) -> np.ndarray:
    """Gradient of :func:`fisher_information` with respect to ``rho``.

    With the log-mean weight each edge contributes ``omega_tilde * phi(rho_j/rho_i)``
    to node ``i``, where ``phi(t) = 1 - t - log t``; other weights go through the
    product rule.
    """
    rho = np.asarray(rho, dtype=float)
    _check_dims(g, rho)
    if orient is None and s is not None:
        orient = edge_orientation(g, s)
    rule = spec.theta_tilde
    a, b, d = _fisher_edge_terms(g, rule, rho, orient)
    wt = g.omega_tilde
    if rule.kind is WeightKind.LOGMEAN:
        r = a - b
        # phi(b/a) = r/a + log(a/b),  phi(a/b) = -r/b - log(a/b)
        return _scatter(g, wt * (r / a + d), wt * (-r / b - d))
    th, th_a, th_b = edge_theta(rule, a, b, orient)
    return _scatter(g, wt * (2 * d / a * th + d * d * th_a),
                    wt * (-2 * d / b * th + d * d * th_b))


def fisher_hessian_blocks(g: WeightedGraph, spec: HamiltonianSpec, rho, orient=None):
    """Per-edge second derivatives ``(d2/da2, d2/dadb, d2/db2)`` of the Fisher terms."""
    rule = spec.theta_tilde
    a, b, d = _fisher_edge_terms(g, rule, rho, orient)
    wt = g.omega_tilde
    if rule.kind is WeightKind.LOGMEAN:
        s_ = a + b
        return wt * s_ / a**2, -wt * s_ / (a * b), wt * s_ / b**2
    th, th_a, th_b = edge_theta(rule, a, b, orient)
    th_aa, th_ab, th_bb = edge_theta_hessian(rule, a, b, orient)
    da, db = 1.0 / a, -1.0 / b
    haa = 2 * da * da * th - 2 * d / a**2 * th + 4 * d * da * th_a + d * d * th_aa
    hbb = 2 * db * db * th + 2 * d / b**2 * th + 4 * d * db * th_b + d * d * th_bb
    hab = 2 * da * db * th + 2 * d * da * th_b + 2 * d * db * th_a + d * d * th_ab
    return wt * haa, wt * hab, wt * hbb


def fisher_hessian(g: WeightedGraph, spec: HamiltonianSpec, rho, s=None, orient=None):
    """Sparse Hessian of the Fisher information."""
    rho = np.asarray(rho, dtype=float)
    if orient is None and s is not None:
        orient = edge_orientation(g, s)
    return _node_block(g, *fisher_hessian_blocks(g, spec, rho, orient)).tocsr()


# --- energy and vector field ------------------------------------------------


def energy_breakdown(g: WeightedGraph, spec: HamiltonianSpec, st: State, orient=None) -> Energy:
    rho, s = st.rho, st.s
    _check_dims(g, rho, s)
    if orient is None:
        orient = edge_orientation(g, s)
    a, b = rho[g.heads], rho[g.tails]
    th, _, _ = edge_theta(spec.theta, a, b, orient)
    ds = s[g.heads] - s[g.tails]
    K = 0.5 * float(np.sum(g.omega * ds * ds * th))
    I = fisher_information(g, spec, rho, orient=orient)
    V = float(np.dot(spec.potential(g.n_nodes), rho))
    W = 0.5 * float(rho @ spec.W @ rho) if spec.W is not None else 0.0
    return Energy(K, I, V, W, K + spec.beta * I + V + W)


def hamiltonian(g, spec, st, orient=None) -> float:
    return energy_breakdown(g, spec, st, orient).H


def gradients(g: WeightedGraph, spec: HamiltonianSpec, rho, s, orient=None):
    """Return ``(dH/drho, dH/dS)``."""
    if orient is None:
        orient = edge_orientation(g, s)
    a, b = rho[g.heads], rho[g.tails]
    th, th_a, th_b = edge_theta(spec.theta, a, b, orient)
    ds = s[g.heads] - s[g.tails]
    flux = g.omega * ds * th
    h_s = _scatter(g, flux, -flux)
    q = 0.5 * g.omega * ds * ds
    h_rho = _scatter(g, q * th_a, q * th_b)
    if spec.beta > 0:
        h_rho += spec.beta * fisher_gradient(g, spec, rho, orient=orient)
    h_rho += spec.V
    if spec.W is not None:
        h_rho += spec.W @ rho
    return h_rho, h_s


def vector_field(g: WeightedGraph, spec: HamiltonianSpec, st: State, orient=None):
    """Right-hand side ``(d rho/dt, dS/dt)`` of the graph Hamiltonian system.

    ``orient`` overrides the upwind edge orientation (used to freeze it inside
    implicit solves); by default it is taken from ``st.s``.
    """
    _check_dims(g, st.rho, st.s)
    h_rho, h_s = gradients(g, spec, st.rho, st.s, orient)
    return h_s, -h_rho


def hessian_triplets(g: WeightedGraph, spec: HamiltonianSpec, rho, s, orient=None):
    """Hessian of ``H`` in ``(rho, S)`` ordering as COO triplets ``(rows, cols, data)``.

    Duplicate entries are meant to be summed.
    """
    n = g.n_nodes
    if orient is None:
        orient = edge_orientation(g, s)
    a, b = rho[g.heads], rho[g.tails]
    th, th_a, th_b = edge_theta(spec.theta, a, b, orient)
    w = g.omega
    ds = s[g.heads] - s[g.tails]
    q = 0.5 * w * ds * ds
    if spec.theta.kind is WeightKind.LOGMEAN:
        th_aa, th_ab, th_bb = edge_theta_hessian(spec.theta, a, b, orient)
        rr = [q * th_aa, q * th_ab, q * th_bb]
    else:
        rr = [0.0, 0.0, 0.0]
    if spec.beta > 0:
        f = fisher_hessian_blocks(g, spec, rho, orient)
        rr = [x + spec.beta * y for x, y in zip(rr, f)]
    p_r, p_c = g.block_pattern
    m = p_r.size
    # blocks: rho-rho, rho-S (d(dH/drho)/dS), S-rho (its transpose), S-S
    rows = np.concatenate([p_r, p_r, p_c + n, p_r + n] + ([spec._w_rows] if spec.W is not None else []))
    cols = np.concatenate([p_c, p_c + n, p_r, p_c + n] + ([spec._w_cols] if spec.W is not None else []))
    data = np.empty(rows.size)
    e = q.size
    data[0:e], data[3 * e:m] = rr[0], rr[2]
    data[e:2 * e] = data[2 * e:3 * e] = rr[1]
    wds = w * ds
    rs = data[m:2 * m]
    rs[0:e], rs[2 * e:3 * e] = wds * th_a, wds * th_b
    rs[e:2 * e], rs[3 * e:4 * e] = -rs[0:e], -rs[2 * e:3 * e]
    data[2 * m:3 * m] = rs
    wt = w * th
    ss = data[3 * m:4 * m]
    ss[0:e], ss[3 * e:4 * e] = wt, wt
    ss[e:2 * e] = ss[2 * e:3 * e] = -wt
    if spec.W is not None:
        data[4 * m:] = spec._w_vals
    return rows, cols, data


def hessian(g: WeightedGraph, spec: HamiltonianSpec, rho, s, orient=None) -> sp.csr_matrix:
    """Sparse Hessian of ``H`` in the ordering ``(rho, S)``."""
    n = g.n_nodes
    r, c, d = hessian_triplets(g, spec, rho, s, orient)
    return sp.csr_matrix((d, (r, c)), shape=(2 * n, 2 * n))
