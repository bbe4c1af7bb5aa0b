"""Weighted graphs on which the flows live, plus 1-D lattice constructors."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


class GraphError(ValueError):
    """Raised when a graph violates one of the structural invariants.

    ``kind`` is one of ``size``, ``index``, ``self_loop``, ``duplicate_edge``,
    ``nonpositive_weight``, ``disconnected``, ``format``.
    """

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Undirected graph with kinetic weights ``omega`` and Fisher weights ``omega_tilde``.

    Every unordered pair is stored once with ``heads[e] < tails[e]``.
    Construct through :meth:`from_edges` or the lattice builders, which
    normalise orientation and validate.
    """

    n_nodes: int
    heads: np.ndarray
    tails: np.ndarray
    omega: np.ndarray
    omega_tilde: np.ndarray
    node_positions: np.ndarray | None = None
    adjacency: tuple = field(init=False, repr=False)
    boundary_nodes: frozenset = field(init=False)

    def __post_init__(self):
        for name in ("heads", "tails"):
            arr = np.asarray(getattr(self, name), dtype=np.intp)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("omega", "omega_tilde"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
        for e, (i, j) in enumerate(zip(self.heads.tolist(), self.tails.tolist())):
            if 0 <= i < self.n_nodes:
                adj[i].append((j, e))
            if 0 <= j < self.n_nodes and j != i:
                adj[j].append((i, e))
        object.__setattr__(self, "adjacency", tuple(tuple(a) for a in adj))
        object.__setattr__(
            self, "boundary_nodes", frozenset(k for k, a in enumerate(adj) if len(a) == 1)
        )

    @classmethod
    def from_edges(cls, n_nodes, edges, node_positions=None, check=True) -> "WeightedGraph":
        """Build from ``(i, j, omega, omega_tilde)`` tuples (orientation is normalised)."""
        heads, tails, w, wt = [], [], [], []
        for i, j, om, omt in edges:
            i, j = int(i), int(j)
            if i > j:
                i, j = j, i
            heads.append(i)
            tails.append(j)
            w.append(float(om))
            wt.append(float(omt))
        g = cls(int(n_nodes), np.array(heads, dtype=np.intp), np.array(tails, dtype=np.intp),
                np.array(w), np.array(wt), node_positions)
        if check:
            validate(g)
        return g

    @property
    def n_edges(self) -> int:
        return len(self.heads)

    @property
    def edges(self) -> list[tuple[int, int, float, float]]:
        return list(zip(self.heads.tolist(), self.tails.tolist(),
                        self.omega.tolist(), self.omega_tilde.tolist()))

    def degree(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=int)

    @cached_property
    def block_pattern(self) -> tuple[np.ndarray, np.ndarray]:
        """Row and column indices of the per-edge 2x2 blocks, ordered (hh, ht, th, tt)."""
        h, t = self.heads, self.tails
        rows = np.concatenate([h, h, t, t])
        cols = np.concatenate([h, t, h, t])
        rows.setflags(write=False)
        cols.setflags(write=False)
        return rows, cols

    def _csgraph(self):
        ones = np.ones(self.n_edges)
        return coo_matrix((ones, (self.heads, self.tails)), shape=(self.n_nodes, self.n_nodes)).tocsr()


def validate(g: WeightedGraph) -> None:
    """Check the graph invariants; raise :class:`GraphError` on the first violation."""
    if g.n_nodes < 1:
        raise GraphError("size", "graph needs at least one node")
    if np.any(g.heads < 0) or np.any(g.tails >= g.n_nodes) or np.any(g.tails < 0) \
            or np.any(g.heads >= g.n_nodes):
        raise GraphError("index", "edge endpoint outside [0, n_nodes)")
    loops = np.flatnonzero(g.heads == g.tails)
    if loops.size:
        k = int(g.heads[loops[0]])
        raise GraphError("self_loop", f"edge ({k},{k})")
    seen = set()
    for i, j in zip(g.heads.tolist(), g.tails.tolist()):
        if (i, j) in seen:
            raise GraphError("duplicate_edge", f"edge ({i},{j}) appears twice")
        seen.add((i, j))
    bad = np.flatnonzero((g.omega <= 0) | (g.omega_tilde <= 0) | ~np.isfinite(g.omega)
                         | ~np.isfinite(g.omega_tilde))
    if bad.size:
        e = int(bad[0])
        raise GraphError("nonpositive_weight",
                         f"edge ({g.heads[e]},{g.tails[e]}) has omega={g.omega[e]}, "
                         f"omega_tilde={g.omega_tilde[e]}")
    if g.n_nodes > 1:
        ncomp, _ = connected_components(g._csgraph(), directed=False)
        if ncomp != 1:
            raise GraphError("disconnected", f"{ncomp} connected components")


def build_lattice_1d(n: int, h: float, boundary: str = "periodic") -> WeightedGraph:
    """Nearest-neighbour lattice with ``omega = omega_tilde = 1/h**2``.

    ``boundary='periodic'`` gives an ``n``-cycle, ``'path'`` a chain of ``n - 1`` edges.
    """
    if h <= 0:
        raise GraphError("size", f"spacing h must be positive, got {h}")
    if boundary == "periodic":
        if n < 3:
            raise GraphError("size", f"periodic lattice needs n >= 3, got {n}")
        pairs = [(i, (i + 1) % n) for i in range(n)]
    elif boundary == "path":
        if n < 2:
            raise GraphError("size", f"path lattice needs n >= 2, got {n}")
        pairs = [(i, i + 1) for i in range(n - 1)]
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    w = 1.0 / h**2
    return WeightedGraph.from_edges(n, [(i, j, w, w) for i, j in pairs],
                                    node_positions=h * np.arange(n))


def boundary_metrics(g: WeightedGraph) -> tuple[int, int]:
    """Return ``(kappa, d_max)``: boundary-node count and largest hop distance between them.

    With fewer than two boundary nodes ``d_max`` is the graph diameter.
    """
    dist = shortest_path(g._csgraph(), directed=False, unweighted=True)
    bnodes = sorted(g.boundary_nodes)
    kappa = len(bnodes)
    if kappa >= 2:
        d_max = dist[np.ix_(bnodes, bnodes)].max()
    else:
        d_max = dist.max()
    return kappa, int(d_max)


def read_edge_list(path) -> WeightedGraph:
    """Parse the plain-text format: ``nodes N`` header, then ``i j omega omega_tilde`` lines."""
    n_nodes = None
    edges = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if n_nodes is None:
            if len(parts) != 2 or parts[0] != "nodes":
                raise GraphError("format", f"line {lineno}: expected 'nodes N' header")
            n_nodes = int(parts[1])
            continue
        if len(parts) != 4:
            raise GraphError("format", f"line {lineno}: expected 'i j omega omega_tilde'")
        try:
            edges.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
        except ValueError as exc:
            raise GraphError("format", f"line {lineno}: {exc}") from None
    if n_nodes is None:
        raise GraphError("format", "missing 'nodes N' header")
    return WeightedGraph.from_edges(n_nodes, edges)


def write_edge_list(g: WeightedGraph, path) -> None:
    lines = [f"nodes {g.n_nodes}"]
    lines += [f"{i} {j} {w!r} {wt!r}" for i, j, w, wt in g.edges]
    Path(path).write_text("\n".join(lines) + "\n")
