"""Electrical networks on rooted trees: effective resistance, L2-capacity and cutset bounds.

A :class:`ResistorTree` stores one resistance per non-root node, carried by the edge to its
parent. Current flows from the root to the set of leaves, which is treated as one terminal.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
import scipy.sparse.linalg as spsl
from scipy.special import logsumexp

from src.logging_config import logger

from .tree_model import TreeShape

# Beyond this log-resistance the plain reduction may overflow.
_LOG_DOMAIN_THRESHOLD = 600.0


class ResistorTree:
    def __init__(self, parents: Sequence[int], log_resistances: Sequence[float]) -> None:
        parents_arr = np.asarray(parents, dtype=np.int64)
        log_r = np.asarray(log_resistances, dtype=np.float64)
        if parents_arr.ndim != 1 or parents_arr.size == 0 or parents_arr[0] != -1:
            raise ValueError("parents must be a 1-d sequence starting with -1 for the root")
        if log_r.shape != parents_arr.shape:
            raise ValueError("one resistance slot per node is required")
        for i in range(1, parents_arr.size):
            if not 0 <= parents_arr[i] < i:
                raise ValueError(f"node {i!r} must have a parent with a smaller index")
        if not np.all(np.isfinite(log_r[1:])):
            raise ValueError("resistances must be strictly positive and finite")
        self.parents = parents_arr
        self.log_resistances = log_r
        self.children: list[list[int]] = [[] for _ in range(parents_arr.size)]
        for i in range(1, parents_arr.size):
            self.children[int(parents_arr[i])].append(i)

    @classmethod
    def from_resistances(cls, parents: Sequence[int], resistances: Sequence[float]) -> (
        ResistorTree
    ):
        r = np.asarray(resistances, dtype=np.float64)
        if np.any(r[1:] <= 0.0) or not np.all(np.isfinite(r[1:])):
            raise ValueError("resistances must be strictly positive and finite")
        log_r = np.zeros_like(r)
        log_r[1:] = np.log(r[1:])
        return cls(parents, log_r)

    @property
    def n(self) -> int:
        return int(self.parents.size)

    @property
    def resistances(self) -> np.ndarray:
        out = np.exp(self.log_resistances)
        out[0] = np.nan
        return out

    @property
    def edges(self) -> list[int]:
        """Edges are named by their child node."""
        return list(range(1, self.n))

    @property
    def leaves(self) -> list[int]:
        return [v for v in range(self.n) if not self.children[v]]

    def depths(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.int64)
        for v in range(1, self.n):
            out[v] = out[self.parents[v]] + 1
        return out

    def with_resistance(self, edge: int, resistance: float) -> ResistorTree:
        if resistance <= 0.0 or not math.isfinite(resistance):
            raise ValueError(f"resistance must be positive and finite, got {resistance!r}")
        log_r = self.log_resistances.copy()
        log_r[edge] = math.log(resistance)
        return ResistorTree(self.parents, log_r)

    def graph(self, removed: Iterable[int] = ()) -> nx.Graph:
        removed = set(removed)
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        for v in self.edges:
            if v not in removed:
                g.add_edge(int(self.parents[v]), v, cnd=math.exp(-self.log_resistances[v]))
        return g


def tree_view(shape: TreeShape, root: int = 0, depth: int | None = None) -> (
    tuple[list[int], list[int]]
):
    """Vertices of ball(root, depth) and their parents relabelled 0..m-1."""
    if depth is None:
        depth = shape.h - shape.level(root)
    vertices = shape.ball(root, depth)
    index = {v: i for i, v in enumerate(vertices)}
    parents = [-1] + [index[int(shape.parents[v])] for v in vertices[1:]]
    return vertices, parents


def level_resistances(
    shape: TreeShape, theta: float, root: int = 0, depth: int | None = None
) -> ResistorTree:
    """Resistor tree on ball(root, depth); the edge into a node k levels below the root carries
    theta^(-2k)."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta!r}")
    vertices, parents = tree_view(shape, root, depth)
    base = shape.level(root)
    log_r = [0.0] + [-2.0 * (shape.level(v) - base) * math.log(theta) for v in vertices[1:]]
    return ResistorTree(parents, log_r)


def log_effective_resistance(rt: ResistorTree) -> float:
    """log R_eff(root <-> leaves) by leaf-to-root reduction in the log domain."""
    if rt.n == 1:
        raise ValueError("a single-node tree has no root-to-leaf resistance")
    log_sub = np.full(rt.n, -np.inf)
    for v in range(rt.n - 1, -1, -1):
        kids = rt.children[v]
        if not kids:
            continue
        branch = np.logaddexp(rt.log_resistances[kids], log_sub[kids])
        log_sub[v] = -float(logsumexp(-branch))
    return float(log_sub[0])


def effective_resistance(rt: ResistorTree) -> float:
    """R_eff(root <-> leaves): conductances of children add, edge resistances add in series."""
    if rt.n == 1:
        raise ValueError("a single-node tree has no root-to-leaf resistance")
    if np.max(rt.log_resistances[1:]) > _LOG_DOMAIN_THRESHOLD:
        logger.debug("effective_resistance: switching to log-domain reduction")
        return math.exp(log_effective_resistance(rt))
    resistances = rt.resistances
    sub = np.zeros(rt.n)
    for v in range(rt.n - 1, -1, -1):
        kids = rt.children[v]
        if kids:
            sub[v] = 1.0 / math.fsum(1.0 / (resistances[c] + sub[c]) for c in kids)
    return float(sub[0])


def l2_capacity(rt: ResistorTree) -> float:
    """cap_2 = effective conductance between the root and the leaves."""
    return math.exp(-log_effective_resistance(rt))


def effective_resistance_kirchhoff(rt: ResistorTree) -> float:
    """Same quantity from the grounded Laplacian, with all leaves merged into one sink."""
    leaves = set(rt.leaves)
    if 0 in leaves:
        raise ValueError("a single-node tree has no root-to-leaf resistance")
    sink = rt.n
    g = nx.Graph()
    for v in rt.edges:
        u = int(rt.parents[v])
        w = sink if v in leaves else v
        cnd = math.exp(-rt.log_resistances[v])
        if g.has_edge(u, w):
            g[u][w]["cnd"] += cnd
        else:
            g.add_edge(u, w, cnd=cnd)
    nodelist = [v for v in range(rt.n) if v not in leaves]
    laplacian = nx.laplacian_matrix(g, nodelist=nodelist + [sink], weight="cnd").tocsc()
    grounded = laplacian[:-1, :-1]
    current = np.zeros(len(nodelist))
    current[0] = 1.0
    potential = spsl.spsolve(grounded, current)
    return float(np.atleast_1d(potential)[0])


def level_cutsets(rt: ResistorTree) -> list[list[int]]:
    """Edges grouped by the depth of their child node, restricted to full levels."""
    depths = rt.depths()
    min_leaf_depth = min(int(depths[v]) for v in rt.leaves)
    return [
        [v for v in rt.edges if depths[v] == k] for k in range(1, min_leaf_depth + 1)
    ]


def _check_separates(rt: ResistorTree, cutset: Iterable[int]) -> bool:
    g = rt.graph(removed=cutset)
    reachable = nx.node_connected_component(g, 0)
    return not any(leaf in reachable for leaf in rt.leaves)


def nash_williams_bound(rt: ResistorTree, cutsets: Sequence[Iterable[int]]) -> float:
    """sum_j (sum_{e in cutset_j} 1/R_e)^(-1), a lower bound on R_eff."""
    seen: set[int] = set()
    total: list[float] = []
    for j, cutset in enumerate(cutsets):
        edges = [int(e) for e in cutset]
        if not edges:
            raise ValueError(f"cutset {j!r} is empty")
        for e in edges:
            if not 1 <= e < rt.n:
                raise ValueError(f"cutset {j!r} names unknown edge {e!r}")
        if seen.intersection(edges):
            raise ValueError(f"cutset {j!r} overlaps an earlier cutset")
        seen.update(edges)
        if not _check_separates(rt, edges):
            raise ValueError(f"cutset {j!r} does not separate the root from the leaves")
        log_cnd = logsumexp(-rt.log_resistances[edges])
        total.append(math.exp(-log_cnd))
    return math.fsum(total)


def uniform_split_flow(rt: ResistorTree, strength: float = 1.0) -> np.ndarray:
    """Flow that splits evenly among the children at every node."""
    flow = np.zeros(rt.n)
    inflow = np.zeros(rt.n)
    inflow[0] = strength
    for v in range(rt.n):
        kids = rt.children[v]
        for c in kids:
            flow[c] = inflow[v] / len(kids)
            inflow[c] = flow[c]
    return flow


@dataclass(frozen=True)
class FlowReport:
    strength: float
    voltage: float
    feasible: bool
    within_capacity: bool
    conservation_violations: dict[int, float] = field(default_factory=dict)
    negative_edges: tuple[int, ...] = ()


def validate_flow(
    rt: ResistorTree, flow: Sequence[float] | Mapping[int, float], tol: float = 1e-9
) -> FlowReport:
    """Strength |f|, voltage V(f) and conservation check of a root-to-leaves flow.

    ``flow`` is indexed by child node (slot 0 is ignored) or given as {edge: value}.
    """
    if isinstance(flow, Mapping):
        values = np.zeros(rt.n)
        for e, x in flow.items():
            values[int(e)] = float(x)
    else:
        values = np.asarray(flow, dtype=np.float64)
        if values.shape != (rt.n,):
            raise ValueError(f"expected {rt.n} flow slots, got {values.shape!r}")
    negative = tuple(e for e in rt.edges if values[e] < -tol)
    violations: dict[int, float] = {}
    for v in range(1, rt.n):
        kids = rt.children[v]
        if kids:
            excess = values[v] - math.fsum(values[c] for c in kids)
            if abs(excess) > tol * max(1.0, abs(values[v])):
                violations[v] = float(excess)

    strength = math.fsum(values[c] for c in rt.children[0])
    drop = np.zeros(rt.n)
    resistances = rt.resistances
    for v in range(1, rt.n):
        drop[v] = drop[rt.parents[v]] + values[v] * resistances[v]
    voltage = float(max(drop[v] for v in rt.leaves)) if rt.n > 1 else 0.0
    cap = l2_capacity(rt) if rt.n > 1 else 0.0
    feasible = not violations and not negative
    within = strength <= cap * voltage * (1.0 + tol) + tol
    if violations:
        logger.warning("flow violates conservation at %d vertices", len(violations))
    return FlowReport(
        strength=strength,
        voltage=voltage,
        feasible=feasible,
        within_capacity=bool(within),
        conservation_violations=violations,
        negative_edges=negative,
    )
