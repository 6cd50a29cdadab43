"""Network flow imputation from partial daily traffic counts.

Measured edges carry expected flows; unmeasured edges are reconstructed by
minimizing squared deviation from the measurements subject to flow
conservation at every internal node. Nonnegativity is enforced with an
active-set loop on top of the equality-constrained least squares solve
(negative daily flows are physically meaningless).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ecodrive.scenario import ConfigurationError

Edge = tuple[str, str]


class FlowImputationError(RuntimeError):
    """Conservation system could not be satisfied to tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass
class RoadGraph:
    """Directed road network with optional measured flow per edge (veh/day)."""

    edges: list[Edge]
    measured: dict[Edge, float] = field(default_factory=dict)
    source_set: set[str] = field(default_factory=set)
    sink_set: set[str] = field(default_factory=set)

    @property
    def nodes(self) -> list[str]:
        seen: dict[str, None] = {}
        for u, v in self.edges:
            seen.setdefault(u)
            seen.setdefault(v)
        return list(seen)

    def validate(self) -> None:
        if not self.edges:
            raise ConfigurationError("graph has no edges")
        edge_set = set(self.edges)
        if len(edge_set) != len(self.edges):
            raise ConfigurationError("duplicate edges")
        for e in self.measured:
            if e not in edge_set:
                raise ConfigurationError(f"measured edge {e} not in graph")
        nodes = set(self.nodes)
        for s in self.source_set | self.sink_set:
            if s not in nodes:
                raise ConfigurationError(f"source/sink {s!r} not in graph")

    def internal_nodes(self) -> list[str]:
        return [n for n in self.nodes if n not in self.source_set and n not in self.sink_set]


def infer_terminals(graph: RoadGraph) -> None:
    """Fill empty source/sink sets from node degree (no in-edges / no out-edges)."""
    has_in = {v for _, v in graph.edges}
    has_out = {u for u, _ in graph.edges}
    if not graph.source_set:
        graph.source_set = {n for n in graph.nodes if n not in has_in}
    if not graph.sink_set:
        graph.sink_set = {n for n in graph.nodes if n not in has_out}


@dataclass
class FlowResult:
    flows: dict[Edge, float]
    kkt_residual: float
    conservation_residual: float


def _conservation_matrix(graph: RoadGraph) -> np.ndarray:
    """Rows: internal nodes; entries +1 for incoming edges, -1 for outgoing."""
    index = {e: i for i, e in enumerate(graph.edges)}
    internal = graph.internal_nodes()
    A = np.zeros((len(internal), len(graph.edges)))
    for r, node in enumerate(internal):
        for e in graph.edges:
            if e[1] == node:
                A[r, index[e]] += 1.0
            if e[0] == node:
                A[r, index[e]] -= 1.0
    return A


def _solve_kkt(W: np.ndarray, f: np.ndarray, A: np.ndarray, active: np.ndarray):
    """Minimize ||W^(1/2)(x - f)||^2 s.t. Ax = 0 and x[active] = 0.

    Returns (x, lam, mu) where lam are conservation multipliers and mu the
    multipliers of the active bounds. Singular systems (unmeasured edges off
    every constraint) resolve to the minimum-norm KKT solution.
    """
    m = len(f)
    act_idx = np.flatnonzero(active)
    B = np.zeros((len(act_idx), m))
    B[np.arange(len(act_idx)), act_idx] = 1.0
    C = np.vstack([A, B]) if len(act_idx) else A
    k = C.shape[0]
    kkt = np.zeros((m + k, m + k))
    kkt[:m, :m] = 2.0 * np.diag(W)
    kkt[:m, m:] = C.T
    kkt[m:, :m] = C
    rhs = np.concatenate([2.0 * W * f, np.zeros(k)])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    x = sol[:m]
    lam = sol[m:m + A.shape[0]]
    mu = sol[m + A.shape[0]:]
    return x, lam, mu


def impute_flows(graph: RoadGraph, tol: float = 1e-9, max_iter: int = 200) -> FlowResult:
    """Assign a flow to every edge; exact least squares up to solver tolerance.

    Raises FlowImputationError when the conservation system cannot be met to
    within 1e-6 per node.
    """
    graph.validate()
    if not graph.source_set and not graph.sink_set:
        infer_terminals(graph)
    edges = graph.edges
    m = len(edges)
    W = np.array([1.0 if e in graph.measured else 0.0 for e in edges])
    f = np.array([graph.measured.get(e, 0.0) for e in edges])
    A = _conservation_matrix(graph)

    active = np.zeros(m, dtype=bool)
    x = np.zeros(m)
    for _ in range(max_iter):
        x, lam, mu = _solve_kkt(W, f, A, active)
        negative = np.flatnonzero(~active & (x < -tol * max(1.0, np.abs(f).max(initial=1.0))))
        if len(negative):
            active[negative[np.argmin(x[negative])]] = True
            continue
        # release active bounds whose multiplier says the bound binds wrongly
        if len(mu) and mu.min() < -tol:
            act_idx = np.flatnonzero(active)
            active[act_idx[np.argmin(mu)]] = False
            continue
        break
    x = np.where(np.abs(x) < tol, 0.0, x)

    grad = 2.0 * W * (x - f)
    if A.size:
        grad = grad + A.T @ lam
    act_idx = np.flatnonzero(active)
    if len(act_idx):
        grad[act_idx] = 0.0  # absorbed by bound multipliers
    scale = max(1.0, np.abs(f).max(initial=1.0))
    kkt_residual = float(np.abs(grad).max() / scale) if m else 0.0
    conservation = float(np.abs(A @ x).max()) if A.size else 0.0
    if conservation > 1e-6 * scale:
        raise FlowImputationError("conservation system inconsistent", conservation)
    return FlowResult(
        flows={e: float(x[i]) for i, e in enumerate(edges)},
        kkt_residual=kkt_residual,
        conservation_residual=conservation,
    )


# ---------------------------------------------------------------------------
# Edge-list text format: `src dst [flow]`, '#' comments

def parse_graph(text: str) -> RoadGraph:
    edges: list[Edge] = []
    measured: dict[Edge, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ConfigurationError(f"line {lineno}: expected 'src dst [flow]', got {raw!r}")
        e = (parts[0], parts[1])
        edges.append(e)
        if len(parts) == 3:
            measured[e] = float(parts[2])
    graph = RoadGraph(edges=edges, measured=measured)
    infer_terminals(graph)
    graph.validate()
    return graph


def serialize_flows(result: FlowResult) -> str:
    lines = [f"{u} {v} {result.flows[(u, v)]:.6f}" for u, v in result.flows]
    lines.append(f"# kkt_residual {result.kkt_residual:.3e}  conservation {result.conservation_residual:.3e}")
    return "\n".join(lines) + "\n"
