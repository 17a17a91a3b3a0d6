"""Toy molecular graphs and the subgraph (mask) distribution.

The mask distribution follows the torsional decomposition: every bridge bond
whose removal leaves two fragments of at least two atoms each contributes the
two complementary fragment masks.  Molecules without such a bond fall back to
independent Bernoulli(0.5) bits per atom.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np


class GraphError(ValueError):
    """Raised when a molecular graph violates its structural invariants."""


@dataclass
class MolGraph:
    atom_type: np.ndarray
    bonds: list[tuple[int, int, int]]
    coords: np.ndarray
    conformers: list[np.ndarray] = field(default_factory=list)
    mol_id: str | None = None
    ring_edge_flags: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.atom_type = np.asarray(self.atom_type, dtype=np.int64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.conformers = [np.asarray(c, dtype=np.float64) for c in self.conformers]
        self.bonds = [
            (min(int(i), int(j)), max(int(i), int(j)), int(b)) for i, j, b in self.bonds
        ]
        self.validate()
        bridges = {tuple(sorted(e)) for e in nx.bridges(self.to_networkx())}
        self.ring_edge_flags = np.array(
            [(i, j) not in bridges for i, j, _ in self.bonds], dtype=bool
        )

    @property
    def num_nodes(self) -> int:
        return int(self.atom_type.shape[0])

    def validate(self) -> None:
        n = self.atom_type.shape[0]
        if n < 1:
            raise GraphError("graph must have at least one atom")
        if self.coords.shape != (n, 3):
            raise GraphError(f"coords shape {self.coords.shape} != ({n}, 3)")
        if not np.all(np.isfinite(self.coords)):
            raise GraphError("coords contain non-finite values")
        seen = set()
        for i, j, _ in self.bonds:
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"bond ({i}, {j}) out of range for {n} atoms")
            if (i, j) in seen:
                raise GraphError(f"duplicate bond ({i}, {j})")
            seen.add((i, j))
        if not nx.is_connected(self.to_networkx()):
            raise GraphError("graph is not connected")
        for c in self.conformers:
            if c.shape != (n, 3) or not np.all(np.isfinite(c)):
                raise GraphError("conformer shape or values invalid")

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.atom_type.shape[0]))
        g.add_edges_from((i, j) for i, j, _ in self.bonds)
        return g

    def to_record(self) -> dict:
        rec = {
            "atoms": [int(a) for a in self.atom_type],
            "bonds": [[i, j, b] for i, j, b in self.bonds],
            "coords": self.coords.tolist(),
        }
        if self.mol_id is not None:
            rec = {"id": self.mol_id, **rec}
        if self.conformers:
            rec["conformers"] = [c.tolist() for c in self.conformers]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "MolGraph":
        try:
            return cls(
                atom_type=rec["atoms"],
                bonds=[tuple(b) for b in rec["bonds"]],
                coords=rec["coords"],
                conformers=rec.get("conformers", []),
                mol_id=rec.get("id"),
            )
        except KeyError as exc:
            raise GraphError(f"record missing key {exc}") from None


@dataclass(frozen=True)
class SubgraphSpace:
    """Uniform distribution over candidate masks.

    When ``bernoulli`` is set the space is the implicit set of all bit
    vectors, sampled bit by bit with probability ``p``.
    """

    num_nodes: int
    candidates: np.ndarray
    bernoulli: bool = False
    node_marginal: np.ndarray | None = None

    def __post_init__(self):
        if not self.bernoulli and len(self.candidates) == 0:
            raise ValueError("subgraph space has no candidates")

    @property
    def probs(self) -> np.ndarray:
        n = len(self.candidates)
        return np.full(n, 1.0 / n) if n else np.zeros(0)

    @property
    def p(self) -> float:
        """Average per-node probability of being selected."""
        return float(np.mean(self.marginals()))

    def marginals(self) -> np.ndarray:
        if self.bernoulli:
            return np.full(self.num_nodes, 0.5)
        return self.candidates.mean(axis=0)

    def to_record(self) -> dict:
        return {
            "num_nodes": self.num_nodes,
            "bernoulli_fallback": self.bernoulli,
            "candidates": self.candidates.astype(int).tolist(),
            "node_marginal": self.marginals().tolist(),
            "p": self.p,
        }


def torsional_decompose(g: MolGraph) -> SubgraphSpace:
    n = g.num_nodes
    empty = np.zeros((0, n), dtype=np.int8)
    if n < 4:
        return SubgraphSpace(n, empty, bernoulli=True)
    nxg = g.to_networkx()
    masks = []
    for (i, j, _), ring in zip(g.bonds, g.ring_edge_flags):
        if ring:
            continue
        h = nxg.copy()
        h.remove_edge(i, j)
        side = nx.node_connected_component(h, i)
        if len(side) < 2 or n - len(side) < 2:
            continue
        s = np.zeros(n, dtype=np.int8)
        s[sorted(side)] = 1
        masks.append(s)
        masks.append(1 - s)
    if not masks:
        return SubgraphSpace(n, empty, bernoulli=True)
    cands = np.unique(np.stack(masks), axis=0)
    return SubgraphSpace(n, cands, node_marginal=cands.mean(axis=0))


def sample_mask(space: SubgraphSpace, rng: np.random.Generator) -> np.ndarray:
    if space.bernoulli:
        return (rng.random(space.num_nodes) < 0.5).astype(np.int8)
    idx = rng.integers(len(space.candidates))
    return space.candidates[idx].copy()


def center_coords(coords) -> np.ndarray:
    x = np.asarray(coords, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 3 or x.shape[0] < 1:
        raise ValueError(f"expected an (N, 3) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("coordinates must be finite")
    return x - x.mean(axis=0, keepdims=True)


def is_connected_subset(g: MolGraph, mask) -> bool:
    nodes = [int(v) for v in np.flatnonzero(mask)]
    if not nodes:
        return False
    return nx.is_connected(g.to_networkx().subgraph(nodes))


def read_jsonl(path) -> list[MolGraph]:
    graphs = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                graphs.append(MolGraph.from_record(json.loads(line)))
            except (json.JSONDecodeError, GraphError) as exc:
                raise GraphError(f"{path}:{lineno}: {exc}") from None
    return graphs


def write_jsonl(path, graphs) -> None:
    Path(path).write_text("".join(json.dumps(g.to_record()) + "\n" for g in graphs))
