"""Synthetic toy molecules with several reference conformers each.

Every molecule starts from a hard-coded skeleton (chain, branch or ring)
with a small seeded jitter.  Conformers differ by rotations about torsional
bonds, or by ring puckering for the pure ring template.
"""

from __future__ import annotations

import math

import networkx as nx
import numpy as np

from .evaluation import kabsch_rmsd
from .graph import MolGraph, torsional_decompose

BOND = 1.5
ANGLE = math.radians(111.0)
MIN_CONFORMER_RMSD = 0.3
DECIMALS = 4


def _place(a, b, c, dihedral, bond=BOND, angle=ANGLE):
    """Position of d bonded to c with angle b-c-d and dihedral a-b-c-d."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    n = np.cross(b - a, bc)
    n /= np.linalg.norm(n)
    m = np.cross(n, bc)
    d2 = np.array([-bond * math.cos(angle),
                   bond * math.sin(angle) * math.cos(dihedral),
                   bond * math.sin(angle) * math.sin(dihedral)])
    return c + d2[0] * bc + d2[1] * m + d2[2] * n


def _seed_triplet():
    a = np.array([0.0, 1.0, 0.0])
    b = np.array([0.0, 0.0, 0.0])
    c = np.array([BOND, 0.0, 0.0])
    return a, b, c


def _chain(n):
    a, b, c = _seed_triplet()
    pts = [b, c, _place(a, b, c, math.pi)]
    while len(pts) < n:
        pts.append(_place(pts[-3], pts[-2], pts[-1], math.pi))
    return np.array(pts[:n]), [(i, i + 1, 1) for i in range(n - 1)]


def _branched():
    x, bonds = _chain(5)
    x = np.vstack([x, _place(x[3], x[2], x[1], math.radians(120.0))])
    return x, bonds + [(1, 5, 1)]


def _ring(n):
    r = BOND / (2.0 * math.sin(math.pi / n))
    ang = 2.0 * math.pi * np.arange(n) / n
    x = np.stack([r * np.cos(ang), r * np.sin(ang), np.zeros(n)], axis=1)
    return x, [(i, (i + 1) % n, 1) for i in range(n)]


def _ring_tail():
    x, bonds = _ring(5)
    out = x[0] / np.linalg.norm(x[0])
    t0 = x[0] + BOND * out
    t1 = _place(x[1], x[0], t0, math.radians(90.0))
    t2 = _place(x[0], t0, t1, math.pi)
    return np.vstack([x, t0, t1, t2]), bonds + [(0, 5, 1), (5, 6, 1), (6, 7, 1)]


def _templates():
    chain4, chain5, chain6 = _chain(4), _chain(5), _chain(6)
    ring6 = _ring(6)
    return {
        "chain4": (chain4[0], chain4[1], [0, 0, 0, 0]),
        "chain5": (chain5[0], chain5[1], [0, 0, 1, 0, 0]),
        "branched6": (*_branched(), [0, 0, 0, 0, 2, 0]),
        "chain6": (chain6[0], chain6[1], [2, 0, 0, 0, 0, 1]),
        "ring_tail8": (*_ring_tail(), [0, 0, 0, 0, 1, 0, 0, 2]),
        "ring6": (ring6[0], [(i, j, 4) for i, j, _ in ring6[1]], [0] * 6),
    }


TEMPLATE_NAMES = list(_templates())


def _rotate_side(x, g: MolGraph, i, j, angle):
    """Rotate the fragment on j's side of bond (i, j) about the bond axis."""
    nxg = g.to_networkx()
    nxg.remove_edge(i, j)
    side = sorted(nx.node_connected_component(nxg, j))
    axis = x[j] - x[i]
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    R = np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)
    y = x.copy()
    y[side] = (x[side] - x[j]) @ R.T + x[j]
    return y


def _torsional_bonds(g: MolGraph):
    n = g.num_nodes
    out = []
    for (i, j, _), ring in zip(g.bonds, g.ring_edge_flags):
        if ring:
            continue
        h = g.to_networkx()
        h.remove_edge(i, j)
        size = len(nx.node_connected_component(h, i))
        if size >= 2 and n - size >= 2:
            out.append((i, j))
    return out


def _pucker(x, rng):
    n = len(x)
    idx = np.arange(n)
    a1, a2 = rng.uniform(-0.6, 0.6, size=2)
    phase = rng.uniform(0, 2 * math.pi)
    y = x.copy()
    y[:, 2] += a1 * (-1.0) ** idx + a2 * np.cos(2 * math.pi * idx / 3 + phase)
    return y


def _conformer(base, g, torsions, rng):
    if not torsions:
        return _pucker(base, rng)
    x = base
    for i, j in torsions:
        rotamer = rng.choice([60.0, 180.0, 300.0]) + rng.normal(0.0, 10.0)
        x = _rotate_side(x, g, i, j, math.radians(rotamer - 180.0))
    return x


def generate_molecule(template: str, rng: np.random.Generator, mol_id: str | None = None) -> MolGraph:
    templates = _templates()
    if template not in templates:
        raise ValueError(f"unknown template {template!r}; choose from {TEMPLATE_NAMES}")
    coords, bonds, atoms = templates[template]
    base = coords + rng.normal(0.0, 0.03, size=coords.shape)
    g = MolGraph(atoms, bonds, base, mol_id=mol_id)
    torsions = _torsional_bonds(g)
    want = int(rng.integers(2, 5))
    confs: list[np.ndarray] = []
    for _ in range(500):
        c = np.round(_conformer(base, g, torsions, rng), DECIMALS)
        c = np.round(c - c.mean(axis=0), DECIMALS)
        if all(kabsch_rmsd(c, o) >= MIN_CONFORMER_RMSD for o in confs):
            confs.append(c)
            if len(confs) == want:
                break
    if len(confs) < 2:
        raise RuntimeError(f"could not build two distinct conformers for {template}")
    return MolGraph(atoms, bonds, confs[0], conformers=confs, mol_id=mol_id)


def generate_toyset(num_molecules: int, seed: int, templates: list[str] | None = None) -> list[MolGraph]:
    """Round-robin over ``templates`` (default: all) with seeded jitter."""
    if num_molecules < 1:
        raise ValueError("num_molecules must be >= 1")
    names = templates or TEMPLATE_NAMES
    unknown = set(names) - set(TEMPLATE_NAMES)
    if unknown:
        raise ValueError(f"unknown templates: {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    return [
        generate_molecule(names[i % len(names)], rng, mol_id=f"{names[i % len(names)]}-{i:04d}")
        for i in range(num_molecules)
    ]


def has_torsional_edge(g: MolGraph) -> bool:
    return not torsional_decompose(g).bernoulli
