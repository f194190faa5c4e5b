"""Hypergraph construction from molecular graphs.

Three constructors are provided:

* ``functional_group``: smallest rings, acyclic functional groups matched by a
  central atom plus filtered one- and two-hop neighbours, and connected
  leftovers; optionally grown by ``k`` hops.
* ``ring_and_bond``: one hyperedge per smallest ring and one per acyclic bond.
* ``khop``: one hyperedge per atom holding its closed ``k``-hop neighbourhood.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from itertools import product
from typing import Iterable

import numpy as np

from .smiles import BondOrder, MolGraph

SINGLE, DOUBLE, TRIPLE = BondOrder.SINGLE, BondOrder.DOUBLE, BondOrder.TRIPLE

MODES = ("functional_group", "ring_and_bond", "khop")


class EmptyMolecule(ValueError):
    pass


# ---------------------------------------------------------------------------
# smallest set of smallest rings
# ---------------------------------------------------------------------------

_MAX_PATHS = 256


def _bfs(g: MolGraph, root: int) -> tuple[list[int], list[list[int]]]:
    dist = [-1] * g.n_atoms
    preds: list[list[int]] = [[] for _ in range(g.n_atoms)]
    dist[root] = 0
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(g.neighbors(u)):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                preds[v].append(u)
                queue.append(v)
            elif dist[v] == dist[u] + 1:
                preds[v].append(u)
    return dist, preds


def _shortest_paths(preds: list[list[int]], target: int, root: int) -> list[tuple[int, ...]]:
    """All shortest paths root -> target (capped), each as a vertex tuple."""
    paths: list[tuple[int, ...]] = []

    def walk(v: int, suffix: tuple[int, ...]) -> None:
        if len(paths) >= _MAX_PATHS:
            return
        if v == root:
            paths.append((root,) + suffix)
            return
        for p in preds[v]:
            walk(p, (v,) + suffix)

    walk(target, ())
    return paths


def _edge_mask(g: MolGraph, cycle: Iterable[int], edge_index: dict[frozenset[int], int]) -> int:
    verts = list(cycle)
    mask = 0
    for a, b in zip(verts, verts[1:] + verts[:1]):
        mask |= 1 << edge_index[frozenset((a, b))]
    return mask


def candidate_cycles(g: MolGraph) -> list[tuple[int, ...]]:
    """Vismara-style candidates: every relevant cycle appears at least once.

    For each root r, odd cycles are two vertex-disjoint shortest paths r->x,
    r->y closed by the edge xy; even cycles are shortest paths r->x, r->y closed
    through a common neighbour p one step further from r.
    """
    seen: set[frozenset[int]] = set()
    out: list[tuple[int, ...]] = []

    def add(path_x: tuple[int, ...], path_y: tuple[int, ...], middle: tuple[int, ...]) -> None:
        if set(path_x[1:]) & set(path_y[1:]) or set(middle) & (set(path_x) | set(path_y)):
            return
        cycle = path_x + middle + tuple(reversed(path_y[1:]))
        # key on the edge set: distinct cycles may share a vertex set
        key = frozenset(frozenset(e) for e in zip(cycle, cycle[1:] + cycle[:1]))
        if key not in seen:
            seen.add(key)
            out.append(cycle)

    for r in range(g.n_atoms):
        dist, preds = _bfs(g, r)
        cache: dict[int, list[tuple[int, ...]]] = {}

        def paths(v: int) -> list[tuple[int, ...]]:
            if v not in cache:
                cache[v] = _shortest_paths(preds, v, r)
            return cache[v]

        for bond in g.bonds:
            x, y = bond.begin, bond.end
            if dist[x] < 0 or dist[x] != dist[y] or dist[x] == 0:
                continue
            for px, py in product(paths(x), paths(y)):
                add(px, py, ())
        for p in range(g.n_atoms):
            if dist[p] <= 1:
                continue
            lower = sorted(q for q in g.neighbors(p) if dist[q] == dist[p] - 1)
            for i, x in enumerate(lower):
                for y in lower[i + 1 :]:
                    for px, py in product(paths(x), paths(y)):
                        add(px, py, (p,))
    return out


def ring_basis(g: MolGraph) -> list[frozenset[int]]:
    """Smallest set of smallest rings as atom-index sets.

    Exactly ``|E| - |V| + components`` rings. Candidates are ordered by size and
    then by their sorted member list; a candidate is kept when its edge set is
    independent (over GF(2)) of those already kept.
    """
    n_rings = g.n_bonds - g.n_atoms + len(g.components())
    if n_rings == 0:
        return []
    edge_index = {frozenset(b.endpoints): i for i, b in enumerate(g.bonds)}
    cands = candidate_cycles(g)
    cands.sort(key=lambda c: (len(c), sorted(c)))
    basis: dict[int, int] = {}  # pivot bit -> reduced vector
    rings: list[frozenset[int]] = []
    for cycle in cands:
        vec = _edge_mask(g, cycle, edge_index)
        while vec:
            pivot = vec.bit_length() - 1
            if pivot not in basis:
                basis[pivot] = vec
                rings.append(frozenset(cycle))
                break
            vec ^= basis[pivot]
        if len(rings) == n_rings:
            break
    return rings


# ---------------------------------------------------------------------------
# functional-group catalogue
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NeighborSpec:
    """Requirement on the central atom's neighbours.

    At least ``min_count`` neighbours must have an element in ``elements`` and
    a bond order in ``orders``. ``min_h`` asks that neighbour to carry that many
    hydrogens; ``via`` asks it to have a further neighbour (other than the
    centre) of the given element over a bond in the given orders.
    """

    elements: frozenset[str]
    orders: frozenset[BondOrder]
    min_count: int = 1
    min_h: int = 0
    via: tuple[frozenset[str], frozenset[BondOrder]] | None = None


@dataclass(frozen=True)
class FGRule:
    name: str
    center: str
    target_atoms: frozenset[str]
    target_bonds: frozenset[BondOrder]
    pattern: tuple[NeighborSpec, ...]
    center_min_h: int = 0
    saturated_center: bool = False

    @property
    def central_elements(self) -> frozenset[str]:
        return frozenset({self.center})


def _n(elements: str, orders: str, count: int = 1, min_h: int = 0, via: tuple[str, str] | None = None) -> NeighborSpec:
    return NeighborSpec(
        frozenset(elements.split()),
        _orders(orders),
        count,
        min_h,
        None if via is None else (frozenset(via[0].split()), _orders(via[1])),
    )


def _orders(symbols: str) -> frozenset[BondOrder]:
    table = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE}
    return frozenset(table[s] for s in symbols)


def _rule(name: str, center: str, atoms: str, bonds: str, *pattern: NeighborSpec, **kw) -> FGRule:
    return FGRule(name, center, frozenset(atoms.split()), _orders(bonds), tuple(pattern), **kw)


# Ordered by central element (C, S, P, N, O) and, within an element, from the
# most to the least constrained neighbour pattern.
CARBON_RULES = (
    _rule("carbamate", "C", "O N", "-=", _n("O", "="), _n("O", "-"), _n("N", "-")),
    _rule("carbamide", "C", "O N", "-=", _n("O", "="), _n("N", "-", 2)),
    _rule("thiourea", "C", "S N", "-=", _n("S", "="), _n("N", "-", 2)),
    _rule("carboximidamide", "C", "N C", "-=", _n("N", "="), _n("N", "-")),
    _rule("carbodiimide", "C", "N", "=", _n("N", "=", 2)),
    _rule("isocyanate", "C", "N O", "=", _n("N", "="), _n("O", "=")),
    _rule("isothiocyanate", "C", "N S", "=", _n("N", "="), _n("S", "=")),
    _rule("ketene", "C", "C O", "=", _n("C", "="), _n("O", "=")),
    _rule("allene", "C", "C", "=", _n("C", "=", 2)),
    _rule("carboxyl", "C", "O C", "-=", _n("O", "="), _n("O", "-")),
    _rule("amide", "C", "O N C", "-=", _n("O", "="), _n("N", "-")),
    _rule("thioamide", "C", "S N C", "-=", _n("S", "="), _n("N", "-")),
    _rule("aldehyde", "C", "O C", "-=", _n("O", "="), center_min_h=1),
    _rule("ketone", "C", "O C", "-=", _n("O", "="), _n("C", "-", 2)),
    _rule("thione", "C", "S C", "-=", _n("S", "=")),
    _rule("hydrazone", "C", "N C", "-=", _n("N", "=", via=("N", "-"))),
    _rule("oxime", "C", "N C", "-=", _n("N", "=", via=("O", "-"))),
    _rule("imine", "C", "N C", "-=", _n("N", "=")),
    _rule("alkyne", "C", "C", "#", _n("C", "#")),
    _rule("alkene", "C", "C", "=", _n("C", "=")),
    _rule("alcohol", "C", "O", "-", _n("O", "-", min_h=1)),
    _rule("thiol", "C", "S", "-", _n("S", "-", min_h=1)),
)

SULFUR_RULES = (
    _rule("sulfate", "S", "O", "-=", _n("O", "=", 2), _n("O", "-", 2)),
    _rule("sulfonamide", "S", "O N C", "-=", _n("O", "=", 2), _n("N", "-")),
    _rule("sulfonate", "S", "O C", "-=", _n("O", "=", 2), _n("O", "-")),
    _rule("sulfone", "S", "O C", "-=", _n("O", "=", 2), _n("C", "-", 2)),
    _rule("sulfoxide", "S", "O C", "-=", _n("O", "="), _n("C", "-", 2)),
    _rule("disulfide", "S", "S C", "-", _n("S", "-")),
    _rule("thioether", "S", "C", "-", _n("C", "-", 2)),
)

PHOSPHORUS_RULES = (
    _rule("phosphodiester", "P", "O", "-=", _n("O", "="), _n("O", "-", 2)),
    _rule("phosphine_oxide", "P", "O C", "-=", _n("O", "="), _n("C", "-")),
    _rule("phosphite_ester", "P", "O", "-", _n("O", "-", 3)),
    _rule("phosphanyl", "P", "C", "-", _n("C", "-"), saturated_center=True),
)

NITROGEN_RULES = (
    _rule("nitrate", "N", "O", "-=", _n("O", "-=", 3)),
    _rule("nitro", "N", "O C", "-=", _n("O", "-=", 2), _n("C", "-")),
    _rule("n_nitroso", "N", "N", "-", _n("N", "-", via=("O", "="))),
    _rule("c_nitroso", "N", "O C", "-=", _n("O", "="), _n("C", "-")),
    _rule("azo", "N", "N C", "-=", _n("N", "="), _n("C", "-")),
    _rule("hydrazine", "N", "N", "-", _n("N", "-"), saturated_center=True),
    _rule("hydroxylamine", "N", "O", "-", _n("O", "-"), saturated_center=True),
    _rule("nitrile", "N", "C", "#", _n("C", "#")),
    _rule("amine", "N", "C", "-", _n("C", "-"), saturated_center=True),
)

OXYGEN_RULES = (
    _rule("peroxide", "O", "O C", "-", _n("O", "-")),
    _rule("ether", "O", "C", "-", _n("C", "-", 2)),
)

DEFAULT_RULES: tuple[FGRule, ...] = CARBON_RULES + SULFUR_RULES + PHOSPHORUS_RULES + NITROGEN_RULES + OXYGEN_RULES


def _neighbor_ok(g: MolGraph, center: int, j: int, order: BondOrder, spec: NeighborSpec) -> bool:
    atom = g.atoms[j]
    if atom.element not in spec.elements or order not in spec.orders:
        return False
    if atom.explicit_h < spec.min_h:
        return False
    if spec.via is not None:
        elements, orders = spec.via
        if not any(
            g.atoms[k].element in elements and g.bonds[b].order in orders
            for k, b in g.adjacency[j]
            if k != center
        ):
            return False
    return True


def rule_matches(g: MolGraph, center: int, rule: FGRule) -> bool:
    atom = g.atoms[center]
    if atom.element != rule.center or atom.in_ring:
        return False
    if atom.explicit_h < rule.center_min_h:
        return False
    bonds = [(j, g.bonds[b].order) for j, b in g.adjacency[center]]
    if rule.saturated_center and any(o is not SINGLE for _, o in bonds):
        return False
    used: set[int] = set()
    for spec in rule.pattern:
        hits = [j for j, o in bonds if j not in used and _neighbor_ok(g, center, j, o, spec)]
        if len(hits) < spec.min_count:
            return False
        used.update(hits[: spec.min_count])
    return True


def first_hop(g: MolGraph, center: int, rule: FGRule) -> list[int]:
    return sorted(
        j
        for j, b in g.adjacency[center]
        if g.atoms[j].element in rule.target_atoms and g.bonds[b].order in rule.target_bonds
    )


def second_hop(g: MolGraph, center: int, hop1: Iterable[int]) -> list[int]:
    """Atoms two bonds out, reached through a first-hop atom that is not a
    single-bonded carbon."""
    out: set[int] = set()
    for j in hop1:
        order = g.bond_between(center, j).order
        if g.atoms[j].element == "C" and order is SINGLE:
            continue
        out.update(k for k in g.neighbors(j) if k != center)
    return sorted(out)


# ---------------------------------------------------------------------------
# hyperedges
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hyperedge:
    members: frozenset[int]
    origin: str
    seed_members: frozenset[int] = field(default=frozenset())

    def __post_init__(self) -> None:
        if not self.seed_members:
            object.__setattr__(self, "seed_members", self.members)
        if not self.members:
            raise ValueError("hyperedge needs at least one member")
        if not self.seed_members <= self.members:
            raise ValueError("seed members must be a subset of members")

    def to_json(self) -> dict:
        return {"origin": self.origin, "seed": sorted(self.seed_members), "members": sorted(self.members)}


@dataclass(frozen=True)
class Hypergraph:
    edges: tuple[Hyperedge, ...]
    molecule: MolGraph

    def __len__(self) -> int:
        return len(self.edges)

    def covered(self) -> set[int]:
        return set().union(*(e.members for e in self.edges)) if self.edges else set()

    def to_json(self) -> dict:
        return {"smiles": self.molecule.source_smiles, "edges": [e.to_json() for e in self.edges]}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def match_functional_groups(g: MolGraph, rules: Iterable[FGRule] = DEFAULT_RULES) -> list[Hyperedge]:
    """Acyclic functional groups as hyperedges.

    Rules are tried in order, each over all atoms in index order. An atom is
    the centre of at most one group. A heteroatom already captured as a
    first-hop member of an earlier group is not used as a centre, and an atom
    that was a first-hop member of a rule cannot centre that same rule again
    (so symmetric groups such as alkenes or disulfides appear once).
    """
    centred: set[int] = set()
    captured_hetero: set[int] = set()
    edges: list[Hyperedge] = []
    seen_sets: set[frozenset[int]] = set()
    for rule in rules:
        captured_same: set[int] = set()
        for c in range(g.n_atoms):
            if c in centred or c in captured_hetero or c in captured_same:
                continue
            if not rule_matches(g, c, rule):
                continue
            hop1 = first_hop(g, c, rule)
            hop2 = second_hop(g, c, hop1)
            members = frozenset([c, *hop1, *hop2])
            centred.add(c)
            captured_same.update(hop1)
            captured_hetero.update(j for j in hop1 if g.atoms[j].element != "C")
            if members in seen_sets:
                continue
            seen_sets.add(members)
            edges.append(Hyperedge(members, f"functional_group:{rule.name}"))
    return edges


def k_hop_neighborhood(g: MolGraph, atoms: Iterable[int], k: int) -> frozenset[int]:
    frontier = set(atoms)
    reached = set(frontier)
    for _ in range(k):
        frontier = {j for i in frontier for j in g.neighbors(i)} - reached
        if not frontier:
            break
        reached |= frontier
    return frozenset(reached)


def extend(g: MolGraph, edge: Hyperedge, k: int) -> Hyperedge:
    if k == 0:
        return edge
    return Hyperedge(k_hop_neighborhood(g, edge.members, k), edge.origin, edge.seed_members)


def _remainder(g: MolGraph, covered: set[int]) -> list[Hyperedge]:
    out = []
    seen: set[int] = set()
    for start in range(g.n_atoms):
        if start in covered or start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            i = stack.pop()
            comp.append(i)
            for j in g.neighbors(i):
                if j not in covered and j not in seen:
                    seen.add(j)
                    stack.append(j)
        out.append(Hyperedge(frozenset(comp), "remainder"))
    return out


def build_hypergraph(
    g: MolGraph,
    k: int = 0,
    mode: str = "functional_group",
    cycles: bool = True,
    rules: Iterable[FGRule] = DEFAULT_RULES,
) -> Hypergraph:
    """Build the hypergraph of ``g``.

    In ``functional_group`` and ``ring_and_bond`` modes ``k`` is the extension
    radius (each hyperedge grows to the union of its members' ``k``-hop
    neighbourhoods, seeds kept). In ``khop`` mode ``k`` is the neighbourhood
    radius. ``cycles=False`` drops ring hyperedges in ``functional_group``
    mode; ring atoms then fall into remainder groups.
    """
    if g.n_atoms == 0:
        raise EmptyMolecule("molecule has no atoms")
    if k < 0:
        raise ValueError("k must be >= 0")
    if mode == "functional_group":
        rings = [Hyperedge(r, "cycle") for r in ring_basis(g)] if cycles else []
        groups = match_functional_groups(g, rules)
        seed = []
        seen: set[frozenset[int]] = set()
        for e in rings + groups:
            if e.members not in seen:
                seen.add(e.members)
                seed.append(e)
        covered = set().union(*(e.members for e in seed)) if seed else set()
        seed += _remainder(g, covered)
        edges = [extend(g, e, k) for e in seed]
    elif mode == "ring_and_bond":
        rings = ring_basis(g)
        edges = [Hyperedge(r, "ring_or_bond") for r in rings]
        ring_pairs = {frozenset(b.endpoints) for b in g.bonds if any(b.begin in r and b.end in r for r in rings)}
        edges += [
            Hyperedge(frozenset(b.endpoints), "ring_or_bond")
            for b in g.bonds
            if frozenset(b.endpoints) not in ring_pairs
        ]
        edges = [extend(g, e, k) for e in edges]
    elif mode == "khop":
        edges = [Hyperedge(k_hop_neighborhood(g, [i], k), "khop") for i in range(g.n_atoms)]
    else:
        raise ValueError(f"unknown hyperedge mode {mode!r}; expected one of {MODES}")
    return Hypergraph(tuple(edges), g)


def hyperedge_features(
    h: Hypergraph,
    atom_features: np.ndarray,
    z_init: str,
    width: int,
    weights: np.ndarray | None = None,
) -> np.ndarray:
    """Initial hyperedge features before the learned projection.

    ``ZERO`` gives an all-zero ``(n_edges, width)`` matrix; ``MEAN`` gives the
    (optionally weighted) mean of member atom features, ``(n_edges, atom_dim)``.
    The learned linear map to the latent width is applied by the model.
    """
    n = len(h.edges)
    if z_init == "ZERO":
        return np.zeros((n, width))
    if z_init != "MEAN":
        raise ValueError(f"unknown z_init {z_init!r}")
    out = np.zeros((n, atom_features.shape[1]))
    for k, e in enumerate(h.edges):
        idx = sorted(e.members)
        w = np.ones(len(idx)) if weights is None else np.asarray(weights[k], dtype=np.float64)
        out[k] = (w[:, None] * atom_features[idx]).sum(axis=0) / w.sum()
    return out
