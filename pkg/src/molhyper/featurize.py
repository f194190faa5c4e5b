"""Initial atom (100-wide) and bond (7-wide) feature vectors."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .smiles import BondOrder, Chirality, MolGraph

# 43-slot element vocabulary of the common GNN atom featurizer; only the
# supported subset can actually occur.
ATOM_TYPES = (
    "C", "N", "O", "S", "F", "Si", "P", "Cl", "Br", "Mg", "Na", "Ca", "Fe", "As", "Al", "I", "B", "V",
    "K", "Tl", "Yb", "Sb", "Sn", "Ag", "Pd", "Co", "Se", "Ti", "Zn", "H", "Li", "Ge", "Cu", "Au", "Ni",
    "Cd", "In", "Mn", "Zr", "Cr", "Pt", "Hg", "Pb",
)  # fmt: skip

ATOMIC_NUMBER = {"B": 5, "C": 6, "N": 7, "O": 8, "F": 9, "P": 15, "S": 16, "Cl": 17, "Br": 35, "I": 53}
ATOMIC_MASS = {
    "B": 10.811, "C": 12.011, "N": 14.007, "O": 15.999, "F": 18.998,
    "P": 30.974, "S": 32.065, "Cl": 35.453, "Br": 79.904, "I": 126.904,
}  # fmt: skip

DEGREES = tuple(range(11))
EXPLICIT_VALENCES = tuple(range(1, 7))
IMPLICIT_VALENCES = tuple(range(7))
TOTAL_H = tuple(range(5))
FORMAL_CHARGES = (-2, -1, 0, 1, 2)
HYBRIDIZATIONS = ("sp", "sp2", "sp3", "sp3d", "other")
RADICALS = tuple(range(5))
CHIRAL_TAGS = ("unspecified", "clockwise", "counterclockwise", "other")
BOND_TYPES = (BondOrder.SINGLE, BondOrder.DOUBLE, BondOrder.TRIPLE, BondOrder.AROMATIC)


@dataclass(frozen=True)
class FeatureSchema:
    atom_feature_blocks: tuple[tuple[str, int], ...]
    bond_feature_blocks: tuple[tuple[str, int], ...]

    @property
    def atom_dim(self) -> int:
        return sum(w for _, w in self.atom_feature_blocks)

    @property
    def bond_dim(self) -> int:
        return sum(w for _, w in self.bond_feature_blocks)

    def atom_slice(self, name: str) -> slice:
        return _block_slice(self.atom_feature_blocks, name)

    def bond_slice(self, name: str) -> slice:
        return _block_slice(self.bond_feature_blocks, name)

    def to_json(self) -> str:
        return json.dumps(
            {
                "atom_feature_blocks": [list(b) for b in self.atom_feature_blocks],
                "bond_feature_blocks": [list(b) for b in self.bond_feature_blocks],
                "atom_dim": self.atom_dim,
                "bond_dim": self.bond_dim,
            },
            sort_keys=True,
        )


def _block_slice(blocks, name: str) -> slice:
    start = 0
    for n, w in blocks:
        if n == name:
            return slice(start, start + w)
        start += w
    raise KeyError(name)


SCHEMA = FeatureSchema(
    atom_feature_blocks=(
        ("atom_type", 43),
        ("atomic_number", 1),
        ("atom_mass", 1),
        ("degree", 11),
        ("explicit_valence", 6),
        ("implicit_valence", 7),
        ("total_num_h", 5),
        ("formal_charge", 5),
        ("hybridization", 5),
        ("num_radical_electrons", 5),
        ("is_aromatic", 2),
        ("is_in_ring", 2),
        ("chiral_tag", 4),
        ("chirality_type", 2),
        ("is_chiral_center", 1),
    ),
    bond_feature_blocks=(
        ("bond_type", 4),
        ("is_in_ring", 1),
        ("is_conjugated", 2),
    ),
)

ONE_HOT_ATOM_BLOCKS = tuple(n for n, w in SCHEMA.atom_feature_blocks if w > 1)


def _one_hot(value, choices) -> list[float]:
    out = [0.0] * len(choices)
    try:
        out[choices.index(value)] = 1.0
    except ValueError:
        out[-1] = 1.0
    return out


def hybridization(g: MolGraph, i: int) -> str:
    orders = [g.bonds[b].order for _, b in g.adjacency[i]]
    n_double = orders.count(BondOrder.DOUBLE)
    if BondOrder.TRIPLE in orders or n_double >= 2:
        return "sp"
    if n_double or BondOrder.AROMATIC in orders:
        return "sp2"
    steric = len(orders) + g.atoms[i].explicit_h
    if steric == 0:
        return "other"
    if steric >= 5:
        return "sp3d"
    return "sp3"


def valences(g: MolGraph, i: int) -> tuple[int, int]:
    """(explicit, implicit) valence: bracket hydrogens count as explicit."""
    atom = g.atoms[i]
    bonded = int(round(g.bond_valence(i)))
    if atom.bracket:
        return bonded + atom.explicit_h, 0
    return bonded, atom.explicit_h


def atom_features(g: MolGraph, i: int) -> np.ndarray:
    atom = g.atoms[i]
    explicit_v, implicit_v = valences(g, i)
    chiral = atom.chirality_tag is not Chirality.NONE
    tag = {
        Chirality.NONE: "unspecified",
        Chirality.CLOCKWISE: "clockwise",
        Chirality.COUNTERCLOCKWISE: "counterclockwise",
    }[atom.chirality_tag]
    feats = (
        _one_hot(atom.element, ATOM_TYPES)
        + [ATOMIC_NUMBER[atom.element] / 100.0]
        + [ATOMIC_MASS[atom.element] / 100.0]
        + _one_hot(atom.degree, DEGREES)
        + _one_hot(explicit_v, EXPLICIT_VALENCES)
        + _one_hot(implicit_v, IMPLICIT_VALENCES)
        + _one_hot(atom.explicit_h, TOTAL_H)
        + _one_hot(atom.formal_charge, FORMAL_CHARGES)
        + _one_hot(hybridization(g, i), HYBRIDIZATIONS)
        + _one_hot(0, RADICALS)
        + _one_hot(atom.aromatic, (False, True))
        + _one_hot(atom.in_ring, (False, True))
        + _one_hot(tag, CHIRAL_TAGS)
        # no CIP perception: '@@' takes the first slot, everything else the last
        + _one_hot(atom.chirality_tag is Chirality.CLOCKWISE, (True, False))
        + [1.0 if chiral else 0.0]
    )
    return np.asarray(feats, dtype=np.float64)


def bond_features(g: MolGraph, b: int) -> np.ndarray:
    bond = g.bonds[b]
    feats = (
        _one_hot(bond.order, BOND_TYPES)
        + [1.0 if bond.in_ring else 0.0]
        + _one_hot(bond.conjugated, (False, True))
    )
    return np.asarray(feats, dtype=np.float64)


def atom_feature_matrix(g: MolGraph) -> np.ndarray:
    if g.n_atoms == 0:
        return np.zeros((0, SCHEMA.atom_dim))
    return np.stack([atom_features(g, i) for i in range(g.n_atoms)])


def bond_feature_matrix(g: MolGraph) -> np.ndarray:
    if g.n_bonds == 0:
        return np.zeros((0, SCHEMA.bond_dim))
    return np.stack([bond_features(g, b) for b in range(g.n_bonds)])
