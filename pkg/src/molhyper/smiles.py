"""SMILES parsing into an implicit-hydrogen molecular graph.

Supported grammar: organic-subset atoms (``B C N O P S F Cl Br I`` and the
aromatic ``b c n o p s``), bracket atoms with isotope (discarded), ``@``/``@@``
chirality, hydrogen count and charge, branches, ring closures (including
``%nn``), bond symbols ``- = # :`` and ``/ \\`` (stereo, read as single), and
the ``.`` fragment separator.

Hydrogens are never materialized as nodes; each atom carries a total hydrogen
count instead.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I")
AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}

# lowest valence first; implicit H fills up to the first valence >= bond sum
DEFAULT_VALENCE = {
    "B": (3,),
    "C": (4,),
    "N": (3, 5),
    "O": (2,),
    "P": (3, 5),
    "S": (2, 4, 6),
    "F": (1,),
    "Cl": (1,),
    "Br": (1,),
    "I": (1,),
}

MAX_ABS_CHARGE = 7


class SmilesError(ValueError):
    """Base class for parse failures; ``offset`` is the byte offset in the input."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset
        self.reason = message


class EmptyInput(SmilesError):
    pass


class UnbalancedRing(SmilesError):
    pass


class UnbalancedBranch(SmilesError):
    pass


class UnknownElement(SmilesError):
    pass


class InvalidCharge(SmilesError):
    pass


class SmilesSyntaxError(SmilesError):
    pass


class BondOrder(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"

    @property
    def valence(self) -> float:
        return _BOND_VALENCE[self]


_BOND_VALENCE = {
    BondOrder.SINGLE: 1.0,
    BondOrder.DOUBLE: 2.0,
    BondOrder.TRIPLE: 3.0,
    BondOrder.AROMATIC: 1.5,
}
_BOND_SYMBOLS = {"-": BondOrder.SINGLE, "=": BondOrder.DOUBLE, "#": BondOrder.TRIPLE, ":": BondOrder.AROMATIC}


class Chirality(enum.Enum):
    NONE = "none"
    CLOCKWISE = "clockwise"  # '@@'
    COUNTERCLOCKWISE = "counterclockwise"  # '@'


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h: int = 0
    aromatic: bool = False
    in_ring: bool = False
    chirality_tag: Chirality = Chirality.NONE
    degree: int = 0
    bracket: bool = False
    offset: int = 0


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder
    in_ring: bool = False
    conjugated: bool = False

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source_smiles: str = ""
    adjacency: tuple[tuple[tuple[int, int], ...], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        if not self.adjacency or len(self.adjacency) != len(self.atoms):
            adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
            for b_idx, bond in enumerate(self.bonds):
                adj[bond.begin].append((bond.end, b_idx))
                adj[bond.end].append((bond.begin, b_idx))
            object.__setattr__(self, "adjacency", tuple(tuple(a) for a in adj))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self.adjacency[i]]

    def bond_between(self, i: int, j: int) -> Bond | None:
        for k, b in self.adjacency[i]:
            if k == j:
                return self.bonds[b]
        return None

    def components(self) -> list[list[int]]:
        seen = [False] * self.n_atoms
        comps = []
        for start in range(self.n_atoms):
            if seen[start]:
                continue
            stack, comp = [start], []
            seen[start] = True
            while stack:
                i = stack.pop()
                comp.append(i)
                for j, _ in self.adjacency[i]:
                    if not seen[j]:
                        seen[j] = True
                        stack.append(j)
            comps.append(sorted(comp))
        return comps

    def bond_valence(self, i: int) -> float:
        return sum(self.bonds[b].order.valence for _, b in self.adjacency[i])


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


@dataclass
class _PendingAtom:
    element: str
    aromatic: bool
    bracket: bool
    offset: int
    charge: int = 0
    hcount: int | None = None
    chirality: Chirality = Chirality.NONE


@dataclass
class _PendingBond:
    begin: int
    end: int
    order: BondOrder
    implicit: bool  # no bond symbol written; order inferred from aromaticity


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0
        self.atoms: list[_PendingAtom] = []
        self.bonds: list[_PendingBond] = []
        self.pairs: set[frozenset[int]] = set()
        # ring digit -> (atom index, bond symbol or None, offset of the digit)
        self.open_rings: dict[int, tuple[int, BondOrder | None, int]] = {}

    def peek(self, k: int = 0) -> str:
        p = self.pos + k
        return self.text[p] if p < len(self.text) else ""

    def parse(self) -> tuple[list[_PendingAtom], list[_PendingBond]]:
        text = self.text
        prev: int | None = None
        pending_bond: BondOrder | None = None
        bond_offset = 0
        branch_stack: list[tuple[int | None, int]] = []
        after_dot = False

        while self.pos < len(text):
            ch = text[self.pos]
            start = self.pos
            if ch == "(":
                if prev is None:
                    raise UnbalancedBranch("branch opened without a preceding atom", start)
                if pending_bond is not None:
                    raise SmilesSyntaxError("bond symbol before '('", bond_offset)
                if self.peek(1) == ")":
                    raise SmilesSyntaxError("empty branch", start)
                branch_stack.append((prev, start))
                self.pos += 1
            elif ch == ")":
                if not branch_stack:
                    raise UnbalancedBranch("')' without matching '('", start)
                if pending_bond is not None:
                    raise SmilesSyntaxError("dangling bond before ')'", bond_offset)
                prev, _ = branch_stack.pop()
                self.pos += 1
            elif ch in _BOND_SYMBOLS or ch in "/\\":
                if pending_bond is not None:
                    raise SmilesSyntaxError("two consecutive bond symbols", start)
                if prev is None:
                    raise SmilesSyntaxError("bond symbol without a preceding atom", start)
                pending_bond = _BOND_SYMBOLS.get(ch, BondOrder.SINGLE)
                bond_offset = start
                self.pos += 1
            elif ch == ".":
                if prev is None or after_dot:
                    raise SmilesSyntaxError("'.' without a preceding fragment", start)
                if pending_bond is not None:
                    raise SmilesSyntaxError("dangling bond before '.'", bond_offset)
                if branch_stack:
                    raise UnbalancedBranch("'.' inside an open branch", branch_stack[-1][1])
                prev = None
                after_dot = True
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    raise SmilesSyntaxError("ring closure without a preceding atom", start)
                digit = self._ring_number()
                self._ring_closure(prev, digit, pending_bond, start)
                pending_bond = None
            else:
                idx = self._atom()
                after_dot = False
                if prev is not None:
                    order = pending_bond
                    self._add_bond(prev, idx, order, start)
                pending_bond = None
                prev = idx

        if pending_bond is not None:
            raise SmilesSyntaxError("dangling bond at end of input", bond_offset)
        if after_dot:
            raise SmilesSyntaxError("trailing '.'", len(text) - 1)
        if branch_stack:
            raise UnbalancedBranch("unclosed branch", branch_stack[-1][1])
        if self.open_rings:
            digit, (_, _, off) = min(self.open_rings.items(), key=lambda kv: kv[1][2])
            raise UnbalancedRing(f"ring bond {digit} never closed", off)
        if not self.atoms:
            raise SmilesSyntaxError("no atoms", 0)
        return self.atoms, self.bonds

    def _ring_number(self) -> int:
        if self.text[self.pos] == "%":
            digits = self.text[self.pos + 1 : self.pos + 3]
            if len(digits) != 2 or not digits.isdigit():
                raise SmilesSyntaxError("'%' must be followed by two digits", self.pos)
            self.pos += 3
            return int(digits)
        d = int(self.text[self.pos])
        self.pos += 1
        return d

    def _ring_closure(self, atom: int, digit: int, order: BondOrder | None, offset: int) -> None:
        if digit not in self.open_rings:
            self.open_rings[digit] = (atom, order, offset)
            return
        other, other_order, _ = self.open_rings.pop(digit)
        if other == atom:
            raise SmilesSyntaxError("ring closure bonds an atom to itself", offset)
        if order is not None and other_order is not None and order != other_order:
            raise SmilesSyntaxError("conflicting ring-closure bond orders", offset)
        self._add_bond(other, atom, order if order is not None else other_order, offset)

    def _add_bond(self, a: int, b: int, order: BondOrder | None, offset: int) -> None:
        key = frozenset((a, b))
        if key in self.pairs:
            raise SmilesSyntaxError("duplicate bond between the same atoms", offset)
        self.pairs.add(key)
        implicit = order is None
        if implicit:
            both_aromatic = self.atoms[a].aromatic and self.atoms[b].aromatic
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
        self.bonds.append(_PendingBond(a, b, order, implicit))

    def _atom(self) -> int:
        ch = self.text[self.pos]
        start = self.pos
        if ch == "[":
            atom = self._bracket_atom()
        elif ch in AROMATIC_SYMBOLS:
            atom = _PendingAtom(AROMATIC_SYMBOLS[ch], True, False, start)
            self.pos += 1
        elif ch.isalpha() and ch.isupper() or ch == "*":
            two = self.text[self.pos : self.pos + 2]
            if two in ("Cl", "Br"):
                atom = _PendingAtom(two, False, False, start)
                self.pos += 2
            elif ch in ELEMENTS:
                atom = _PendingAtom(ch, False, False, start)
                self.pos += 1
            else:
                raise UnknownElement(f"unsupported element {ch!r}", start)
        else:
            raise SmilesSyntaxError(f"unexpected character {ch!r}", start)
        self.atoms.append(atom)
        return len(self.atoms) - 1

    def _bracket_atom(self) -> _PendingAtom:
        start = self.pos
        self.pos += 1
        while self.peek().isdigit():  # isotope, discarded
            self.pos += 1
        sym_start = self.pos
        ch = self.peek()
        if not ch.isalpha() and ch != "*":
            raise SmilesSyntaxError("bracket atom without element symbol", sym_start)
        nxt = self.peek(1)
        if ch.isupper():
            symbol = ch + nxt if nxt.islower() and nxt.isalpha() else ch
            # 'C' followed by a lowercase letter is still one symbol ('Cl', 'Co', 'Cs', ...)
            aromatic = False
        elif ch.islower():
            symbol = ch + nxt if nxt.islower() and nxt.isalpha() and ch + nxt in ("se", "as", "te") else ch
            aromatic = True
        else:
            symbol, aromatic = ch, False
        self.pos += len(symbol)
        if aromatic:
            if symbol not in AROMATIC_SYMBOLS:
                raise UnknownElement(f"unsupported aromatic element {symbol!r}", sym_start)
            element = AROMATIC_SYMBOLS[symbol]
        else:
            if symbol not in ELEMENTS:
                raise UnknownElement(f"unsupported element {symbol!r}", sym_start)
            element = symbol

        chirality = Chirality.NONE
        if self.peek() == "@":
            if self.peek(1) == "@":
                chirality = Chirality.CLOCKWISE
                self.pos += 2
            else:
                chirality = Chirality.COUNTERCLOCKWISE
                self.pos += 1
            if self.peek().isalpha() and self.peek() != "H":
                raise SmilesSyntaxError("extended chirality classes are not supported", self.pos)

        hcount = 0
        if self.peek() == "H":
            self.pos += 1
            if self.peek().isdigit():
                hcount = int(self.peek())
                self.pos += 1
            else:
                hcount = 1

        charge = 0
        if self.peek() in ("+", "-"):
            charge_start = self.pos
            sign_ch = self.peek()
            sign = 1 if sign_ch == "+" else -1
            self.pos += 1
            if self.peek().isdigit():
                digits = ""
                while self.peek().isdigit():
                    digits += self.peek()
                    self.pos += 1
                charge = sign * int(digits)
            else:
                charge = sign
                while self.peek() == sign_ch:
                    charge += sign
                    self.pos += 1
            if self.peek() in ("+", "-"):
                raise InvalidCharge("mixed charge signs", charge_start)
            if abs(charge) > MAX_ABS_CHARGE:
                raise InvalidCharge(f"charge {charge:+d} out of range", charge_start)

        if self.peek() == ":":  # atom class, discarded
            self.pos += 1
            if not self.peek().isdigit():
                raise SmilesSyntaxError("atom class requires digits", self.pos)
            while self.peek().isdigit():
                self.pos += 1

        if self.peek() != "]":
            if self.peek() == "":
                raise SmilesSyntaxError("unterminated bracket atom", start)
            raise SmilesSyntaxError(f"unexpected {self.peek()!r} in bracket atom", self.pos)
        self.pos += 1
        return _PendingAtom(element, aromatic, True, start, charge, hcount, chirality)


def _implicit_hydrogens(element: str, aromatic: bool, bond_sum: float, n_aromatic: int) -> int:
    valences = DEFAULT_VALENCE[element]
    if aromatic:
        # one valence unit goes to the delocalized pi system
        used = bond_sum - 0.5 * n_aromatic + (1 if n_aromatic else 0)
        return max(0, valences[0] - int(round(used)))
    used = int(round(bond_sum))
    for v in valences:
        if v >= used:
            return v - used
    return 0


def parse_smiles(text: str) -> MolGraph:
    """Parse ``text`` into a ring-perceived :class:`MolGraph`.

    Raises a :class:`SmilesError` subclass carrying the byte offset of the
    offending character.
    """
    if not isinstance(text, str) or text == "":
        raise EmptyInput("empty SMILES", 0)
    for i, ch in enumerate(text):
        if ord(ch) > 127 or ch.isspace():
            raise SmilesSyntaxError(f"unexpected character {ch!r}", i)

    pending_atoms, pending_bonds = _Parser(text).parse()

    degree = [0] * len(pending_atoms)
    for b in pending_bonds:
        degree[b.begin] += 1
        degree[b.end] += 1
    bonds = tuple(Bond(b.begin, b.end, b.order) for b in pending_bonds)
    atoms = tuple(
        Atom(
            element=a.element,
            formal_charge=a.charge,
            explicit_h=a.hcount or 0,
            aromatic=a.aromatic,
            chirality_tag=a.chirality,
            degree=degree[i],
            bracket=a.bracket,
            offset=a.offset,
        )
        for i, a in enumerate(pending_atoms)
    )
    graph = perceive_rings(MolGraph(atoms, bonds, text))

    # implicit aromatic bonds that ended up outside rings (e.g. biaryl links) are single
    fixed = []
    changed = False
    for pb, bond in zip(pending_bonds, graph.bonds):
        if pb.implicit and bond.order is BondOrder.AROMATIC and not bond.in_ring:
            bond = replace(bond, order=BondOrder.SINGLE)
            changed = True
        fixed.append(bond)
    if changed:
        graph = MolGraph(graph.atoms, tuple(fixed), text)

    for atom in graph.atoms:
        if atom.aromatic and not atom.in_ring:
            raise SmilesSyntaxError("aromatic atom outside any ring", atom.offset)

    final_atoms = []
    for i, atom in enumerate(graph.atoms):
        if not atom.bracket:
            n_arom = sum(1 for _, b in graph.adjacency[i] if graph.bonds[b].order is BondOrder.AROMATIC)
            h = _implicit_hydrogens(atom.element, atom.aromatic, graph.bond_valence(i), n_arom)
            atom = replace(atom, explicit_h=h)
        final_atoms.append(atom)
    graph = MolGraph(tuple(final_atoms), graph.bonds, text)
    return _with_conjugation(graph)


def perceive_rings(g: MolGraph) -> MolGraph:
    """Set ``in_ring`` on atoms and bonds from the smallest set of smallest rings."""
    from .funcgroups import ring_basis

    rings = ring_basis(g)
    ring_atoms = set().union(*rings) if rings else set()
    atoms = tuple(replace(a, in_ring=i in ring_atoms) for i, a in enumerate(g.atoms))
    # a bond lies on a cycle iff some basis ring holds both of its endpoints
    bonds = tuple(
        replace(b, in_ring=any(b.begin in r and b.end in r for r in rings)) for b in g.bonds
    )
    return MolGraph(atoms, bonds, g.source_smiles)


def _with_conjugation(g: MolGraph) -> MolGraph:
    """Aromatic bonds; single bonds between two atoms that each carry a double or
    aromatic bond; multiple bonds touching another multiple bond or one of those
    conjugated single bonds."""
    multiple = (BondOrder.DOUBLE, BondOrder.TRIPLE, BondOrder.AROMATIC)
    sp2 = (BondOrder.DOUBLE, BondOrder.AROMATIC)

    def carries(atom: int, exclude: int, orders) -> bool:
        return any(g.bonds[b].order in orders for _, b in g.adjacency[atom] if b != exclude)

    conj = [False] * g.n_bonds
    for idx, bond in enumerate(g.bonds):
        if bond.order is BondOrder.AROMATIC:
            conj[idx] = True
        elif bond.order is BondOrder.SINGLE:
            conj[idx] = carries(bond.begin, idx, sp2) and carries(bond.end, idx, sp2)
    for idx, bond in enumerate(g.bonds):
        if bond.order in (BondOrder.DOUBLE, BondOrder.TRIPLE):
            conj[idx] = any(
                b != idx and (g.bonds[b].order in multiple or conj[b])
                for a in bond.endpoints
                for _, b in g.adjacency[a]
            )
    bonds = tuple(replace(bond, conjugated=c) for bond, c in zip(g.bonds, conj))
    return MolGraph(g.atoms, bonds, g.source_smiles)


# ---------------------------------------------------------------------------
# debug serialization
# ---------------------------------------------------------------------------


def dump(g: MolGraph) -> str:
    """Line-oriented text dump, one atom or bond per line."""
    lines = [f"smiles {g.source_smiles}"]
    for i, a in enumerate(g.atoms):
        lines.append(
            f"atom {i} {a.element} charge={a.formal_charge} h={a.explicit_h} "
            f"aromatic={int(a.aromatic)} ring={int(a.in_ring)} "
            f"chirality={a.chirality_tag.value} degree={a.degree}"
        )
    for i, b in enumerate(g.bonds):
        lines.append(
            f"bond {i} {b.begin} {b.end} {b.order.value} ring={int(b.in_ring)} conjugated={int(b.conjugated)}"
        )
    return "\n".join(lines) + "\n"


_ORDER_SYMBOL = {BondOrder.SINGLE: "-", BondOrder.DOUBLE: "=", BondOrder.TRIPLE: "#", BondOrder.AROMATIC: ":"}


def to_smiles(g: MolGraph) -> str:
    """Emit a (non-canonical) SMILES that re-parses to an isomorphic graph.

    Every atom is written in bracket form with its hydrogen count, and every
    bond symbol is explicit, so no valence inference happens on re-parse.
    """

    def atom_text(a: Atom) -> str:
        sym = a.element.lower() if a.aromatic else a.element
        chir = {Chirality.NONE: "", Chirality.CLOCKWISE: "@@", Chirality.COUNTERCLOCKWISE: "@"}[a.chirality_tag]
        h = "" if a.explicit_h == 0 else ("H" if a.explicit_h == 1 else f"H{a.explicit_h}")
        q = a.formal_charge
        charge = "" if q == 0 else (("+" if q > 0 else "-") + (str(abs(q)) if abs(q) > 1 else ""))
        return f"[{sym}{chir}{h}{charge}]"

    visited = [False] * g.n_atoms
    parent_bond: dict[int, int] = {}
    ring_labels: dict[int, list[tuple[int, int]]] = {}  # atom -> [(label, bond)]
    next_label = [1]
    tree_bonds: set[int] = set()

    # first pass: find ring-closure bonds via DFS
    for root in range(g.n_atoms):
        if visited[root]:
            continue
        stack = [(root, -1)]
        order: list[int] = []
        while stack:
            i, via = stack.pop()
            if visited[i]:
                continue
            visited[i] = True
            order.append(i)
            if via >= 0:
                tree_bonds.add(via)
                parent_bond[i] = via
            for j, b in reversed(g.adjacency[i]):
                if not visited[j]:
                    stack.append((j, b))
    closures = [b for b in range(g.n_bonds) if b not in tree_bonds]
    for b in closures:
        label = next_label[0]
        next_label[0] += 1
        bond = g.bonds[b]
        ring_labels.setdefault(bond.begin, []).append((label, b))
        ring_labels.setdefault(bond.end, []).append((label, b))

    def label_text(label: int) -> str:
        return str(label) if label < 10 else f"%{label:02d}"

    out: list[str] = []
    emitted = [False] * g.n_atoms
    opened: set[int] = set()

    def emit(i: int) -> None:
        emitted[i] = True
        out.append(atom_text(g.atoms[i]))
        for label, b in ring_labels.get(i, []):
            if b in opened:
                out.append(label_text(label))
            else:
                opened.add(b)
                out.append(_ORDER_SYMBOL[g.bonds[b].order] + label_text(label))
        children = [(j, b) for j, b in g.adjacency[i] if b in tree_bonds and not emitted[j] and parent_bond.get(j) == b]
        for n, (j, b) in enumerate(children):
            last = n == len(children) - 1
            if not last:
                out.append("(")
            out.append(_ORDER_SYMBOL[g.bonds[b].order])
            emit(j)
            if not last:
                out.append(")")

    fragments = []
    for root in range(g.n_atoms):
        if not emitted[root]:
            out = []
            emit(root)
            fragments.append("".join(out))
    return ".".join(fragments)
