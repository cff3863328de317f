"""A SMILES reader covering what ChEMBL canonical SMILES actually use.

Supported: organic-subset and bracket atoms (isotope, H count, charge, atom
class), branches, ring closures including ``%nn``, the bond symbols
``- = # :``, lowercase aromatic atoms and ``.``-separated components.
Stereo markers (``/``, ``\\``, ``@``) are accepted and dropped; the graph is
purely constitutional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import DataError

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: i + 1 for i, sym in enumerate(ELEMENTS)}

ORGANIC_SUBSET = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
AROMATIC_BRACKET = ("se", "as", "te", "b", "c", "n", "o", "p", "s")

# Allowed valences for organic-subset atoms, lowest first.
DEFAULT_VALENCE = {5: (3,), 6: (4,), 7: (3, 5), 8: (2,), 15: (3, 5), 16: (2, 4, 6),
                   9: (1,), 17: (1,), 35: (1,), 53: (1,)}

SINGLE, DOUBLE, TRIPLE, AROMATIC = 1, 2, 3, 4
BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC}
BOND_VALENCE = {SINGLE: 1.0, DOUBLE: 2.0, TRIPLE: 3.0, AROMATIC: 1.5}


class SmilesError(DataError):
    def __init__(self, message: str, smiles: str, offset: int):
        self.smiles = smiles
        # byte offset into the UTF-8 encoding, not the character index
        self.offset = len(smiles[:offset].encode("utf-8"))
        super().__init__(f"{message} at byte {self.offset} of {smiles!r}")


@dataclass(frozen=True)
class Atom:
    element: int
    charge: int = 0
    explicit_h: int = 0
    aromatic: bool = False
    in_ring: bool = False
    degree: int = 0
    implicit_h: int = 0
    isotope: int = 0
    bracket: bool = False

    @property
    def symbol(self) -> str:
        return ELEMENTS[self.element - 1]

    @property
    def total_h(self) -> int:
        return self.explicit_h + self.implicit_h


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: int
    in_ring: bool = False

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class MoleculeGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]

    def __post_init__(self):
        adj: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
        for k, b in enumerate(self.bonds):
            adj[b.begin].append((b.end, k))
            adj[b.end].append((b.begin, k))
        object.__setattr__(self, "_adj", tuple(tuple(a) for a in adj))

    @property
    def adjacency(self) -> tuple[tuple[tuple[int, int], ...], ...]:
        """Per atom, the ``(neighbor, bond_index)`` pairs."""
        return self._adj

    def neighbors(self, i: int) -> list[int]:
        return [j for j, _ in self._adj[i]]

    def __len__(self) -> int:
        return len(self.atoms)

    def bond_order_sum(self, i: int) -> float:
        return sum(BOND_VALENCE[self.bonds[k].order] for _, k in self._adj[i])


def implicit_hydrogens(atom: Atom, bond_order_sum: float) -> int:
    """Default-valence hydrogen count for an organic-subset atom.

    Aliphatic atoms take the smallest allowed valence that accommodates the
    bond order sum. Aromatic atoms only use their lowest valence. Bracket
    atoms keep their written H count.
    """
    if atom.bracket:
        return atom.explicit_h
    valences = DEFAULT_VALENCE.get(atom.element)
    if valences is None:
        return 0
    used = math.floor(bond_order_sum)
    if atom.aromatic:
        return max(0, valences[0] - used)
    for v in valences:
        if v >= used:
            return v - used
    return 0


def perceive_rings(graph: MoleculeGraph) -> MoleculeGraph:
    """Flag ring atoms and bonds: a bond is cyclic iff it is not a bridge."""
    n = len(graph.atoms)
    adj = graph.adjacency
    disc = [-1] * n
    low = [0] * n
    is_bridge = [False] * len(graph.bonds)
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        # frames: (node, bond used to reach it, iterator position)
        stack = [(root, -1, 0)]
        while stack:
            node, via, pos = stack[-1]
            if pos < len(adj[node]):
                stack[-1] = (node, via, pos + 1)
                nxt, k = adj[node][pos]
                if k == via:
                    continue
                if disc[nxt] == -1:
                    disc[nxt] = low[nxt] = timer
                    timer += 1
                    stack.append((nxt, k, 0))
                else:
                    low[node] = min(low[node], disc[nxt])
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[node])
                    if low[node] > disc[parent]:
                        is_bridge[via] = True
    bonds = tuple(replace(b, in_ring=not is_bridge[k]) for k, b in enumerate(graph.bonds))
    ring_atoms = [False] * n
    for b in bonds:
        if b.in_ring:
            ring_atoms[b.begin] = ring_atoms[b.end] = True
    atoms = tuple(replace(a, in_ring=ring_atoms[i]) for i, a in enumerate(graph.atoms))
    return MoleculeGraph(atoms, bonds)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms: list[dict] = []
        # [begin, end, order, written]; written=False marks default bonds
        self.bonds: list[list] = []
        self.bond_pairs: set[frozenset] = set()
        self.ring_closures = 0
        self.components = 0

    def error(self, message: str, offset: int | None = None) -> SmilesError:
        return SmilesError(message, self.text, self.pos if offset is None else offset)

    def add_bond(self, a: int, b: int, order: int | None, offset: int) -> None:
        if a == b:
            raise self.error("ring closure bonds an atom to itself", offset)
        pair = frozenset((a, b))
        if pair in self.bond_pairs:
            raise self.error("duplicate bond", offset)
        self.bond_pairs.add(pair)
        written = order is not None
        if order is None:
            both = self.atoms[a]["aromatic"] and self.atoms[b]["aromatic"]
            order = AROMATIC if both else SINGLE
        self.bonds.append([a, b, order, written])

    def parse(self) -> None:
        text = self.text
        if not text:
            raise self.error("empty SMILES", 0)
        prev: int | None = None
        pending: tuple[int, int] | None = None  # (order, offset)
        branches: list[tuple[int, int]] = []  # (atom, offset of '(')
        open_rings: dict[int, tuple[int, int | None, int]] = {}
        n = len(text)
        while self.pos < n:
            ch = text[self.pos]
            start = self.pos
            if ch == "[" or ch.isalpha():
                atom = self.read_bracket() if ch == "[" else self.read_organic()
                idx = len(self.atoms)
                self.atoms.append(atom)
                if prev is not None:
                    self.add_bond(prev, idx, pending[0] if pending else None, start)
                elif pending is not None:
                    raise self.error("bond symbol without a preceding atom", pending[1])
                else:
                    self.components += 1
                pending = None
                prev = idx
            elif ch in BOND_SYMBOLS:
                if pending is not None:
                    raise self.error("two consecutive bond symbols")
                pending = (BOND_SYMBOLS[ch], start)
                self.pos += 1
            elif ch in "/\\":
                self.pos += 1
            elif ch == "(":
                if prev is None:
                    raise self.error("branch without a preceding atom")
                if pending is not None:
                    raise self.error("bond symbol before branch", pending[1])
                branches.append((prev, start))
                self.pos += 1
                if self.pos < n and text[self.pos] == ")":
                    raise self.error("empty branch")
            elif ch == ")":
                if not branches:
                    raise self.error("unbalanced ')'")
                if pending is not None:
                    raise self.error("bond symbol at end of branch", pending[1])
                prev = branches.pop()[0]
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    raise self.error("ring closure without a preceding atom")
                if ch == "%":
                    digits = text[self.pos + 1:self.pos + 3]
                    if len(digits) != 2 or not digits.isdigit():
                        raise self.error("'%' must be followed by two digits")
                    num = int(digits)
                    self.pos += 3
                else:
                    num = int(ch)
                    self.pos += 1
                order = pending[0] if pending else None
                pending = None
                if num in open_rings:
                    other, other_order, _ = open_rings.pop(num)
                    if order is not None and other_order is not None and order != other_order:
                        raise self.error(f"conflicting bond orders on ring closure {num}", start)
                    self.add_bond(other, prev, order if order is not None else other_order, start)
                    self.ring_closures += 1
                else:
                    open_rings[num] = (prev, order, start)
            elif ch == ".":
                if pending is not None:
                    raise self.error("bond symbol before '.'", pending[1])
                if prev is None:
                    raise self.error("'.' without a preceding atom")
                if branches:
                    raise self.error("'.' inside a branch")
                prev = None
                self.pos += 1
            else:
                raise self.error(f"unexpected character {ch!r}")
        if pending is not None:
            raise self.error("dangling bond symbol", pending[1])
        if branches:
            raise self.error("unbalanced '('", branches[-1][1])
        if open_rings:
            num, (_, _, off) = min(open_rings.items(), key=lambda kv: kv[1][2])
            raise self.error(f"unmatched ring closure {num}", off)
        if prev is None:
            raise self.error("SMILES ends with '.'")

    def read_organic(self) -> dict:
        text = self.text
        two = text[self.pos:self.pos + 2]
        if two in ("Cl", "Br"):
            self.pos += 2
            return _atom(ATOMIC_NUMBER[two], aromatic=False, bracket=False)
        ch = text[self.pos]
        if ch in ORGANIC_SUBSET:
            self.pos += 1
            return _atom(ATOMIC_NUMBER[ch], aromatic=False, bracket=False)
        if ch in AROMATIC_ORGANIC:
            self.pos += 1
            return _atom(ATOMIC_NUMBER[ch.upper()], aromatic=True, bracket=False)
        raise self.error(f"unknown element {ch!r} outside brackets")

    def read_bracket(self) -> dict:
        text = self.text
        start = self.pos
        end = text.find("]", start)
        if end == -1:
            raise self.error("unterminated bracket atom")
        body = text[start + 1:end]
        i = 0

        def fail(msg: str):
            return self.error(msg, start + 1 + i)

        j = i
        while j < len(body) and body[j].isdigit():
            j += 1
        isotope = int(body[i:j]) if j > i else 0
        i = j
        aromatic = False
        element = None
        for sym in AROMATIC_BRACKET:
            if body.startswith(sym, i):
                element, aromatic = ATOMIC_NUMBER[sym.capitalize()], True
                i += len(sym)
                break
        if element is None:
            two, one = body[i:i + 2], body[i:i + 1]
            if len(two) == 2 and two in ATOMIC_NUMBER:
                element = ATOMIC_NUMBER[two]
                i += 2
            elif one in ATOMIC_NUMBER:
                element = ATOMIC_NUMBER[one]
                i += 1
            else:
                raise fail(f"unknown element in bracket atom [{body}]")
        if i < len(body) and body[i] == "@":
            i += 1
            if i < len(body) and body[i] == "@":
                i += 1
            elif body[i:i + 2] in ("TH", "AL", "SP", "TB", "OH"):
                i += 2
                while i < len(body) and body[i].isdigit():
                    i += 1
        hcount = 0
        if i < len(body) and body[i] == "H":
            i += 1
            hcount = 1
            if i < len(body) and body[i].isdigit():
                hcount = int(body[i])
                i += 1
        charge = 0
        if i < len(body) and body[i] in "+-":
            sign = 1 if body[i] == "+" else -1
            sym = body[i]
            i += 1
            if i < len(body) and body[i].isdigit():
                j = i
                while j < len(body) and body[j].isdigit():
                    j += 1
                charge = sign * int(body[i:j])
                i = j
            else:
                charge = sign
                while i < len(body) and body[i] == sym:
                    charge += sign
                    i += 1
            if i < len(body) and body[i] in "+-":
                raise fail("bad charge syntax")
        if i < len(body) and body[i] == ":":
            j = i + 1
            while j < len(body) and body[j].isdigit():
                j += 1
            if j == i + 1:
                raise fail("atom class needs digits")
            i = j
        if i != len(body):
            raise fail(f"unexpected {body[i]!r} in bracket atom [{body}]")
        self.pos = end + 1
        return _atom(element, aromatic=aromatic, bracket=True,
                     charge=charge, explicit_h=hcount, isotope=isotope)


def _atom(element: int, aromatic: bool, bracket: bool, **kw) -> dict:
    return dict(element=element, aromatic=aromatic, bracket=bracket, **kw)


def _components(n: int, bonds: list[list]) -> list[list[int]]:
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b, *_ in bonds:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def _largest_component(atoms: list[dict], comps: list[list[int]]) -> list[int]:
    def rank(comp):
        heavy = sum(1 for i in comp if atoms[i]["element"] != 1)
        elements = tuple(sorted(atoms[i]["element"] for i in comp))
        return (-heavy, elements)

    # min() keeps the earliest component on a full tie
    return min(comps, key=rank)


def parse_smiles(text: str, keep_largest: bool = True) -> MoleculeGraph:
    """Parse SMILES into a ring-perceived graph with implicit hydrogens.

    With ``keep_largest`` (default) a multi-component input is reduced to
    its largest component by heavy-atom count; ties go to the smallest
    sorted element list.
    """
    p = _Parser(text)
    p.parse()
    atoms, bonds = p.atoms, p.bonds
    if keep_largest and p.components > 1:
        keep = sorted(_largest_component(atoms, _components(len(atoms), bonds)))
        remap = {old: new for new, old in enumerate(keep)}
        atoms = [atoms[i] for i in keep]
        bonds = [[remap[a], remap[b], o, w] for a, b, o, w in bonds if a in remap]

    graph = MoleculeGraph(
        tuple(Atom(**a) for a in atoms),
        tuple(Bond(a, b, o) for a, b, o, _ in bonds),
    )
    graph = perceive_rings(graph)
    # A default bond between two aromatic atoms outside any ring (biphenyl
    # written without '-') is single.
    fixed = tuple(
        replace(b, order=SINGLE) if b.order == AROMATIC and not w and not b.in_ring else b
        for b, (_, _, _, w) in zip(graph.bonds, bonds)
    )
    graph = MoleculeGraph(graph.atoms, fixed)
    final = []
    for i, atom in enumerate(graph.atoms):
        degree = sum(1 for j in graph.neighbors(i) if graph.atoms[j].element != 1)
        atom = replace(atom, degree=degree)
        final.append(replace(atom, implicit_h=0 if atom.bracket
                             else implicit_hydrogens(atom, graph.bond_order_sum(i))))
    return MoleculeGraph(tuple(final), graph.bonds)


def parse_stats(text: str) -> tuple[int, int, int, int]:
    """``(atoms, bonds, components, ring_closures)`` of the raw parse, before
    any component filtering."""
    p = _Parser(text)
    p.parse()
    return len(p.atoms), len(p.bonds), p.components, p.ring_closures
