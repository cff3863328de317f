"""Hashed Morgan (ECFP) fingerprints and Tanimoto similarity.

Identifiers use 32-bit FNV-1a over little-endian integer encodings, so bits
are stable across platforms but deliberately not bit-compatible with other
toolkits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError
from .hashing import fnv1a32, pack_ints32, pack_uints32
from .smiles import MoleculeGraph

DEFAULT_RADIUS = 2
DEFAULT_NBITS = 2048


@dataclass(frozen=True, eq=False)
class Fingerprint:
    bits: np.ndarray  # bool, shape (nbits,)
    radius: int = DEFAULT_RADIUS

    @property
    def nbits(self) -> int:
        return int(self.bits.shape[0])

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def on_bits(self) -> list[int]:
        return np.flatnonzero(self.bits).tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.radius == other.radius and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.radius, self.bits.tobytes()))


def atom_invariant(graph: MoleculeGraph, atom_index: int) -> int:
    a = graph.atoms[atom_index]
    return fnv1a32(pack_ints32(
        (a.element, a.degree, a.total_h, a.charge, int(a.in_ring), int(a.aromatic))
    ))


def environment_ids(graph: MoleculeGraph, radius: int) -> list[set[int]]:
    """Identifiers kept at each radius 0..radius after duplicate removal.

    An environment is dropped when its atom set already appeared at a lower
    radius; among atoms sharing an atom set at the same radius the lowest
    identifier survives.
    """
    n = len(graph.atoms)
    if n == 0:
        raise DataError("cannot fingerprint an empty molecule")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    ids = [atom_invariant(graph, i) for i in range(n)]
    cover = [1 << i for i in range(n)]  # atom sets as bitmasks
    seen_sets: set[int] = set()
    kept: list[set[int]] = []

    def select(ids, cover):
        best: dict[int, int] = {}
        for ident, atoms in zip(ids, cover):
            if atoms in seen_sets:
                continue
            if atoms not in best or ident < best[atoms]:
                best[atoms] = ident
        seen_sets.update(best)
        return set(best.values())

    kept.append(select(ids, cover))
    adj = graph.adjacency
    bonds = graph.bonds
    for r in range(1, radius + 1):
        new_ids = []
        new_cover = []
        for i in range(n):
            nbrs = sorted((bonds[k].order, ids[j]) for j, k in adj[i])
            flat = [r, ids[i]]
            for order, ident in nbrs:
                flat.extend((order, ident))
            new_ids.append(fnv1a32(pack_uints32(flat)))
            mask = cover[i]
            for j, _ in adj[i]:
                mask |= cover[j]
            new_cover.append(mask)
        ids, cover = new_ids, new_cover
        kept.append(select(ids, cover))
    return kept


def ecfp(graph: MoleculeGraph, radius: int = DEFAULT_RADIUS,
         nbits: int = DEFAULT_NBITS) -> Fingerprint:
    if nbits < 64 or nbits & (nbits - 1):
        raise ValueError(f"nbits must be a power of two >= 64, got {nbits}")
    bits = np.zeros(nbits, dtype=bool)
    for level in environment_ids(graph, radius):
        for ident in level:
            bits[ident % nbits] = True
    return Fingerprint(bits, radius)


def fingerprint_matrix(graphs: Sequence[MoleculeGraph], radius: int = DEFAULT_RADIUS,
                       nbits: int = DEFAULT_NBITS) -> np.ndarray:
    """Stack fingerprints as a float32 0/1 matrix, one row per graph."""
    out = np.zeros((len(graphs), nbits), dtype=np.float32)
    for row, g in enumerate(graphs):
        out[row] = ecfp(g, radius, nbits).bits
    return out


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.nbits != b.nbits:
        raise ValueError(f"fingerprint widths differ: {a.nbits} vs {b.nbits}")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a.bits & b.bits)) / union
