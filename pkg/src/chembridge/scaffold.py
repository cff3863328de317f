"""Bemis-Murcko scaffolds, scaffold keys and scaffold-disjoint splits."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, replace
from typing import Sequence

from .errors import SplitError
from .hashing import Xoshiro256, fnv1a64, pack_uints64
from .smiles import MoleculeGraph

log = logging.getLogger(__name__)

EMPTY_KEY = "0" * 16


@dataclass(frozen=True, order=True)
class ScaffoldKey:
    key: str
    empty: bool = False


EMPTY_SCAFFOLD = ScaffoldKey(EMPTY_KEY, True)


@dataclass(frozen=True)
class SplitAssignment:
    train_indices: tuple[int, ...]
    test_indices: tuple[int, ...]
    seed: int
    test_fraction: float


def murcko_scaffold(graph: MoleculeGraph) -> MoleculeGraph:
    """Strip side chains: repeatedly delete non-ring atoms with at most one
    remaining heavy neighbor. Bond orders of removed atoms are not
    considered, so exocyclic ``=O`` goes too."""
    n = len(graph.atoms)
    alive = [graph.atoms[i].element != 1 for i in range(n)]
    deg = [sum(1 for j in graph.neighbors(i) if alive[j]) if alive[i] else 0 for i in range(n)]
    queue = [i for i in range(n) if alive[i] and not graph.atoms[i].in_ring and deg[i] <= 1]
    while queue:
        i = queue.pop()
        if not alive[i]:
            continue
        alive[i] = False
        for j in graph.neighbors(i):
            if alive[j]:
                deg[j] -= 1
                if not graph.atoms[j].in_ring and deg[j] <= 1:
                    queue.append(j)
    keep = [i for i in range(n) if alive[i]]
    remap = {old: new for new, old in enumerate(keep)}
    bonds = tuple(
        replace(b, begin=remap[b.begin], end=remap[b.end])
        for b in graph.bonds if b.begin in remap and b.end in remap
    )
    atoms = tuple(replace(graph.atoms[i], degree=deg[i]) for i in keep)
    return MoleculeGraph(atoms, bonds)


def _refine(own: int, neighbor_labels: list[int]) -> int:
    # refinement rounds dominate runtime, so they use a C-backed hash
    digest = hashlib.blake2b(pack_uints64([own, *neighbor_labels]), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def scaffold_key(graph: MoleculeGraph) -> ScaffoldKey:
    """Weisfeiler-Lehman hash of a scaffold graph.

    Isomorphic graphs always get the same key; distinct keys prove the
    graphs differ, but equal keys do not prove isomorphism.
    """
    n = len(graph.atoms)
    if n == 0:
        return EMPTY_SCAFFOLD
    labels = [
        fnv1a64(pack_uints64((a.element, int(a.in_ring), int(a.aromatic), a.degree)))
        for a in graph.atoms
    ]
    adj = graph.adjacency
    for _ in range(2 * n):
        labels = [_refine(labels[i], sorted(labels[j] for j, _ in adj[i])) for i in range(n)]
    edges = sorted(
        (*sorted((labels[b.begin], labels[b.end])), b.order) for b in graph.bonds
    )
    flat = sorted(labels)
    for e in edges:
        flat.extend(e)
    h = fnv1a64(pack_uints64([n, len(edges), *flat]))
    if h == 0:
        h = 1  # keep the all-zero key reserved for acyclic molecules
    return ScaffoldKey(f"{h:016x}", False)


def scaffold_split(keys: Sequence[ScaffoldKey], test_fraction: float = 0.2,
                   seed: int = 0) -> SplitAssignment:
    """Greedy scaffold split.

    Groups are walked largest first (equal sizes ordered by key, then
    shuffled with ``seed``); a group joins the test side when it fits under
    ``test_fraction * N``. The acyclic (empty-scaffold) group always stays
    in train. If nothing fits, the smallest eligible group becomes the test
    set so both sides are non-empty.
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups: dict[ScaffoldKey, list[int]] = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)
    if len(groups) < 2:
        raise SplitError("all records share one scaffold; no scaffold split possible")
    n = len(keys)
    target = test_fraction * n
    rng = Xoshiro256(seed)
    by_size: dict[int, list[ScaffoldKey]] = {}
    for k, members in groups.items():
        if not k.empty:
            by_size.setdefault(len(members), []).append(k)
    order: list[ScaffoldKey] = []
    for size in sorted(by_size, reverse=True):
        bucket = sorted(by_size[size])
        rng.shuffle(bucket)
        order.extend(bucket)

    test: list[int] = []
    for k in order:
        if len(test) >= target:
            break
        if len(test) + len(groups[k]) <= target:
            test.extend(groups[k])
    if not test:
        test = list(groups[order[-1]])
    test_set = set(test)
    train = [i for i in range(n) if i not in test_set]
    if not train:
        raise SplitError("scaffold split left the training set empty")
    log.info("scaffold split: %d train / %d test over %d scaffolds", len(train), len(test), len(groups))
    return SplitAssignment(tuple(train), tuple(sorted(test)), seed, test_fraction)


def random_split(n: int, test_fraction: float = 0.2, seed: int = 0) -> SplitAssignment:
    """Seeded random split with ``round(test_fraction * n)`` test records (at least one)."""
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if n < 2:
        raise SplitError("need at least 2 records to split")
    idx = list(range(n))
    Xoshiro256(seed).shuffle(idx)
    n_test = min(n - 1, max(1, math.floor(test_fraction * n + 0.5)))
    test = sorted(idx[:n_test])
    train = sorted(idx[n_test:])
    return SplitAssignment(tuple(train), tuple(test), seed, test_fraction)
