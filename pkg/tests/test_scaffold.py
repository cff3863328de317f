import random

import networkx as nx
import pytest
from hypothesis import given, settings, strategies as st

from chembridge.errors import SplitError
from chembridge.scaffold import (
    EMPTY_SCAFFOLD, ScaffoldKey, murcko_scaffold, random_split, scaffold_key, scaffold_split,
)
from chembridge.smiles import MoleculeGraph, parse_smiles


def _prune_oracle(graph) -> set[int]:
    """Naive fixpoint: rescan every atom each pass. Ring atoms come from a
    cycle basis rather than the parser's bridge detection."""
    G = nx.Graph()
    G.add_nodes_from(range(len(graph.atoms)))
    G.add_edges_from((b.begin, b.end) for b in graph.bonds)
    ring = {v for cyc in nx.cycle_basis(G) for v in cyc}
    alive = set(G)
    changed = True
    while changed:
        changed = False
        for v in sorted(alive):
            if v not in ring and sum(1 for u in G[v] if u in alive) <= 1:
                alive.discard(v)
                changed = True
    return alive


def _scaffold_size(smiles):
    return len(murcko_scaffold(parse_smiles(smiles)).atoms)


def test_acyclic_scaffold_empty():
    assert _scaffold_size("CCO") == 0
    assert scaffold_key(murcko_scaffold(parse_smiles("CCO"))) == EMPTY_SCAFFOLD


def test_ethylbenzene_scaffold():
    assert len(_prune_oracle(parse_smiles("CCc1ccccc1"))) == 6
    assert _scaffold_size("CCc1ccccc1") == 6


def test_diphenylmethane_keeps_linker():
    assert len(_prune_oracle(parse_smiles("c1ccccc1Cc1ccccc1"))) == 13
    assert _scaffold_size("c1ccccc1Cc1ccccc1") == 13


def test_exocyclic_double_bond_pruned():
    assert _scaffold_size("O=C1CCCCC1") == 6


def test_scaffold_matches_oracle_on_corpus(corpus_smiles):
    for smi in corpus_smiles:
        g = parse_smiles(smi)
        assert len(murcko_scaffold(g).atoms) == len(_prune_oracle(g)), smi


def _key(smiles):
    return scaffold_key(murcko_scaffold(parse_smiles(smiles)))


def test_keys_equal_for_same_scaffold():
    assert _key("c1ccccc1") == _key("Cc1ccccc1") == _key("CC(=O)Oc1ccccc1C(=O)O")


def test_benzene_vs_pyridine():
    assert _key("c1ccccc1") != _key("c1ccncc1")


def test_acyclic_molecules_share_empty_key():
    assert _key("CCO") == _key("CCCCN") == EMPTY_SCAFFOLD


def _permuted(graph: MoleculeGraph, rng: random.Random) -> MoleculeGraph:
    perm = list(range(len(graph.atoms)))
    rng.shuffle(perm)  # new index of old atom i is perm[i]
    atoms = [None] * len(perm)
    for old, new in enumerate(perm):
        atoms[new] = graph.atoms[old]
    from dataclasses import replace
    bonds = [replace(b, begin=perm[b.begin], end=perm[b.end]) for b in graph.bonds]
    rng.shuffle(bonds)
    return MoleculeGraph(tuple(atoms), tuple(bonds))


def test_wl_key_relabeling_invariant(corpus_smiles):
    rng = random.Random(4)
    for smi in corpus_smiles:
        scaf = murcko_scaffold(parse_smiles(smi))
        key = scaffold_key(scaf)
        for _ in range(3):
            assert scaffold_key(_permuted(scaf, rng)) == key


def test_different_keys_imply_non_isomorphic(corpus_smiles):
    scafs = {}
    for smi in corpus_smiles:
        s = murcko_scaffold(parse_smiles(smi))
        scafs.setdefault(scaffold_key(s), s)
    graphs = list(scafs.values())

    def nxg(g):
        G = nx.Graph()
        for i, a in enumerate(g.atoms):
            G.add_node(i, label=(a.element, a.aromatic))
        G.add_edges_from((b.begin, b.end, {"order": b.order}) for b in g.bonds)
        return G

    for i in range(len(graphs)):
        for j in range(i + 1, len(graphs)):
            a, b = graphs[i], graphs[j]
            if len(a.atoms) != len(b.atoms):
                continue
            assert not nx.is_isomorphic(nxg(a), nxg(b), node_match=lambda x, y: x == y,
                                        edge_match=lambda x, y: x == y)


def _keys_from_sizes(sizes):
    keys = []
    for g, size in enumerate(sizes):
        keys += [ScaffoldKey(f"{g + 1:016x}")] * size
    return keys


@pytest.mark.parametrize("seed", range(10))
def test_greedy_example_sizes(seed):
    keys = _keys_from_sizes([5, 3, 1, 1])
    split = scaffold_split(keys, 0.2, seed)
    assert len(split.test_indices) in (1, 2)
    assert not set(split.test_indices) & set(range(5, 8))


def test_unit_groups_exact_fraction():
    keys = [ScaffoldKey(f"{i + 1:016x}") for i in range(100)]
    assert len(scaffold_split(keys, 0.2, 1).test_indices) == 20


def test_two_groups_smaller_to_test():
    keys = _keys_from_sizes([7, 3])
    split = scaffold_split(keys, 0.2, 0)
    assert split.test_indices == (7, 8, 9)


def test_empty_scaffold_group_stays_in_train():
    keys = [EMPTY_SCAFFOLD] * 3 + _keys_from_sizes([1, 1, 1, 1, 1, 1, 1])
    for seed in range(5):
        split = scaffold_split(keys, 0.5, seed)
        assert {0, 1, 2} <= set(split.train_indices)


def test_single_key_error():
    with pytest.raises(SplitError):
        scaffold_split([ScaffoldKey("a")] * 5, 0.2, 0)


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_bad_fraction(frac):
    with pytest.raises(SplitError):
        scaffold_split(_keys_from_sizes([2, 2]), frac, 0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=2, max_size=60), st.floats(0.05, 0.6), st.integers(0, 99))
def test_split_properties(labels, frac, seed):
    keys = [EMPTY_SCAFFOLD if v == 0 else ScaffoldKey(f"{v:016x}") for v in labels]
    if len(set(keys)) < 2:
        with pytest.raises(SplitError):
            scaffold_split(keys, frac, seed)
        return
    split = scaffold_split(keys, frac, seed)
    train, test = set(split.train_indices), set(split.test_indices)
    assert not train & test and train | test == set(range(len(keys)))
    assert not {keys[i] for i in train} & {keys[i] for i in test}
    assert all(not keys[i].empty for i in test)
    assert test
    assert scaffold_split(keys, frac, seed) == split


def test_corpus_split(corpus_smiles):
    keys = [_key(s) for s in corpus_smiles]
    split = scaffold_split(keys, 0.2, 3)
    assert not {keys[i] for i in split.train_indices} & {keys[i] for i in split.test_indices}
    assert 0 < len(split.test_indices) <= 0.2 * len(keys)


def test_random_split():
    a = random_split(50, 0.2, 9)
    assert a == random_split(50, 0.2, 9)
    assert len(a.test_indices) == 10
    assert sorted(a.train_indices + a.test_indices) == list(range(50))
    assert a != random_split(50, 0.2, 10)
