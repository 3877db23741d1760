import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causalpose.graph import (
    SkeletonError, SkeletonSpec, canonical_form, checked, complete_graph_table, dump_skeleton, load_skeleton,
    membership, neighbor_table, neighbors, permute, toy_skeleton, validate,
)


def chain3():
    return SkeletonSpec(("a", "b", "c"), ((0, 1), (1, 2)), (("all", (0, 1, 2)),))


def test_chain_neighbors():
    assert neighbors(chain3(), 1) == [0, 2]
    assert neighbors(chain3(), 0) == [1]


def test_neighbors_out_of_range():
    with pytest.raises(SkeletonError):
        neighbors(chain3(), 3)


def test_toy_adjacency_matches_edge_list():
    spec = toy_skeleton()
    adj = {k: set() for k in range(spec.K)}
    for a, b in spec.edges:
        adj[a].add(b)
        adj[b].add(a)
    for k in range(spec.K):
        assert neighbors(spec, k) == sorted(adj[k])


def test_toy_is_valid():
    assert validate(toy_skeleton()) == []
    assert toy_skeleton().K == 8
    assert toy_skeleton().group_names == ("head", "arms", "legs", "torso")


def test_uncovered_keypoint_reported():
    spec = SkeletonSpec(("a", "b"), ((0, 1),), (("one", (0,)),))
    assert any(p.startswith("uncovered keypoint 1") for p in validate(spec))


def test_duplicate_edge_normalised():
    spec = SkeletonSpec(("a", "b", "c"), ((0, 1), (1, 0), (1, 2), (0, 1)), (("all", (0, 1, 2)),))
    assert spec.edges == ((0, 1), (1, 2))
    assert validate(spec) == []


def test_self_loop_and_disconnected():
    spec = SkeletonSpec(("a", "b", "c"), ((0, 0), (0, 1)), (("all", (0, 1, 2)),))
    problems = validate(spec)
    assert "self-loop at 0" in problems
    assert any("disconnected" in p for p in problems)
    with pytest.raises(SkeletonError):
        checked(spec)


def test_out_of_range_index():
    spec = SkeletonSpec(("a", "b"), ((0, 2),), (("all", (0, 1)),))
    assert any("out of range" in p for p in validate(spec))


def test_neighbor_table_padding_keeps_neighbor_set():
    spec = toy_skeleton()
    table = neighbor_table(spec)
    assert table.shape == (8, 5)
    for k in range(spec.K):
        assert set(table[k]) == set(neighbors(spec, k))


def test_complete_graph_table():
    t = complete_graph_table(4)
    assert t.shape == (4, 3)
    for i in range(4):
        assert set(t[i]) == set(range(4)) - {i}
    assert complete_graph_table(1).shape == (1, 0)


def test_membership_matrix():
    m = membership(toy_skeleton())
    assert m.shape == (4, 8)
    assert m[:, 1].sum() == 2  # neck is in head and torso
    assert np.all(m.sum(axis=0) >= 1)


@given(st.permutations(range(8)))
def test_relabelling_is_isomorphic(perm):
    spec = toy_skeleton()
    moved = permute(spec, perm)
    assert validate(moved) == []
    assert canonical_form(moved) == canonical_form(spec)
    for old in range(spec.K):
        assert neighbors(moved, perm[old]) == sorted(perm[j] for j in neighbors(spec, old))


def test_canonical_form_distinguishes_edges():
    a = toy_skeleton()
    b = SkeletonSpec(a.names, tuple(e for e in a.edges if e != (1, 7)) + ((6, 7),), a.hyperedges)
    assert canonical_form(a) != canonical_form(b)


def test_file_round_trip(tmp_path):
    dump_skeleton(toy_skeleton(), tmp_path / "s.cfg")
    assert load_skeleton(tmp_path / "s.cfg") == toy_skeleton()


def test_file_name_count_mismatch(tmp_path):
    (tmp_path / "s.cfg").write_text("[skeleton]\nK = 3\nnames = a b\n[edges]\npairs = 0-1\n[hyperedges]\nall = 0 1\n")
    with pytest.raises(SkeletonError):
        load_skeleton(tmp_path / "s.cfg")


def test_file_rejects_invalid_graph(tmp_path):
    (tmp_path / "s.cfg").write_text("[skeleton]\nK = 3\nnames = a b c\n[edges]\npairs = 0-1\n[hyperedges]\nall = 0 1 2\n")
    with pytest.raises(SkeletonError, match="disconnected"):
        load_skeleton(tmp_path / "s.cfg")
