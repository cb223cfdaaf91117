import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from asgcn.errors import ParseError, ValidationError
from asgcn.graph import (PARTITIONS, SkeletonGraph, build_kernels, build_partitions, hop_reachability,
                         load_graph, preset, random_connected_graph, resolve_graph, save_graph,
                         star_graph, sym_normalize, transition, walk_reachability)

chain3 = SkeletonGraph(3, ((0, 1), (1, 2)), center=1)


def graphs():
    return st.builds(lambda n, seed, extra: random_connected_graph(n, np.random.default_rng(seed), extra),
                     st.integers(1, 12), st.integers(0, 10**6), st.integers(0, 4))


def test_chain_partitions():
    parts = build_partitions(chain3).parts
    cp, cf = parts["centripetal"], parts["centrifugal"]
    assert set(zip(*np.nonzero(cp))) == {(0, 1), (2, 1)}
    assert set(zip(*np.nonzero(cf))) == {(1, 0), (1, 2)}
    assert np.array_equal(parts["root"], np.eye(3))


def test_single_joint_partitions():
    parts = build_partitions(SkeletonGraph(1, (), center=0)).parts
    assert parts["root"].tolist() == [[1.0]]
    assert not parts["centripetal"].any() and not parts["centrifugal"].any()


def test_cycle_partitions_by_distance():
    # joints 1 and 3 sit one hop from the center, joint 2 two hops
    g = SkeletonGraph(4, ((0, 1), (1, 2), (2, 3), (3, 0)), center=0)
    parts = build_partitions(g).parts
    expected_cp = {(1, 0), (3, 0), (2, 1), (2, 3)}
    expected_cf = {(0, 1), (0, 3), (1, 2), (3, 2)}
    assert set(zip(*np.nonzero(parts["centripetal"]))) == expected_cp
    assert set(zip(*np.nonzero(parts["centrifugal"]))) == expected_cf


def test_equal_distance_bone_is_split():
    # triangle: 1 and 2 are both one hop from center 0
    g = SkeletonGraph(3, ((0, 1), (0, 2), (1, 2)), center=0)
    parts = build_partitions(g).parts
    assert parts["centripetal"][1, 2] == 0.5 and parts["centrifugal"][1, 2] == 0.5


@given(graphs())
def test_partition_sum_identity(g):
    pa = build_partitions(g)
    assert np.array_equal(sum(pa.parts[p] for p in PARTITIONS), pa.base)
    assert np.array_equal(pa.parts["root"], np.eye(g.n))


def test_sym_normalize_cases():
    assert np.array_equal(sym_normalize(np.eye(4)), np.eye(4))
    assert np.allclose(sym_normalize(np.ones((2, 2))), 0.5, rtol=0, atol=1e-15)
    assert np.array_equal(sym_normalize(np.zeros((3, 3))), np.zeros((3, 3)))


def test_transition_cases():
    a = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    assert transition(a).tolist() == [[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]]
    assert np.array_equal(transition(np.eye(3)), np.eye(3))
    z = transition(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert z[0].tolist() == [0.0, 0.0]
    with pytest.raises(ValidationError):
        transition(np.array([[1.0, -1.0], [0.0, 1.0]]))


@given(graphs())
def test_transition_rows_stay_substochastic(g):
    for p, m in build_partitions(g).parts.items():
        t = transition(m)
        tt = transition(t)
        for rows in (t, tt):
            s = rows.sum(axis=1)
            assert np.all((np.abs(s - 1) < 1e-12) | (s == 0))


def test_order_one_kernels_equal_transition():
    pa = build_partitions(chain3)
    k = build_kernels(pa, 1)
    for p in PARTITIONS:
        assert np.array_equal(k.transition_powers[(p, 1)], transition(pa.parts[p]))
    assert k.stack().shape == (3, 3, 3)
    assert build_kernels(pa, 4).stack().shape == (12, 3, 3)


def test_chain5_square_pattern_matches_two_hops():
    g = SkeletonGraph(5, ((0, 1), (1, 2), (2, 3), (3, 4)), center=2)
    sq = np.linalg.matrix_power(transition(build_partitions(g).base), 2)
    assert np.array_equal(sq != 0, hop_reachability(g, 2))


def test_hop_reachability_cases():
    assert np.array_equal(hop_reachability(chain3, 0), np.eye(3, dtype=bool))
    tri = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    assert np.array_equal(hop_reachability(chain3, 1), tri)
    assert hop_reachability(star_graph(3, 2), 4).all()


@given(graphs(), st.integers(1, 4))
def test_partition_powers_within_hop_reach(g, l):
    k = build_kernels(build_partitions(g), l)
    reach = hop_reachability(g, l)
    for p in PARTITIONS:
        pattern = k.transition_powers[(p, l)] != 0
        assert not (pattern & ~reach).any()
        assert np.array_equal(pattern, walk_reachability(transition(build_partitions(g).parts[p]), l))


def test_kernels_are_deterministic():
    g = preset("ntu25")
    a = build_kernels(build_partitions(g), 3).stack()
    b = build_kernels(build_partitions(g), 3).stack()
    assert a.tobytes() == b.tobytes()


def test_presets():
    ntu, kin = preset("ntu25"), preset("kinetics18")
    assert (ntu.n, len(ntu.bones)) == (25, 24)
    assert (kin.n, len(kin.bones)) == (18, 17)
    assert resolve_graph("star4x7").n == 29


def test_graph_file_round_trip(tmp_path):
    g = star_graph(2, 3)
    save_graph(g, tmp_path / "g.json")
    assert load_graph(tmp_path / "g.json") == g
    assert resolve_graph(str(tmp_path / "g.json")) == g


def test_graph_validation(tmp_path):
    with pytest.raises(ValidationError):
        SkeletonGraph(3, ((0, 1),), center=0)
    with pytest.raises(ValidationError):
        SkeletonGraph(2, ((0, 1), (1, 0)), center=0)
    with pytest.raises(ValidationError):
        SkeletonGraph(2, ((0, 2),), center=0)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n": 2}))
    with pytest.raises(ParseError):
        load_graph(bad)
