import json
from itertools import combinations_with_replacement

import numpy as np
import pytest
from conftest import random_split

from hyperimts.data import Observation, SplitSample
from hyperimts.hypergraph import build, shared_index
from hyperimts.tensor import ContractError


def split_of(look, queries, U):
    return SplitSample(
        lookback=tuple(Observation(float(t), u, float(z)) for t, u, z in look),
        queries=tuple((float(t), u) for t, u in queries),
        targets=tuple(0.0 for _ in queries),
        t_split=max(t for t, _, _ in look),
        U=U,
    )


def brute_shared(split):
    """Quadratic scan over all lookback observation pairs."""
    look = sorted(split.lookback)
    present = sorted({o.u for o in look} | {u for _, u in split.queries})
    out = {}
    for a, b in combinations_with_replacement(present, 2):
        pairs = []
        for i, oi in enumerate(look):
            for j, oj in enumerate(look):
                if oi.u == a and oj.u == b and oi.t == oj.t and (a != b or i == j):
                    pairs.append((i, j))
        ta = {o.t for o in look if o.u == a}
        tb = {o.t for o in look if o.u == b}
        out[(a, b)] = (sorted(pairs), len(pairs), len(ta | tb))
    return out


def test_node_layout_and_incidence():
    g = build(split_of([(1, 0, 0.5), (1, 2, 0.7), (3, 0, 0.1)], [(5, 2), (4, 0)], U=3))
    assert g.M == 5 and g.T == 4 and g.n_lookback == 3
    np.testing.assert_array_equal(g.node_time, [1, 1, 3, 4, 5])
    np.testing.assert_array_equal(g.node_var, [0, 2, 0, 0, 2])
    np.testing.assert_array_equal(g.node_value, [0.5, 0.7, 0.1, 0.0, 0.0])
    np.testing.assert_array_equal(g.is_target, [False, False, False, True, True])
    np.testing.assert_array_equal(g.query_nodes, [4, 3])
    assert g.H_T.shape == (5, 4) and g.H_U.shape == (5, 3)
    assert g.H_U[:, 1].sum() == 0  # absent variable has an empty hyperedge
    np.testing.assert_array_equal(g.variables, [0, 2])


def test_empty_sides_rejected():
    with pytest.raises(ContractError):
        build(SplitSample(lookback=(), queries=((1.0, 0),), targets=(0.0,), t_split=0.0, U=1))
    with pytest.raises(ContractError):
        build(SplitSample(lookback=(Observation(0.0, 0, 1.0),), queries=(), targets=(), t_split=0.0, U=1))


def test_incidence_rows_and_node_count_on_random_samples():
    rng = np.random.default_rng(0)
    for _ in range(200):
        sp = random_split(rng, U=int(rng.integers(1, 6)), n_times=int(rng.integers(1, 8)), p_obs=rng.uniform(0.1, 1))
        g = build(sp)
        assert g.M == len(sp.lookback) + len(sp.queries)
        np.testing.assert_array_equal(g.H_T.sum(axis=1), 1.0)
        np.testing.assert_array_equal(g.H_U.sum(axis=1), 1.0)
        assert np.array_equal(g.H_T[np.arange(g.M), g.node_time_idx], np.ones(g.M))


def test_three_shared_two_unaligned():
    # variables 0 and 1 share t=1,2,3; t=4 only has 0, t=5 only has 1
    look = [(t, 0, 1.0) for t in (1, 2, 3, 4)] + [(t, 1, 1.0) for t in (1, 2, 3, 5)]
    si = shared_index(build(split_of(look, [(6, 0)], U=2)))
    assert si.t_shared[(0, 1)] == 3
    assert si.t_total[(0, 1)] == 5


def test_shared_index_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        sp = random_split(rng, U=int(rng.integers(1, 5)), n_times=int(rng.integers(1, 7)))
        si = shared_index(build(sp))
        oracle = brute_shared(sp)
        assert set(si.pairs) == set(oracle)
        for key, (pairs, n_shared, n_total) in oracle.items():
            assert sorted(si.pairs[key]) == pairs
            assert si.t_shared[key] == n_shared
            assert si.t_total[key] == n_total


def test_shared_matrices_are_symmetric():
    sp = random_split(np.random.default_rng(2), U=4, n_times=6, p_obs=0.7)
    si = shared_index(build(sp))
    S, Tt = si.shared_matrix(), si.total_matrix()
    np.testing.assert_array_equal(S, S.T)
    np.testing.assert_array_equal(Tt, Tt.T)
    assert (S <= Tt).all()


def test_lookback_permutation_gives_identical_graph():
    rng = np.random.default_rng(3)
    sp = random_split(rng, U=3, n_times=5, p_obs=0.8)
    perm = rng.permutation(len(sp.lookback))
    sp2 = SplitSample(tuple(sp.lookback[i] for i in perm), sp.queries, sp.targets, sp.t_split, sp.U)
    assert build(sp).to_json() == build(sp2).to_json()


def test_debug_dump_is_row_compressed():
    g = build(split_of([(1, 0, 0.5), (2, 1, 0.7)], [(3, 1)], U=2))
    d = json.loads(g.to_json(shared_index(g)))
    assert d["H_T"] == [0, 1, 2]
    assert d["H_U"] == [0, 1, 1]
    assert d["shared_pairs"]["0,1"] == []
