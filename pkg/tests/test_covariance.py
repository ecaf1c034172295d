import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from densemap.geometry import RigidTransform
from densemap.sparse import (
    FactorGraph,
    IllConditionedPairError,
    NotPositiveDefiniteError,
    ReducedSystem,
    SparseBackend,
    conditional_covariance,
    constrained_minimum_degree,
    linearize,
    marginal_covariance,
    minimum_degree,
    random_graph,
    recover_covariance_blocks,
    schur_reduce,
)
from densemap.sparse.ordering import fill_count, symbolic_fill

ORDERINGS = ["constrained", "min_degree", "natural"]


def block_system(rng, pattern, scale=1.0):
    """SPD reduced system with the given block sparsity (boolean n x n)."""
    n = len(pattern)
    M = np.zeros((6 * n, 6 * n))
    for a in range(n):
        for b in range(a + 1, n):
            if pattern[a, b]:
                X = rng.normal(size=(6, 6)) * scale
                M[6 * a : 6 * a + 6, 6 * b : 6 * b + 6] = X
                M[6 * b : 6 * b + 6, 6 * a : 6 * a + 6] = X.T
    # strict block diagonal dominance keeps it positive definite
    M += np.eye(6 * n) * (np.abs(M).sum(axis=1).max() + 1.0)
    pat = pattern | pattern.T | np.eye(n, dtype=bool)
    return ReducedSystem(list(range(10, 10 + n)), M, np.zeros(6 * n), pat)


def chain_pattern(n):
    p = np.zeros((n, n), dtype=bool)
    for a in range(n - 1):
        p[a, a + 1] = True
    return p


def dense_blocks(red, i, j):
    S = np.linalg.inv(red.matrix)
    a, b = red.index(i), red.index(j)
    return S[6 * a : 6 * a + 6, 6 * a : 6 * a + 6], S[6 * b : 6 * b + 6, 6 * b : 6 * b + 6], S[6 * a : 6 * a + 6, 6 * b : 6 * b + 6]


def test_single_block_is_plain_inverse(rng):
    red = block_system(rng, np.zeros((2, 2), dtype=bool))
    A = red.matrix[:6, :6]
    S = marginal_covariance(red, 10)
    assert np.allclose(S, np.linalg.inv(A), atol=1e-14)


def test_block_diagonal_system_has_independent_blocks(rng):
    red = block_system(rng, np.zeros((4, 4), dtype=bool))
    for ordering in ORDERINGS:
        rec = recover_covariance_blocks(red, [(11, 13)], ordering)[(11, 13)]
        assert np.all(rec.blocks[11, 13] == 0)
        C = conditional_covariance(red, 11, 13, ordering)
        assert np.allclose(C, np.linalg.inv(red.matrix[6:12, 6:12]), atol=1e-14)


@pytest.mark.parametrize("ordering", ORDERINGS)
@pytest.mark.parametrize("topology", ["chain", "loop"])
def test_recovered_blocks_match_dense_inverse(rng, ordering, topology):
    g = random_graph(rng, 10, 60, topology, noise=1.0)
    red = schur_reduce(linearize(g))
    ids = red.keyframe_ids
    pairs = [(ids[0], ids[-1]), (ids[3], ids[4]), (ids[-2], ids[1])]
    recs = recover_covariance_blocks(red, pairs, ordering)
    for i, j in pairs:
        Sii, Sjj, Sij = dense_blocks(red, i, j)
        b = recs[i, j].blocks
        scale = np.abs(Sii).max()
        assert np.abs(b[i, i] - Sii).max() <= 1e-9 * scale
        assert np.abs(b[j, j] - Sjj).max() <= 1e-9 * np.abs(Sjj).max()
        assert np.abs(b[i, j] - Sij).max() <= 1e-9 * max(scale, np.abs(Sjj).max())


@given(st.integers(0, 2**32 - 1), st.integers(3, 9), st.floats(0.1, 0.6))
def test_random_patterns_match_dense_inverse(seed, n, density):
    rng = np.random.default_rng(seed)
    pattern = np.triu(rng.random((n, n)) < density, 1)
    red = block_system(rng, pattern)
    i, j = sorted(rng.choice(red.keyframe_ids, 2, replace=False))
    Sii, Sjj, Sij = dense_blocks(red, i, j)
    want = Sii - Sij @ np.linalg.solve(Sjj, Sij.T)
    for ordering in ORDERINGS:
        got = conditional_covariance(red, i, j, ordering)
        assert np.allclose(got, want, rtol=1e-9, atol=1e-12 * np.abs(Sii).max())


def test_chain_of_twenty_end_pair(rng):
    red = block_system(rng, chain_pattern(20), scale=0.3)
    i, j = red.keyframe_ids[0], red.keyframe_ids[-1]
    recs = {o: recover_covariance_blocks(red, [(i, j)], o)[(i, j)] for o in ORDERINGS}
    Sii, Sjj, Sij = dense_blocks(red, i, j)
    for rec in recs.values():
        assert np.allclose(rec.blocks[i, j], Sij, atol=1e-12)
    assert recs["constrained"].entries_computed <= recs["min_degree"].entries_computed
    assert recs["constrained"].order[-2:] in ([i, j], [j, i])


def test_constrained_never_worse_on_loops():
    rng = np.random.default_rng(5)
    for _ in range(10):
        g = random_graph(rng, 12, 80, "loop", noise=1.0)
        red = schur_reduce(linearize(g))
        ids = red.keyframe_ids
        i, j = ids[0], ids[len(ids) // 2]
        c = recover_covariance_blocks(red, [(i, j)], "constrained")[(i, j)]
        m = recover_covariance_blocks(red, [(i, j)], "min_degree")[(i, j)]
        assert c.entries_computed <= m.entries_computed


def test_conditional_is_psd_and_smaller_than_marginal(rng):
    g = random_graph(rng, 8, 50, "loop", noise=1.0)
    red = schur_reduce(linearize(g))
    i, j = red.keyframe_ids[1], red.keyframe_ids[4]
    C = conditional_covariance(red, i, j)
    assert np.allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-12
    M = marginal_covariance(red, i)
    assert np.linalg.eigvalsh(M - C).min() >= -1e-12 * np.abs(M).max()


def test_conditioning_on_self_is_rejected(rng):
    red = block_system(rng, chain_pattern(3))
    with pytest.raises(ValueError):
        conditional_covariance(red, 11, 11)


def test_unknown_ordering(rng):
    red = block_system(rng, chain_pattern(3))
    with pytest.raises(ValueError):
        recover_covariance_blocks(red, [(10, 11)], "amd")


def test_indefinite_system_is_reported(rng):
    red = block_system(rng, chain_pattern(3))
    red.matrix[6:12, 6:12] = -np.eye(6)
    with pytest.raises(NotPositiveDefiniteError):
        conditional_covariance(red, 10, 12)


def test_singular_conditioning_block():
    S = np.eye(6)
    with pytest.raises(IllConditionedPairError):
        from densemap.sparse.covariance import condition
        condition(S, np.zeros((6, 6)), np.zeros((6, 6)))


def two_arm_graph():
    """Keyframes 1 and 2 each share landmarks only with the fixed keyframe 0."""
    g = FactorGraph()
    poses = {0: RigidTransform.identity(),
             1: RigidTransform.from_axis_angle([0, 0.3, 0], [1.0, 0, 0]),
             2: RigidTransform.from_axis_angle([0, -0.3, 0], [-1.0, 0, 0])}
    for k, T in poses.items():
        g.add_keyframe(k, T.inverse(), fixed=(k == 0))
    rng = np.random.default_rng(3)
    lid = 0
    for arm in (1, 2):
        for _ in range(8):
            p = rng.uniform([-1, -1, 3], [1, 1, 5])
            g.add_landmark(lid, p)
            for k in (0, arm):
                g.keyframes[k].observe(lid, g.keyframes[k].pose.apply(p), 1e-4 * np.eye(3))
            lid += 1
    return g


def test_pair_separated_by_gauge_is_independent():
    g = two_arm_graph()
    backend = SparseBackend(g)
    C = backend.conditional_covariance(1, 2)
    M = marginal_covariance(backend.reduced, 1)
    assert np.allclose(C, M, rtol=1e-9, atol=1e-15)


def test_backend_fixed_keyframes():
    g = two_arm_graph()
    backend = SparseBackend(g)
    M1 = marginal_covariance(backend.reduced, 1)
    assert np.allclose(backend.conditional_covariance(1, 0), M1)
    assert np.allclose(backend.conditional_covariance(0, 1), M1)
    with pytest.raises(ValueError):
        backend.conditional_covariance(2, 2)
    with pytest.raises(KeyError):
        backend.conditional_covariance(1, 99)


# ordering

def adjacency_from(edges, n):
    adj = {v: set() for v in range(n)}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    return adj


@given(st.integers(0, 2**32 - 1), st.integers(1, 25))
def test_minimum_degree_on_trees_has_no_fill(seed, n):
    rng = np.random.default_rng(seed)
    edges = [(v, int(rng.integers(0, v))) for v in range(1, n)]
    adj = adjacency_from(edges, n)
    order = minimum_degree(adj)
    assert sorted(order) == list(range(n))
    assert fill_count(adj, order) == len(edges)


@given(st.integers(0, 2**32 - 1), st.integers(2, 15), st.floats(0.05, 0.7))
def test_constrained_order_puts_targets_last(seed, n, p):
    rng = np.random.default_rng(seed)
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
    adj = adjacency_from(edges, n)
    t = [int(x) for x in rng.choice(n, 2, replace=False)]
    order = constrained_minimum_degree(adj, t)
    assert sorted(order) == list(range(n))
    assert set(order[-2:]) == set(t)


@given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.floats(0.1, 0.6))
def test_symbolic_fill_matches_numeric_cholesky(seed, n, p):
    rng = np.random.default_rng(seed)
    edges = [(a, b) for a in range(n) for b in range(a + 1, n) if rng.random() < p]
    adj = adjacency_from(edges, n)
    order = list(rng.permutation(n))
    A = np.eye(n) * n * 4.0
    for a, b in edges:
        A[a, b] = A[b, a] = rng.uniform(0.5, 1.5)
    P = A[np.ix_(order, order)]
    R = np.linalg.cholesky(P).T
    struct = symbolic_fill(adj, order)
    for i in range(n):
        numeric = {j for j in range(i + 1, n) if abs(R[i, j]) > 1e-13}
        assert numeric == struct[i]


def test_unknown_constrained_block():
    with pytest.raises(KeyError):
        minimum_degree({0: set(), 1: set()}, last=[5])
