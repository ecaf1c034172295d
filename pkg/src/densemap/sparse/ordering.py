"""Minimum-degree elimination orderings on the block graph.

The constrained variant keeps designated blocks ineligible until every other
block has been eliminated, so they come last in the factor. Degrees are exact
(the elimination graph is updated explicitly), which is affordable at block
granularity.
"""

from __future__ import annotations

from typing import Iterable, Mapping


def _eliminate(adj: dict[int, set[int]], v: int) -> None:
    nbrs = adj.pop(v)
    for a in nbrs:
        adj[a].discard(v)
        adj[a] |= nbrs - {a}


def minimum_degree(
    adjacency: Mapping[int, Iterable[int]], last: Iterable[int] = ()
) -> list[int]:
    """Elimination order by minimum degree, ties broken by smallest index.

    Blocks in ``last`` are held back and eliminated after all others (again by
    minimum degree among themselves).
    """
    adj = {v: set(n) for v, n in adjacency.items()}
    held = set(last)
    unknown = held - set(adj)
    if unknown:
        raise KeyError(f"constrained blocks not in graph: {sorted(unknown)}")
    order = []
    while adj:
        pool = [v for v in adj if v not in held] or list(adj)
        v = min(pool, key=lambda u: (len(adj[u]), u))
        order.append(v)
        _eliminate(adj, v)
    return order


def constrained_minimum_degree(adjacency, targets: Iterable[int]) -> list[int]:
    return minimum_degree(adjacency, last=targets)


def symbolic_fill(adjacency: Mapping[int, Iterable[int]], order: list[int]) -> dict[int, set[int]]:
    """Upper structure of the Cholesky factor in elimination positions.

    Returns ``{position: set of later positions with a structural nonzero}``.
    """
    pos = {v: i for i, v in enumerate(order)}
    struct = {i: set() for i in range(len(order))}
    for v, nbrs in adjacency.items():
        for u in nbrs:
            a, b = pos[v], pos[u]
            if a < b:
                struct[a].add(b)
            elif b < a:
                struct[b].add(a)
    for k in range(len(order)):
        later = sorted(struct[k])
        if later:
            parent = later[0]
            struct[parent] |= set(later[1:])
    return struct


def fill_count(adjacency, order: list[int]) -> int:
    return sum(len(s) for s in symbolic_fill(adjacency, order).values())
