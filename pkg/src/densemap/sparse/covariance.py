"""Targeted covariance recovery from a sparse Cholesky factor.

With ``I = R^T R`` (R upper block-triangular in elimination order) the
covariance ``S = I^-1`` satisfies ``R S = R^-T``. Reading one block row of that
identity gives, for ``l >= i``,

    S_il = R_ii^-1 (delta_il R_ii^-T - sum_{j > i, R_ij != 0} R_ij S_jl)

so any block is a function of blocks further down/right that follow the
sparsity of R. Requested blocks are computed by memoized recursion over that
dependency pattern; the number of blocks touched depends strongly on where
the requested blocks sit in the elimination order, which is why each target
pair gets its own ordering with the pair eliminated last.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.linalg

from .graph import FactorGraph
from .linear import ReducedSystem, linearize, schur_reduce
from .ordering import constrained_minimum_degree, minimum_degree, symbolic_fill

D = 6
DIAG_ENTRIES = D * (D + 1) // 2
OFFDIAG_ENTRIES = D * D


class NotPositiveDefiniteError(ArithmeticError):
    pass


class IllConditionedPairError(ArithmeticError):
    pass


@dataclass
class BlockCholesky:
    order: list[int]  # block indices of the reduced system, in elimination order
    struct: dict[int, set[int]]  # position -> later positions with nonzero R blocks
    R: dict[tuple[int, int], np.ndarray]  # (pos_i, pos_j), i <= j

    def nonzero_blocks(self) -> int:
        return len(self.R)


def block_cholesky(red: ReducedSystem, order: list[int]) -> BlockCholesky:
    """Right-looking block Cholesky ``P I P^T = R^T R`` over the symbolic pattern."""
    struct = symbolic_fill(red.adjacency(), order)
    A: dict[tuple[int, int], np.ndarray] = {}
    for i, bi in enumerate(order):
        A[i, i] = red.block(bi, bi).copy()
        for j in struct[i]:
            A[i, j] = red.block(bi, order[j]).copy()
    R = {}
    for k in range(len(order)):
        try:
            Lkk = np.linalg.cholesky(0.5 * (A[k, k] + A[k, k].T))
        except np.linalg.LinAlgError:
            raise NotPositiveDefiniteError(
                f"reduced system not positive definite at keyframe {red.keyframe_ids[order[k]]}"
                " (gauge not fixed or rank deficient)"
            ) from None
        R[k, k] = Lkk.T
        later = sorted(struct[k])
        for j in later:
            R[k, j] = scipy.linalg.solve_triangular(Lkk, A[k, j], lower=True)
        for a, i in enumerate(later):
            Rki_T = R[k, i].T
            for j in later[a:]:
                A[i, j] -= Rki_T @ R[k, j]
    return BlockCholesky(order, struct, R)


@dataclass
class CovarianceRecovery:
    blocks: dict[tuple[int, int], np.ndarray]  # keyed by keyframe ids
    blocks_computed: int
    entries_computed: int
    order: list[int] = field(default_factory=list)  # keyframe ids, elimination order


def recover_from_factor(
    chol: BlockCholesky, wanted: Iterable[tuple[int, int]]
) -> tuple[dict[tuple[int, int], np.ndarray], dict[tuple[int, int], np.ndarray]]:
    """Covariance blocks at factor positions ``wanted`` (pairs ``i <= j``).

    Returns (requested blocks, memo of every block computed on the way).
    """
    R = chol.R
    rows = {i: sorted(s) for i, s in chol.struct.items()}
    inv_diag: dict[int, np.ndarray] = {}
    memo: dict[tuple[int, int], np.ndarray] = {}

    def rinv(i):
        if i not in inv_diag:
            inv_diag[i] = scipy.linalg.solve_triangular(R[i, i], np.eye(D))
        return inv_diag[i]

    def deps(key):
        i, l = key
        return [(j, l) if j <= l else (l, j) for j in rows[i]]

    def get(a, b):
        return memo[a, b] if a <= b else memo[b, a].T

    for target in wanted:
        stack = [tuple(sorted(target))]
        while stack:
            key = stack[-1]
            if key in memo:
                stack.pop()
                continue
            missing = [d for d in deps(key) if d not in memo]
            if missing:
                stack.extend(missing)
                continue
            i, l = key
            acc = np.zeros((D, D))
            for j in rows[i]:
                acc -= R[i, j] @ get(j, l)
            if i == l:
                acc += rinv(i).T
            val = rinv(i) @ acc
            if i == l:
                val = 0.5 * (val + val.T)
            memo[key] = val
            stack.pop()
    requested = {tuple(sorted(t)): memo[tuple(sorted(t))] for t in wanted}
    return requested, memo


def _count_entries(memo) -> int:
    return sum(DIAG_ENTRIES if i == j else OFFDIAG_ENTRIES for i, j in memo)


def recover_covariance_blocks(
    red: ReducedSystem,
    targets: Iterable[tuple[int, int]],
    ordering: str = "constrained",
) -> dict[tuple[int, int], CovarianceRecovery]:
    """For each keyframe pair (i, j) recover S_ii, S_jj and S_ij.

    ``ordering``: ``constrained`` (minimum degree with the pair forced last,
    refactorized per pair), ``min_degree`` (plain fill-reducing order) or
    ``natural``. Results are keyed by the input pair; each carries the count
    of covariance blocks and scalar entries computed for that pair.
    """
    adj = red.adjacency()
    n = len(red.keyframe_ids)
    shared = {}
    out = {}
    for pair in targets:
        ki, kj = pair
        a, b = red.index(ki), red.index(kj)
        if ordering == "constrained":
            order = constrained_minimum_degree(adj, [a, b])
        elif ordering == "min_degree":
            order = shared.setdefault("md", minimum_degree(adj))
        elif ordering == "natural":
            order = list(range(n))
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        key = tuple(order)
        if key not in shared:
            shared[key] = block_cholesky(red, order)
        chol = shared[key]
        pos = {v: p for p, v in enumerate(order)}
        pa, pb = pos[a], pos[b]
        wanted = [(pa, pa), (pb, pb), (min(pa, pb), max(pa, pb))]
        got, memo = recover_from_factor(chol, wanted)

        def fetch(p, q):
            return got[p, q] if p <= q else got[q, p].T

        blocks = {(ki, ki): fetch(pa, pa), (kj, kj): fetch(pb, pb), (ki, kj): fetch(pa, pb)}
        out[pair] = CovarianceRecovery(
            blocks, len(memo), _count_entries(memo), [red.keyframe_ids[v] for v in order]
        )
    return out


def condition(S_ii: np.ndarray, S_jj: np.ndarray, S_ij: np.ndarray) -> np.ndarray:
    """``S_ii - S_ij S_jj^-1 S_ji``, symmetrized; checked for PSD."""
    if np.linalg.cond(S_jj) > 1e12:
        raise IllConditionedPairError("conditioning block is singular")
    C = S_ii - S_ij @ np.linalg.solve(S_jj, S_ij.T)
    C = 0.5 * (C + C.T)
    if np.linalg.eigvalsh(C).min() < -1e-10:
        raise IllConditionedPairError("conditional covariance is not positive semidefinite")
    return C


def conditional_covariance(
    red: ReducedSystem, i: int, j: int, ordering: str = "constrained"
) -> np.ndarray:
    """Covariance of keyframe ``i`` given keyframe ``j`` (6x6, tangent ``(omega, rho)``)."""
    if i == j:
        raise ValueError("conditioning a keyframe on itself is undefined")
    rec = recover_covariance_blocks(red, [(i, j)], ordering)[(i, j)]
    return condition(rec.blocks[i, i], rec.blocks[j, j], rec.blocks[i, j])


def marginal_covariance(red: ReducedSystem, i: int) -> np.ndarray:
    a = red.index(i)
    order = constrained_minimum_degree(red.adjacency(), [a])
    got, _ = recover_from_factor(block_cholesky(red, order), [(len(order) - 1,) * 2])
    return next(iter(got.values()))


class SparseBackend:
    """Read-only view of a converged graph for pose-pair uncertainty queries."""

    def __init__(self, graph: FactorGraph, reduced: ReducedSystem | None = None):
        self.graph = graph
        self.reduced = reduced if reduced is not None else schur_reduce(linearize(graph))

    def conditional_covariance(self, i: int, j: int) -> np.ndarray:
        """Relative uncertainty of keyframe ``i`` given ``j``.

        A fixed (gauge) keyframe is known exactly: conditioning on it leaves
        the marginal of the other, and when ``i`` itself is fixed the relative
        pose uncertainty is carried entirely by ``j``'s marginal.
        """
        fixed = self.graph.fixed_keyframes
        if i == j:
            raise ValueError("conditioning a keyframe on itself is undefined")
        if i in fixed and j in fixed:
            return np.zeros((D, D))
        if j in fixed:
            return marginal_covariance(self.reduced, i)
        if i in fixed:
            return marginal_covariance(self.reduced, j)
        return conditional_covariance(self.reduced, i, j)
