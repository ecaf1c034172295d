"""Normal equations, landmark marginalization and Gauss-Newton."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .graph import (
    FactorGraph,
    GraphError,
    _pose_arrays,
    huber_weight,
    retract_pose,
    total_cost,
)

log = logging.getLogger(__name__)

POSE_DIM = 6
POINT_DIM = 3
LANDMARK_REGULARIZER = 1e-12
CONDITION_LIMIT = 1e12


class SingularSystemError(ArithmeticError):
    """The information matrix is rank deficient beyond the fixed gauge."""


@dataclass
class LinearSystem:
    """``H delta = b`` over free keyframes (6 dof each) then landmarks (3 dof each).

    The Hessian is kept in block form; ``H`` assembles the sparse matrix with
    the state order ``keyframe_ids`` followed by ``landmark_ids``.
    """

    keyframe_ids: list[int]
    landmark_ids: list[int]
    H_cc: np.ndarray  # (nk, 6, 6) diagonal camera blocks
    H_ll: np.ndarray  # (nl, 3, 3)
    H_cl: np.ndarray  # (nobs, 6, 3) one block per observation of a free keyframe
    obs_k: np.ndarray  # keyframe index (into keyframe_ids) per H_cl block
    obs_l: np.ndarray  # landmark index (into landmark_ids) per H_cl block
    b_c: np.ndarray  # (nk, 6)
    b_l: np.ndarray  # (nl, 3)
    cost: float = 0.0

    @property
    def ordering(self) -> list[tuple[str, int]]:
        return [("kf", k) for k in self.keyframe_ids] + [("lm", l) for l in self.landmark_ids]

    @property
    def b(self) -> np.ndarray:
        return np.concatenate([self.b_c.ravel(), self.b_l.ravel()])

    @property
    def H(self) -> scipy.sparse.csr_matrix:
        nk, nl = len(self.keyframe_ids), len(self.landmark_ids)
        n = POSE_DIM * nk + POINT_DIM * nl
        rows, cols, vals = [], [], []

        def put(r0, c0, block):
            r, c = np.nonzero(np.ones_like(block, dtype=bool))
            rows.append(r + r0)
            cols.append(c + c0)
            vals.append(block.ravel())

        for k in range(nk):
            put(POSE_DIM * k, POSE_DIM * k, self.H_cc[k])
        off = POSE_DIM * nk
        for l in range(nl):
            put(off + POINT_DIM * l, off + POINT_DIM * l, self.H_ll[l])
        for blk, k, l in zip(self.H_cl, self.obs_k, self.obs_l):
            put(POSE_DIM * k, off + POINT_DIM * l, blk)
            put(off + POINT_DIM * l, POSE_DIM * k, blk.T)
        if not rows:
            return scipy.sparse.csr_matrix((n, n))
        return scipy.sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()


def linearize(graph: FactorGraph) -> LinearSystem:
    """Gauss-Newton normal equations with per-factor Huber (IRLS) weights."""
    if not graph.fixed_keyframes:
        raise GraphError("gauge not fixed: mark at least one keyframe as fixed")
    graph.validate()
    kf_ids = graph.free_keyframes()
    kids, lids, meas, info = graph.observation_arrays()
    lm_ids = sorted(set(lids.tolist()))
    kf_index = {k: i for i, k in enumerate(kf_ids)}
    lm_index = {l: i for i, l in enumerate(lm_ids)}
    nk, nl = len(kf_ids), len(lm_ids)
    H_cc = np.zeros((nk, POSE_DIM, POSE_DIM))
    H_ll = np.zeros((nl, POINT_DIM, POINT_DIM))
    b_c = np.zeros((nk, POSE_DIM))
    b_l = np.zeros((nl, POINT_DIM))
    if len(kids) == 0:
        return LinearSystem(kf_ids, lm_ids, H_cc, H_ll, np.zeros((0, 6, 3)),
                            np.zeros(0, int), np.zeros(0, int), b_c, b_l)

    R, t = _pose_arrays(graph, kids)
    L = np.array([graph.landmarks[l].position for l in lids])
    p_rot = np.einsum("nij,nj->ni", R, L)
    e = meas - (p_rot + t)
    s = np.einsum("ni,nij,nj->n", e, info, e)
    w = huber_weight(s, graph.huber_delta)
    W = info * w[:, None, None]

    n = len(kids)
    J_pose = np.zeros((n, 3, POSE_DIM))
    x, y, z = p_rot[:, 0], p_rot[:, 1], p_rot[:, 2]
    J_pose[:, 0, 1], J_pose[:, 0, 2] = -z, y
    J_pose[:, 1, 0], J_pose[:, 1, 2] = z, -x
    J_pose[:, 2, 0], J_pose[:, 2, 1] = -y, x
    J_pose[:, :, 3:] = -np.eye(3)
    J_lm = -R

    JlT_W = np.einsum("nji,njk->nik", J_lm, W)
    li = np.array([lm_index[l] for l in lids])
    np.add.at(H_ll, li, np.einsum("nij,njk->nik", JlT_W, J_lm))
    np.add.at(b_l, li, -np.einsum("nij,nj->ni", JlT_W, e))

    free = np.array([k in kf_index for k in kids])
    ki = np.array([kf_index[k] for k in kids[free]], dtype=int)
    JpT_W = np.einsum("nji,njk->nik", J_pose[free], W[free])
    np.add.at(H_cc, ki, np.einsum("nij,njk->nik", JpT_W, J_pose[free]))
    np.add.at(b_c, ki, -np.einsum("nij,nj->ni", JpT_W, e[free]))
    H_cl = np.einsum("nij,njk->nik", JpT_W, J_lm[free])
    return LinearSystem(
        kf_ids, lm_ids, H_cc, H_ll, H_cl, ki, li[free], b_c, b_l,
        cost=float(np.sum(np.where(np.sqrt(s) <= graph.huber_delta, s,
                                   2 * graph.huber_delta * np.sqrt(s) - graph.huber_delta**2))),
    )


@dataclass
class ReducedSystem:
    """Reduced camera system ``I_P = H_cc - H_cl H_ll^-1 H_lc`` over free keyframes.

    ``pattern[a, b]`` is the structural block adjacency: diagonal blocks plus
    every keyframe pair that shares a landmark.
    """

    keyframe_ids: list[int]
    matrix: np.ndarray  # (6 nk, 6 nk)
    rhs: np.ndarray  # (6 nk,)
    pattern: np.ndarray  # (nk, nk) bool
    ill_conditioned_landmarks: list[int] = field(default_factory=list)

    def index(self, keyframe_id: int) -> int:
        try:
            return self.keyframe_ids.index(keyframe_id)
        except ValueError:
            raise KeyError(f"keyframe {keyframe_id} is not a free block of the reduced system")

    def block(self, a: int, b: int) -> np.ndarray:
        return self.matrix[6 * a : 6 * a + 6, 6 * b : 6 * b + 6]

    def adjacency(self) -> dict[int, set[int]]:
        n = len(self.keyframe_ids)
        return {a: {b for b in range(n) if b != a and self.pattern[a, b]} for a in range(n)}


def schur_reduce(sys: LinearSystem) -> ReducedSystem:
    nk, nl = len(sys.keyframe_ids), len(sys.landmark_ids)
    M = np.zeros((POSE_DIM * nk, POSE_DIM * nk))
    for k in range(nk):
        M[6 * k : 6 * k + 6, 6 * k : 6 * k + 6] = sys.H_cc[k]
    rhs = sys.b_c.ravel().copy()
    pattern = np.eye(nk, dtype=bool)
    flagged = []
    if nl:
        Hll = sys.H_ll + LANDMARK_REGULARIZER * np.eye(3)
        conds = np.linalg.cond(Hll)
        flagged = [sys.landmark_ids[i] for i in np.nonzero(~(conds <= CONDITION_LIMIT))[0]]
        if flagged:
            log.warning("%d landmarks have near-singular information blocks", len(flagged))
        Hll_inv = np.linalg.inv(Hll)
        # Y = H_cl H_ll^-1 per observation block
        Y = np.einsum("nij,njk->nik", sys.H_cl, Hll_inv[sys.obs_l])
        np.add.at(rhs.reshape(nk, 6), sys.obs_k, -np.einsum("nij,nj->ni", Y, sys.b_l[sys.obs_l]))
        order = np.argsort(sys.obs_l, kind="stable")
        bounds = np.searchsorted(sys.obs_l[order], np.arange(nl + 1))
        pa, pb = [], []
        for l in range(nl):
            idx = order[bounds[l] : bounds[l + 1]]
            if len(idx) == 0:
                continue
            a, b = np.meshgrid(idx, idx, indexing="ij")
            pa.append(a.ravel())
            pb.append(b.ravel())
        if pa:
            pa = np.concatenate(pa)
            pb = np.concatenate(pb)
            contrib = np.einsum("nij,nkj->nik", Y[pa], sys.H_cl[pb])
            ka, kb = sys.obs_k[pa], sys.obs_k[pb]
            M4 = M.reshape(nk, 6, nk, 6).transpose(0, 2, 1, 3).copy()
            np.add.at(M4, (ka, kb), -contrib)
            M = M4.transpose(0, 2, 1, 3).reshape(6 * nk, 6 * nk)
            pattern[ka, kb] = True
    M = 0.5 * (M + M.T)
    return ReducedSystem(list(sys.keyframe_ids), M, rhs, pattern, flagged)


def solve_reduced(sys: LinearSystem, red: ReducedSystem) -> tuple[np.ndarray, np.ndarray]:
    """Camera step from the reduced system, landmark step by back-substitution."""
    nk, nl = len(sys.keyframe_ids), len(sys.landmark_ids)
    if nk:
        try:
            c, low = scipy.linalg.cho_factor(red.matrix)
        except np.linalg.LinAlgError:
            raise SingularSystemError("reduced camera matrix is not positive definite") from None
        if np.min(np.abs(np.diag(c))) ** 2 < 1e-12 * np.max(np.abs(np.diag(red.matrix))):
            raise SingularSystemError("reduced camera matrix is numerically singular")
        dc = scipy.linalg.cho_solve((c, low), red.rhs).reshape(nk, 6)
    else:
        dc = np.zeros((0, 6))
    rhs_l = sys.b_l.copy()
    if len(sys.obs_k):
        np.add.at(rhs_l, sys.obs_l, -np.einsum("nji,nj->ni", sys.H_cl, dc[sys.obs_k]))
    Hll = sys.H_ll + LANDMARK_REGULARIZER * np.eye(3)
    dl = np.linalg.solve(Hll, rhs_l[..., None])[..., 0] if nl else np.zeros((0, 3))
    return dc, dl


def _apply_step(graph: FactorGraph, sys: LinearSystem, dc, dl, scale: float) -> FactorGraph:
    out = graph.copy()
    for k, kid in enumerate(sys.keyframe_ids):
        kf = out.keyframes[kid]
        kf.pose = retract_pose(kf.pose, scale * dc[k])
    for l, lid in enumerate(sys.landmark_ids):
        out.landmarks[lid].position = out.landmarks[lid].position + scale * dl[l]
    return out


def solve_gauss_newton(
    graph: FactorGraph, max_iters: int = 20, tol: float = 1e-10
) -> tuple[FactorGraph, bool]:
    """Iterate linearize -> reduced solve -> retract with step halving.

    Returns a new graph and whether the step norm fell below ``tol``.
    """
    current = graph.copy()
    cost = total_cost(current)
    for it in range(max_iters):
        sys = linearize(current)
        red = schur_reduce(sys)
        dc, dl = solve_reduced(sys, red)
        step = float(np.sqrt(np.sum(dc**2) + np.sum(dl**2)))
        if step < tol:
            log.debug("gauss-newton converged after %d iterations", it + 1)
            return current, True
        scale = 1.0
        for _ in range(12):
            candidate = _apply_step(current, sys, dc, dl, scale)
            new_cost = total_cost(candidate)
            if new_cost <= cost:
                break
            scale *= 0.5
        else:
            # no descent along the step: numerically at the optimum
            return current, step < 1e-6
        current, cost = candidate, new_cost
    return current, False
