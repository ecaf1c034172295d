"""Random keyframe/landmark graphs with chain or loop connectivity."""

from __future__ import annotations

import numpy as np

from ..geometry import RigidTransform, look_at
from .graph import FactorGraph


def random_graph(
    rng: np.random.Generator,
    n_keyframes: int,
    n_landmarks: int,
    topology: str = "chain",
    noise: float = 0.0,
    perturb: float = 0.0,
    window: tuple[int, int] = (2, 4),
) -> FactorGraph:
    """Keyframes on a line (``chain``) or circle (``loop``) looking outward.

    Landmark ``l`` is seeded near keyframe ``l % n`` and observed by a run of
    consecutive keyframes starting there; in a loop the runs wrap so the last
    keyframe connects back to the first. Keyframe 0 is fixed. ``perturb``
    jitters the initial poses and landmarks away from truth.
    """
    if topology not in ("chain", "loop"):
        raise ValueError(f"unknown topology {topology!r}")
    n = n_keyframes
    g = FactorGraph()
    true_T_GK = []
    for k in range(n):
        if topology == "loop":
            a = 2 * np.pi * k / n
            pos = np.array([3 * np.cos(a), 3 * np.sin(a), 0.1 * rng.standard_normal()])
            tgt = pos * 2.0
        else:
            pos = np.array([0.8 * k, 0.1 * rng.standard_normal(), 0.1 * rng.standard_normal()])
            tgt = pos + np.array([0.0, 3.0, 0.0])
        tgt = tgt + 0.3 * rng.standard_normal(3)
        true_T_GK.append(look_at(pos, tgt, up=(0, 0, 1)))
    truth_L = {}
    for l in range(n_landmarks):
        c = l % n
        T = true_T_GK[c]
        p_cam = np.array([rng.uniform(-1.5, 1.5), rng.uniform(-1.0, 1.0), rng.uniform(2.0, 5.0)])
        truth_L[l] = T.apply(p_cam)
    for k in range(n):
        T = true_T_GK[k]
        if k > 0 and perturb > 0:
            T = RigidTransform.from_axis_angle(perturb * 0.1 * rng.standard_normal(3),
                                               perturb * rng.standard_normal(3)) @ T
        g.add_keyframe(k, T.inverse(), fixed=(k == 0))
    for l, p in truth_L.items():
        g.add_landmark(l, p + perturb * rng.standard_normal(3))
        c = l % n
        span = int(rng.integers(window[0], window[1] + 1))
        for s in range(span):
            k = c + s
            if k >= n:
                if topology == "chain":
                    break
                k -= n
            T_KG = true_T_GK[k].inverse()
            sig = rng.uniform(0.005, 0.02, 3)
            meas = T_KG.apply(p) + noise * sig * rng.standard_normal(3)
            g.keyframes[k].observe(l, meas, np.diag(sig**2))
    return g
