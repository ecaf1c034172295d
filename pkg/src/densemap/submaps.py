"""The submap collection: spawning, frame integration, and rigid re-posing."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

from .geometry import DepthFrame, RigidTransform, depth_to_pointcloud, relative_transform
from .integrator import IntegrationStats, Integrator
from .tsdf import Submap, load_submaps, save_submaps

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"
SUBMAPS_NAME = "submaps.cblx"


@dataclass
class SpawnPolicy:
    max_keyframes_per_submap: int = 5
    translation_threshold: float = 0.05  # meters
    rotation_threshold: float = 0.02  # radians

    def __post_init__(self) -> None:
        if self.max_keyframes_per_submap < 1:
            raise ValueError("max_keyframes_per_submap must be >= 1")


class SubmapCollection:
    def __init__(self, voxel_size: float, block_size: int = 16):
        self.voxel_size = voxel_size
        self.block_size = block_size
        self.submaps: dict[int, Submap] = {}
        self.active_id: int | None = None
        self._next_id = 0
        self.created = 0

    def __len__(self) -> int:
        return len(self.submaps)

    def __iter__(self) -> Iterator[Submap]:
        return iter(self.submaps.values())

    def __getitem__(self, id: int) -> Submap:
        return self.submaps[id]

    @property
    def active(self) -> Submap:
        if self.active_id is None:
            raise RuntimeError("no active submap")
        return self.submaps[self.active_id]

    def total_blocks(self) -> int:
        return sum(s.block_count() for s in self)

    def spawn(self, anchor_keyframe: int, T_G_keyframe: RigidTransform) -> int:
        sid = self._next_id
        self._next_id += 1
        self.created += 1
        self.submaps[sid] = Submap(
            sid, T_G_keyframe, self.voxel_size, self.block_size, anchor_keyframe
        )
        self.active_id = sid
        return sid

    def add_keyframe(self, keyframe_id: int) -> None:
        self.active.contributing_keyframes.append(keyframe_id)

    def remove(self, id: int) -> Submap:
        if id == self.active_id:
            raise ValueError("cannot remove the active submap")
        return self.submaps.pop(id)

    def integrate_points(
        self, points, colors, T_G_camera: RigidTransform, integrator: Integrator, mode=None
    ) -> IntegrationStats:
        active = self.active
        T_MC = relative_transform(active.frame, T_G_camera)
        return integrator.integrate(active, points, colors, T_MC, mode=mode)

    def integrate_frame(
        self, frame: DepthFrame, T_G_camera: RigidTransform, integrator: Integrator, mode=None
    ) -> IntegrationStats:
        points, colors = depth_to_pointcloud(frame)
        return self.integrate_points(points, colors, T_G_camera, integrator, mode)

    def update_poses(self, corrections: Mapping[int, RigidTransform]) -> int:
        """Replace each submap frame by its anchor keyframe's corrected pose."""
        updated = 0
        for s in self:
            pose = corrections.get(s.anchor_keyframe)
            if pose is None:
                continue
            s.frame = pose
            updated += 1
        missing = len(self) - updated
        if missing and corrections:
            log.debug("%d submaps had no correction for their anchor", missing)
        return updated


def integrate_frame(coll: SubmapCollection, frame: DepthFrame, T_G_camera, integrator, mode=None):
    return coll.integrate_frame(frame, T_G_camera, integrator, mode)


def spawn_submap(coll: SubmapCollection, anchor_keyframe: int, T_G_keyframe) -> int:
    return coll.spawn(anchor_keyframe, T_G_keyframe)


def should_spawn(
    coll: SubmapCollection | None,
    policy: SpawnPolicy,
    keyframes_in_active: int,
    pose_correction_magnitude: tuple[float, float] = (0.0, 0.0),
) -> bool:
    if coll is not None and coll.active_id is None:
        return True
    meters, radians = pose_correction_magnitude
    return (
        keyframes_in_active >= policy.max_keyframes_per_submap
        or meters > policy.translation_threshold
        or radians > policy.rotation_threshold
    )


def update_submap_poses(coll: SubmapCollection, corrections: Mapping[int, RigidTransform]) -> int:
    return coll.update_poses(corrections)


# -- persistence -------------------------------------------------------------


def write_manifest(path: str | Path, coll: SubmapCollection) -> None:
    lines = []
    for s in coll:
        anchor = -1 if s.anchor_keyframe is None else s.anchor_keyframe
        pose = " ".join(repr(v) for v in s.frame.to_xyzquat())
        lines.append(f"{s.id} {anchor} {pose}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path: str | Path) -> list[tuple[int, int | None, RigidTransform]]:
    entries = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 9:
            raise ValueError(f"{path}:{lineno}: expected 9 fields, got {len(parts)}")
        anchor = int(parts[1])
        entries.append(
            (int(parts[0]), None if anchor < 0 else anchor, RigidTransform.from_xyzquat(parts[2:]))
        )
    return entries


def save_collection(directory: str | Path, coll: SubmapCollection) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_submaps(directory / SUBMAPS_NAME, coll)
    write_manifest(directory / MANIFEST_NAME, coll)


def load_collection(manifest: str | Path) -> SubmapCollection:
    """Load a collection from its manifest; the submap file sits next to it."""
    manifest = Path(manifest)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    entries = read_manifest(manifest)
    submaps = load_submaps(manifest.parent / SUBMAPS_NAME) if entries else []
    if len(submaps) != len(entries):
        raise ValueError("manifest and submap file disagree on submap count")
    if not submaps:
        return SubmapCollection(0.02)
    coll = SubmapCollection(submaps[0].voxel_size, submaps[0].block_size)
    for (sid, anchor, frame), s in zip(entries, submaps):
        s.id = sid
        s.anchor_keyframe = anchor
        s.frame = frame
        coll.submaps[sid] = s
    coll._next_id = max(coll.submaps) + 1
    coll.created = len(coll.submaps)
    return coll
