"""Synthetic multi-agent scenes: random vehicle boxes, per-agent simulated LiDAR.

The generator stands in for a recorded dataset. It produces seed-deterministic
scenes with static sensor agents and constant-velocity vehicle boxes, and a
simple LiDAR model that samples visible box faces (with azimuthal occlusion)
plus a ground annulus. Pairing a full-density sweep with any subsampled sweep
of the same scene yields sparse/dense training material.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import PointCloud, RigidTransform, _normalize_yaw


class GenerationError(RuntimeError):
    """Random placement could not satisfy the scene constraints."""


@dataclass(frozen=True)
class BoxLabel:
    """Oriented vehicle box: center (m), size as length/width/height (m), yaw, planar velocity (m/s)."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError("box size components must be > 0")

    def advanced(self, dt: float) -> "BoxLabel":
        """Box after moving for `dt` seconds at constant velocity."""
        cx, cy, cz = self.center
        vx, vy = self.velocity
        return BoxLabel((cx + vx * dt, cy + vy * dt, cz), self.size, self.yaw, self.velocity)


def transform_box(box: BoxLabel, t: RigidTransform) -> BoxLabel:
    """Express a box in another frame. Velocity rotates with the frame."""
    cx, cy, cz = t.apply_point(box.center)
    c, s = math.cos(t.yaw), math.sin(t.yaw)
    vx, vy = box.velocity
    return BoxLabel(
        (cx, cy, cz),
        box.size,
        _normalize_yaw(box.yaw + t.yaw),
        (c * vx - s * vy, s * vx + c * vy),
    )


@dataclass(frozen=True)
class SceneParams:
    """Generation and sensor-model knobs, carried by the scene so simulation is reproducible."""

    agents: int = 3
    boxes: int = 12
    bounds: float = 80.0           # square side in meters, scene centered at the origin
    frames: int = 1
    frame_period_ms: float = 100.0
    sensor_height: float = 1.8
    range_limit: float = 48.0
    azimuth_bin_deg: float = 0.2
    ground_inner_radius: float = 2.0
    ground_density_scale: float = 2.5
    ground_z_sigma: float = 0.02
    speed_min: float = 0.0
    speed_max: float = 8.0

    def validate(self) -> None:
        if self.agents < 2:
            raise ValueError("scene.agents: need at least 2 agents")
        if self.boxes < 0:
            raise ValueError("scene.boxes: must be >= 0")
        if self.bounds <= 0:
            raise ValueError("scene.bounds: must be > 0")
        if self.frames < 1:
            raise ValueError("scene.frames: must be >= 1")
        if self.frame_period_ms <= 0:
            raise ValueError("scene.frame_period_ms: must be > 0")
        if self.range_limit <= self.ground_inner_radius:
            raise ValueError("scene.range_limit: must exceed ground_inner_radius")
        if self.azimuth_bin_deg <= 0:
            raise ValueError("scene.azimuth_bin_deg: must be > 0")
        if not 0 <= self.speed_min <= self.speed_max:
            raise ValueError("scene.speed_min/speed_max: need 0 <= min <= max")


@dataclass(frozen=True)
class Scene:
    params: SceneParams
    seed: int
    agent_ids: tuple[str, ...]
    trajectories: dict[str, tuple[RigidTransform, ...]]  # world <- agent, one pose per frame
    boxes: tuple[BoxLabel, ...]                          # labels at frame 0

    @property
    def frames(self) -> int:
        return self.params.frames

    def pose(self, agent_id: str, frame: int) -> RigidTransform:
        self._check(agent_id, frame)
        return self.trajectories[agent_id][frame]

    def boxes_at(self, frame: int) -> list[BoxLabel]:
        if not 0 <= frame < self.frames:
            raise ValueError(f"frame {frame} out of range [0, {self.frames})")
        dt = frame * self.params.frame_period_ms / 1000.0
        return [b.advanced(dt) for b in self.boxes]

    def agent_index(self, agent_id: str) -> int:
        self._check(agent_id, 0)
        return self.agent_ids.index(agent_id)

    def _check(self, agent_id: str, frame: int) -> None:
        if agent_id not in self.trajectories:
            raise ValueError(f"unknown agent {agent_id!r}")
        if not 0 <= frame < self.frames:
            raise ValueError(f"frame {frame} out of range [0, {self.frames})")


def _point_in_footprint(x: float, y: float, box: BoxLabel, margin: float) -> bool:
    dx = x - box.center[0]
    dy = y - box.center[1]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return abs(u) <= box.size[0] / 2 + margin and abs(v) <= box.size[1] / 2 + margin


def generate_scene(params: SceneParams, seed: int) -> Scene:
    """Place agents and moving boxes at random, deterministically per seed."""
    params.validate()
    if seed < 0:
        raise ValueError("scene seed must be >= 0")
    rng = np.random.default_rng(seed)
    half = params.bounds / 2.0

    agent_margin = min(0.25 * params.bounds, half)
    poses: list[RigidTransform] = []
    for i in range(params.agents):
        for _ in range(200):
            x = float(rng.uniform(-half + agent_margin, half - agent_margin))
            y = float(rng.uniform(-half + agent_margin, half - agent_margin))
            yaw = float(rng.uniform(-math.pi, math.pi))
            if all(math.hypot(x - p.tx, y - p.ty) >= 4.0 for p in poses):
                poses.append(RigidTransform(yaw, x, y, 0.0))
                break
        else:
            raise GenerationError(f"could not place agent {i} after 200 attempts")

    boxes: list[BoxLabel] = []
    for b in range(params.boxes):
        for _ in range(200):
            cx = float(rng.uniform(-half + 1.0, half - 1.0))
            cy = float(rng.uniform(-half + 1.0, half - 1.0))
            yaw = float(rng.uniform(-math.pi, math.pi))
            length = float(rng.uniform(3.8, 5.2))
            width = float(rng.uniform(1.7, 2.1))
            height = float(rng.uniform(1.4, 1.8))
            speed = float(rng.uniform(params.speed_min, params.speed_max))
            box = BoxLabel(
                (cx, cy, height / 2.0),
                (length, width, height),
                yaw,
                (speed * math.cos(yaw), speed * math.sin(yaw)),
            )
            if not any(_point_in_footprint(p.tx, p.ty, box, 0.5) for p in poses):
                boxes.append(box)
                break
        else:
            raise GenerationError(f"could not place box {b} after 200 attempts")

    agent_ids = tuple(f"a{i}" for i in range(params.agents))
    trajectories = {
        aid: tuple(poses[i] for _ in range(params.frames)) for i, aid in enumerate(agent_ids)
    }
    return Scene(params, seed, agent_ids, trajectories, tuple(boxes))


# ---------------------------------------------------------------------------
# LiDAR simulation

_SIDE_FACES = (
    (0, 1.0),   # +length axis
    (0, -1.0),  # -length axis
    (1, 1.0),   # +width axis
    (1, -1.0),  # -width axis
)


def _sample_box_points(
    box: BoxLabel, sensor: np.ndarray, density: float, range_limit: float, rng: np.random.Generator
) -> np.ndarray:
    """Uniform samples on the faces of `box` visible from `sensor`, nudged inward.

    The inward nudge keeps simulated hits strictly inside the box so that
    half-open containment labeling is stable.
    """
    length, width, height = box.size
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    axes = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # box u, v, w in world
    center = np.asarray(box.center)

    if math.hypot(center[0] - sensor[0], center[1] - sensor[1]) > range_limit + math.hypot(length, width):
        return np.empty((0, 4))

    chunks = []
    faces = list(_SIDE_FACES) + [(2, 1.0)]  # sides plus the roof
    for axis, sign in faces:
        normal = sign * axes[axis]
        half = box.size[axis] / 2.0
        face_center = center + normal * half
        if float(np.dot(sensor - face_center, normal)) <= 0.0:
            continue
        d1, d2 = [box.size[a] for a in range(3) if a != axis]
        a1, a2 = [axes[a] for a in range(3) if a != axis]
        count = int(round(d1 * d2 * density))
        if count <= 0:
            continue
        u = rng.uniform(-d1 / 2.0, d1 / 2.0, count)
        v = rng.uniform(-d2 / 2.0, d2 / 2.0, count)
        eps = rng.uniform(0.01, 0.04, count)
        pts = face_center + np.outer(u, a1) + np.outer(v, a2) - np.outer(eps, normal)
        inten = rng.uniform(0.2, 0.8, count)
        chunks.append(np.column_stack([pts, inten]))
    if not chunks:
        return np.empty((0, 4))
    return np.concatenate(chunks)


def _occlude(
    points: np.ndarray, owners: np.ndarray, sensor: np.ndarray, bin_deg: float, range_limit: float
) -> np.ndarray:
    """Keep points whose box wins its azimuth bin (closest hit wins the bin)."""
    rel = points[:, :2] - sensor[:2]
    dist = np.hypot(rel[:, 0], rel[:, 1])
    in_range = dist <= range_limit
    az = np.arctan2(rel[:, 1], rel[:, 0])
    n_bins = int(math.ceil(360.0 / bin_deg))
    bins = np.clip(((az + math.pi) / math.radians(bin_deg)).astype(np.int64), 0, n_bins - 1)

    order = np.lexsort((dist, bins))
    sorted_bins = bins[order]
    first = np.unique(sorted_bins, return_index=True)[1]
    winner = np.full(n_bins, -1, dtype=np.int64)
    winner[sorted_bins[first]] = owners[order][first]
    return in_range & (winner[bins] == owners)


def simulate_lidar(scene: Scene, agent_id: str, frame: int, density: float) -> PointCloud:
    """Simulate one LiDAR sweep, in the agent's own frame.

    Point count scales with `density` (points per square meter of sampled
    surface). Deterministic per (scene seed, agent, frame, density).
    """
    scene._check(agent_id, frame)
    if density <= 0:
        raise ValueError("density must be > 0")
    p = scene.params
    pose = scene.pose(agent_id, frame)
    sensor = np.array([pose.tx, pose.ty, p.sensor_height])
    rng = np.random.default_rng(
        np.random.SeedSequence(
            [scene.seed, scene.agent_index(agent_id), frame, int(round(density * 1e6))]
        )
    )

    box_chunks = []
    box_owner = []
    for bi, box in enumerate(scene.boxes_at(frame)):
        pts = _sample_box_points(box, sensor, density, p.range_limit, rng)
        if len(pts):
            box_chunks.append(pts)
            box_owner.append(np.full(len(pts), bi, dtype=np.int64))

    parts = []
    if box_chunks:
        box_pts = np.concatenate(box_chunks)
        owners = np.concatenate(box_owner)
        keep = _occlude(box_pts, owners, sensor, p.azimuth_bin_deg, p.range_limit)
        parts.append(box_pts[keep])

    annulus_area = math.pi * (p.range_limit**2 - p.ground_inner_radius**2)
    n_ground = int(round(annulus_area * density * p.ground_density_scale))
    if n_ground > 0:
        r = np.sqrt(rng.uniform(p.ground_inner_radius**2, p.range_limit**2, n_ground))
        th = rng.uniform(-math.pi, math.pi, n_ground)
        gz = rng.normal(0.0, p.ground_z_sigma, n_ground)
        gi = rng.uniform(0.0, 0.3, n_ground)
        ground = np.column_stack([sensor[0] + r * np.cos(th), sensor[1] + r * np.sin(th), gz, gi])
        # vehicle bodies hide the ground beneath them
        keep = np.ones(n_ground, dtype=bool)
        for box in scene.boxes_at(frame):
            dx = ground[:, 0] - box.center[0]
            dy = ground[:, 1] - box.center[1]
            c, s = math.cos(box.yaw), math.sin(box.yaw)
            u = c * dx + s * dy
            v = -s * dx + c * dy
            keep &= (np.abs(u) > box.size[0] / 2) | (np.abs(v) > box.size[1] / 2)
        parts.append(ground[keep])

    if not parts:
        return PointCloud.empty(agent_id)
    world = np.concatenate(parts)
    inv = pose.invert()
    local = np.column_stack([inv.apply(world[:, :3]), world[:, 3]])
    return PointCloud(local, agent_id)


def label_foreground(cloud: PointCloud, boxes: list[BoxLabel] | tuple[BoxLabel, ...]) -> np.ndarray:
    """Per-point score: 1.0 inside any box, else 0.0.

    Containment is half-open on every axis (lower face in, upper face out),
    so a point exactly on a +face does not count as inside.
    """
    scores = np.zeros(cloud.n)
    if cloud.n == 0:
        return scores
    xyz = cloud.xyz
    for box in boxes:
        cx, cy, cz = box.center
        length, width, height = box.size
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        dx = xyz[:, 0] - cx
        dy = xyz[:, 1] - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        z = xyz[:, 2]
        inside = (
            (u >= -length / 2) & (u < length / 2)
            & (v >= -width / 2) & (v < width / 2)
            & (z >= cz - height / 2) & (z < cz + height / 2)
        )
        scores[inside] = 1.0
    return scores


# ---------------------------------------------------------------------------
# JSON serialization

def scene_to_dict(scene: Scene) -> dict:
    return {
        "params": asdict(scene.params),
        "seed": scene.seed,
        "agent_ids": list(scene.agent_ids),
        "trajectories": {
            aid: [[t.yaw, t.tx, t.ty, t.tz] for t in traj]
            for aid, traj in scene.trajectories.items()
        },
        "boxes": [
            {
                "center": list(b.center),
                "size": list(b.size),
                "yaw": b.yaw,
                "velocity": list(b.velocity),
            }
            for b in scene.boxes
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    params = SceneParams(**d["params"])
    boxes = tuple(
        BoxLabel(tuple(b["center"]), tuple(b["size"]), b["yaw"], tuple(b["velocity"]))
        for b in d["boxes"]
    )
    trajectories = {
        aid: tuple(RigidTransform(*pose) for pose in traj)
        for aid, traj in d["trajectories"].items()
    }
    return Scene(params, d["seed"], tuple(d["agent_ids"]), trajectories, boxes)


def save_scene(path: str, scene: Scene) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, sort_keys=True, indent=1)
        f.write("\n")


def load_scene(path: str) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))
