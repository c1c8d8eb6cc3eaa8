"""Rigid 4-DoF transforms, point clouds, pose noise, and ICP registration.

Transforms are yaw-about-z plus a 3D translation; driving scenes are close
enough to planar that full SO(3) is never needed here.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree


class Point3(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float = 0.0


def _normalize_yaw(yaw: float) -> float:
    # remainder() lands in [-pi, pi]; shift the -pi edge so the range is (-pi, pi]
    w = math.remainder(yaw, math.tau)
    if w <= -math.pi:
        w += math.tau
    return w


@dataclass(frozen=True)
class RigidTransform:
    """Rotation about z by `yaw`, then translation by (tx, ty, tz)."""

    yaw: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        if not all(map(math.isfinite, (self.yaw, self.tx, self.ty, self.tz))):
            raise ValueError("transform parameters must be finite")
        object.__setattr__(self, "yaw", _normalize_yaw(self.yaw))

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform()

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `other` first, then `self`."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return RigidTransform(
            yaw=self.yaw + other.yaw,
            tx=self.tx + c * other.tx - s * other.ty,
            ty=self.ty + s * other.tx + c * other.ty,
            tz=self.tz + other.tz,
        )

    def invert(self) -> "RigidTransform":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return RigidTransform(
            yaw=-self.yaw,
            tx=-(c * self.tx + s * self.ty),
            ty=-(-s * self.tx + c * self.ty),
            tz=-self.tz,
        )

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        """Apply to an (N, 3) array of points."""
        xyz = np.asarray(xyz, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = np.empty_like(xyz)
        out[:, 0] = c * xyz[:, 0] - s * xyz[:, 1] + self.tx
        out[:, 1] = s * xyz[:, 0] + c * xyz[:, 1] + self.ty
        out[:, 2] = xyz[:, 2] + self.tz
        return out

    def apply_point(self, p: Sequence[float]) -> tuple[float, float, float]:
        out = self.apply(np.asarray([p], dtype=np.float64))[0]
        return float(out[0]), float(out[1]), float(out[2])


@dataclass(frozen=True)
class PointCloud:
    """(N, 4) array of x, y, z, intensity rows expressed in a named agent frame.

    The backing array is made read-only so clouds behave as immutable values.
    """

    points: np.ndarray
    frame: str = "world"

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"points must have shape (N, 4), got {pts.shape}")
        if pts.size:
            if not np.isfinite(pts).all():
                raise ValueError("point coordinates must be finite")
            if pts[:, 3].min() < 0.0 or pts[:, 3].max() > 1.0:
                raise ValueError("intensity must lie in [0, 1]")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_points(cls, points: Sequence[Point3], frame: str = "world") -> "PointCloud":
        arr = np.asarray([tuple(p) for p in points], dtype=np.float64).reshape(-1, 4)
        return cls(arr, frame)

    @classmethod
    def empty(cls, frame: str = "world") -> "PointCloud":
        return cls(np.empty((0, 4)), frame)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def point(self, i: int) -> Point3:
        return Point3(*self.points[i])

    def select(self, indices: np.ndarray) -> "PointCloud":
        return PointCloud(self.points[np.asarray(indices, dtype=np.int64)], self.frame)


def transform_cloud(cloud: PointCloud, t: RigidTransform, frame: str | None = None) -> PointCloud:
    """Rotate/translate every point; intensity is untouched. `frame` relabels the output."""
    out = np.empty_like(cloud.points)
    out[:, :3] = t.apply(cloud.xyz)
    out[:, 3] = cloud.intensity
    return PointCloud(out, cloud.frame if frame is None else frame)


def concat_clouds(clouds: Sequence[PointCloud], frame: str | None = None) -> PointCloud:
    if not clouds:
        raise ValueError("need at least one cloud to concatenate")
    frames = {c.frame for c in clouds}
    if frame is None:
        if len(frames) > 1:
            raise ValueError(f"clouds are in different frames: {sorted(frames)}")
        frame = clouds[0].frame
    return PointCloud(np.concatenate([c.points for c in clouds]), frame)


def perturb_pose(
    t: RigidTransform, sigma_trans: float, sigma_rot: float, seed: int
) -> RigidTransform:
    """Add zero-mean Gaussian noise to tx, ty and yaw. tz is left alone.

    Deterministic per (t, sigma_trans, sigma_rot, seed).
    """
    if sigma_trans < 0 or sigma_rot < 0:
        raise ValueError("noise standard deviations must be >= 0")
    rng = np.random.default_rng(seed)
    dx = rng.normal(0.0, sigma_trans)
    dy = rng.normal(0.0, sigma_trans)
    dyaw = rng.normal(0.0, sigma_rot)
    return RigidTransform(t.yaw + dyaw, t.tx + dx, t.ty + dy, t.tz)


def nearest_indices(targets: np.ndarray, queries: np.ndarray, method: str = "kdtree") -> np.ndarray:
    """Index of the nearest target point for each query point.

    The k-d tree and brute-force paths must agree exactly; the brute path
    exists as the correctness oracle for tests.
    """
    targets = np.asarray(targets, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if method == "kdtree":
        _, idx = cKDTree(targets).query(queries)
        return np.asarray(idx, dtype=np.int64)
    if method == "brute":
        d2 = ((queries[:, None, :] - targets[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1).astype(np.int64)
    raise ValueError(f"unknown method {method!r}")


def _fit_yaw_translation(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Closed-form least-squares yaw + translation from paired points.

    Yaw comes from the centered 2D cross-covariance; translation aligns the
    centroids after rotation, with z handled independently.
    """
    ms = src.mean(axis=0)
    md = dst.mean(axis=0)
    a = src[:, :2] - ms[:2]
    b = dst[:, :2] - md[:2]
    sxx = float(np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    sxy = float(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]))
    yaw = math.atan2(sxy, sxx)
    c, s = math.cos(yaw), math.sin(yaw)
    tx = md[0] - (c * ms[0] - s * ms[1])
    ty = md[1] - (s * ms[0] + c * ms[1])
    tz = md[2] - ms[2]
    return RigidTransform(yaw, tx, ty, tz)


def icp_align(
    source: PointCloud,
    target: PointCloud,
    max_iters: int = 50,
    tol: float = 1e-10,
) -> RigidTransform:
    """Estimate the transform mapping `source` onto `target`.

    Alternates exact nearest-neighbor correspondence with the closed-form
    yaw/translation update until the mean squared correspondence error
    improves by less than `tol` or `max_iters` is hit. Starts from the
    identity, so callers should pre-apply any coarse pose estimate.
    """
    if source.n == 0 or target.n == 0:
        raise ValueError("icp_align requires non-empty source and target clouds")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    tree = cKDTree(target.xyz)
    t = RigidTransform.identity()
    prev_mse = math.inf
    src0 = source.xyz
    for _ in range(max_iters):
        src = t.apply(src0)
        dist, idx = tree.query(src)
        mse = float(np.mean(dist**2))
        if prev_mse - mse < tol:
            break
        prev_mse = mse
        t = _fit_yaw_translation(src, target.xyz[idx]).compose(t)
    return t


# ---------------------------------------------------------------------------
# File formats. Binary layout: b"CPCD", version u8=1, u32 point count, then
# four little-endian f32 per point (x, y, z, intensity). The frame label is
# not stored; readers assign one.

CLOUD_MAGIC = b"CPCD"
CLOUD_VERSION = 1


def write_cloud(path: str, cloud: PointCloud) -> None:
    with open(path, "wb") as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack("<BI", CLOUD_VERSION, cloud.n))
        f.write(np.ascontiguousarray(cloud.points, dtype="<f4").tobytes())


def read_cloud(path: str, frame: str = "unknown") -> PointCloud:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CLOUD_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {CLOUD_MAGIC!r}")
    version, n = struct.unpack_from("<BI", blob, 4)
    if version != CLOUD_VERSION:
        raise ValueError(f"{path}: unsupported cloud format version {version}")
    expected = 9 + 16 * n
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated cloud file ({len(blob)} bytes, expected {expected})")
    pts = np.frombuffer(blob, dtype="<f4", count=4 * n, offset=9)
    return PointCloud(pts.reshape(n, 4).astype(np.float64), frame)


def write_cloud_csv(path: str, cloud: PointCloud) -> None:
    """Debug-friendly CSV twin of the binary format."""
    with open(path, "w") as f:
        f.write("x,y,z,intensity\n")
        for row in cloud.points:
            f.write(",".join(repr(float(v)) for v in row) + "\n")


def read_cloud_csv(path: str, frame: str = "unknown") -> PointCloud:
    with open(path) as f:
        header = f.readline().strip()
        if header != "x,y,z,intensity":
            raise ValueError(f"{path}: unexpected CSV header {header!r}")
        rows = [line.split(",") for line in f if line.strip()]
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 4)
    return PointCloud(arr, frame)
