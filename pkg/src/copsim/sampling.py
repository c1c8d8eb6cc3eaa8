"""Saliency-split point sampling and message assembly with volume accounting.

Foreground points (score above the threshold) are subsampled with farthest
point sampling to keep object structure; the much larger background set is
subsampled uniformly. The transmitted message counts four 32-bit elements per
point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import PointCloud, RigidTransform
from .scenegen import BoxLabel, label_foreground

_REGIONS = ("all", "fg_only", "fg_sur", "bg_only")


@dataclass(frozen=True)
class SamplingPolicy:
    tau_s: float = 0.5
    r_fg: float = 0.2
    r_bg: float = 0.1
    fg_method: str = "farthest"   # farthest | random
    bg_method: str = "random"
    region: str = "all"           # all | fg_only | fg_sur | bg_only
    sur_radius: float = 2.0       # used by fg_sur only

    def __post_init__(self):
        if not 0.0 <= self.tau_s <= 1.0:
            raise ValueError("sampling.tau_s: must lie in [0, 1]")
        if not 0.0 < self.r_fg <= 1.0:
            raise ValueError("sampling.r_fg: must lie in (0, 1]")
        if not 0.0 < self.r_bg <= 1.0:
            raise ValueError("sampling.r_bg: must lie in (0, 1]")
        if self.fg_method not in ("farthest", "random"):
            raise ValueError(f"sampling.fg_method: unknown method {self.fg_method!r}")
        if self.bg_method != "random":
            raise ValueError(f"sampling.bg_method: unknown method {self.bg_method!r}")
        if self.region not in _REGIONS:
            raise ValueError(f"sampling.region: unknown region {self.region!r}")
        if self.sur_radius <= 0:
            raise ValueError("sampling.sur_radius: must be > 0")

    @property
    def lossless(self) -> bool:
        return self.r_fg == 1.0 and self.r_bg == 1.0 and self.region == "all"


@dataclass(frozen=True)
class Message:
    """Sampled cloud plus the sender's reported pose and capture frame."""

    cloud: PointCloud
    sender_pose: RigidTransform
    frame: int
    element_count: int

    def __post_init__(self):
        if self.element_count != 4 * self.cloud.n:
            raise ValueError(
                f"element_count {self.element_count} != 4 x {self.cloud.n} points"
            )


def score_points(
    cloud: PointCloud,
    scorer: str = "oracle",
    boxes: list[BoxLabel] | tuple[BoxLabel, ...] | None = None,
) -> np.ndarray:
    """Per-point saliency in [0, 1].

    "oracle" labels points by ground-truth box containment and needs `boxes`.
    "heuristic" combines height above ground with local point density; it is
    deliberately crude and only has to keep pure ground below the threshold.
    """
    if cloud.n == 0:
        return np.zeros(0)
    if scorer == "oracle":
        if boxes is None:
            raise ValueError("oracle scorer requires ground-truth boxes")
        return label_foreground(cloud, boxes)
    if scorer == "heuristic":
        height = np.minimum(np.maximum(cloud.xyz[:, 2], 0.0) / 1.5, 1.0)
        counts = cKDTree(cloud.xyz).query_ball_point(cloud.xyz, r=1.0, return_length=True)
        dens = np.minimum(np.asarray(counts, dtype=np.float64) / 32.0, 1.0)
        return np.clip(0.7 * height + 0.3 * dens, 0.0, 1.0)
    raise ValueError(f"unknown scorer {scorer!r}")


def partition(cloud: PointCloud, scores: np.ndarray, tau_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Split indices into (foreground, background) by strict threshold comparison."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (cloud.n,):
        raise ValueError(f"scores length {scores.shape} does not match cloud size {cloud.n}")
    fg_mask = scores > tau_s
    return np.flatnonzero(fg_mask), np.flatnonzero(~fg_mask)


def fps(points: PointCloud, count: int) -> np.ndarray:
    """Greedy farthest-point sampling over (x, y, z).

    Seeds at index 0; each step adds the point maximizing the minimum distance
    to the selected set, ties broken toward the lowest index. Returns indices
    in selection order.
    """
    n = points.n
    if not 0 <= count <= n:
        raise ValueError(f"count {count} out of range [0, {n}]")
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    xyz = points.xyz
    selected = np.empty(count, dtype=np.int64)
    selected[0] = 0
    if count == 1:
        return selected
    min_d2 = ((xyz - xyz[0]) ** 2).sum(axis=1)
    min_d2[0] = -1.0  # already selected; never a candidate again
    for k in range(1, count):
        nxt = int(np.argmax(min_d2))
        selected[k] = nxt
        d2 = ((xyz - xyz[nxt]) ** 2).sum(axis=1)
        np.minimum(min_d2, d2, out=min_d2)
        min_d2[nxt] = -1.0
    return selected


def rps(points: PointCloud, count: int, seed: int) -> np.ndarray:
    """Uniform sampling without replacement, sorted ascending, deterministic per seed."""
    n = points.n
    if not 0 <= count <= n:
        raise ValueError(f"count {count} out of range [0, {n}]")
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=count, replace=False)
    return np.sort(idx).astype(np.int64)


def _ceil_ratio(ratio: float, n: int) -> int:
    # round() guards against float products like 0.2 * 100 = 20.000000000000004
    return min(n, int(math.ceil(round(ratio * n, 9))))


def _apply_region(
    cloud: PointCloud, fg: np.ndarray, bg: np.ndarray, policy: SamplingPolicy
) -> tuple[np.ndarray, np.ndarray]:
    if policy.region == "all":
        return fg, bg
    if policy.region == "fg_only":
        return fg, bg[:0]
    if policy.region == "bg_only":
        return fg[:0], bg
    # fg_sur: background survives only near some foreground point
    if len(fg) == 0 or len(bg) == 0:
        return fg, bg[:0]
    d, _ = cKDTree(cloud.xyz[fg]).query(cloud.xyz[bg])
    return fg, bg[d <= policy.sur_radius]


def sample_message(
    cloud: PointCloud,
    scores: np.ndarray,
    policy: SamplingPolicy,
    sender_pose: RigidTransform,
    frame: int,
    seed: int,
) -> Message:
    """Subsample a cloud per policy and wrap it as a transmissible message.

    The sampled cloud keeps the original point order (union of the selected
    foreground and background indices, sorted).
    """
    fg, bg = partition(cloud, scores, policy.tau_s)
    fg, bg = _apply_region(cloud, fg, bg, policy)
    fg_seed, bg_seed = (int(x) for x in np.random.SeedSequence(seed).generate_state(2))

    picks = []
    if len(fg):
        k = _ceil_ratio(policy.r_fg, len(fg))
        sub = cloud.select(fg)
        sel = fps(sub, k) if policy.fg_method == "farthest" else rps(sub, k, fg_seed)
        picks.append(fg[sel])
    if len(bg):
        k = _ceil_ratio(policy.r_bg, len(bg))
        picks.append(bg[rps(cloud.select(bg), k, bg_seed)])

    idx = np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)
    sampled = cloud.select(idx)
    return Message(sampled, sender_pose, frame, element_count=4 * sampled.n)


def comm_volume(element_count: int) -> float:
    """Log2 of the transmitted byte count, counting 32-bit elements."""
    if element_count < 1:
        raise ValueError("comm_volume needs at least one transmitted element")
    return math.log2(element_count * 32.0 / 8.0)
