import math

import numpy as np
import pytest

from copsim.geometry import PointCloud, RigidTransform
from copsim.sampling import (
    Message,
    SamplingPolicy,
    comm_volume,
    fps,
    partition,
    rps,
    sample_message,
    score_points,
)
from copsim.scenegen import BoxLabel, SceneParams, generate_scene, simulate_lidar

from conftest import random_cloud


def fps_oracle(xyz: np.ndarray, count: int) -> list[int]:
    """Slow reference: greedy max-min selection scanning every candidate."""
    if count == 0:
        return []
    selected = [0]
    while len(selected) < count:
        best, best_d = -1, -1.0
        for i in range(len(xyz)):
            if i in selected:
                continue
            d = min(float(((xyz[i] - xyz[j]) ** 2).sum()) for j in selected)
            if d > best_d:  # strict: ties stay with the lowest index
                best, best_d = i, d
        selected.append(best)
    return selected


def line_cloud(n=10):
    pts = np.zeros((n, 4))
    pts[:, 0] = np.arange(n, dtype=float)
    return PointCloud(pts)


# --- scoring ---------------------------------------------------------------

def test_oracle_scorer_delegates_to_box_labels():
    box = BoxLabel((0.0, 0.0, 0.8), (4.0, 2.0, 1.6), 0.0)
    cloud = PointCloud(np.array([[0.0, 0.0, 0.8, 0.1], [9.0, 0.0, 0.0, 0.1]]))
    scores = score_points(cloud, "oracle", [box])
    assert scores.tolist() == [1.0, 0.0]


def test_oracle_scorer_requires_boxes(rng):
    with pytest.raises(ValueError):
        score_points(random_cloud(rng, 5), "oracle")


def test_unknown_scorer_rejected(rng):
    with pytest.raises(ValueError):
        score_points(random_cloud(rng, 5), "mlp")


def test_empty_cloud_scores_empty():
    assert score_points(PointCloud.empty(), "heuristic").shape == (0,)


def test_heuristic_keeps_pure_ground_below_threshold():
    scene = generate_scene(SceneParams(agents=2, boxes=0, bounds=30.0, range_limit=14.0), 3)
    ground = simulate_lidar(scene, "a0", 0, density=2.0)
    scores = score_points(ground, "heuristic")
    assert scores.max() < 0.5


def test_heuristic_scores_boxes_higher_than_ground():
    scene = generate_scene(SceneParams(agents=2, boxes=8, bounds=40.0, range_limit=20.0), 6)
    cloud = simulate_lidar(scene, "a0", 0, density=2.5)
    scores = score_points(cloud, "heuristic")
    high = cloud.xyz[:, 2] > 1.0
    assert scores[high].mean() > scores[~high].mean()


# --- partition ---------------------------------------------------------------

def test_partition_all_zero_scores():
    cloud = line_cloud(4)
    fg, bg = partition(cloud, np.zeros(4), 0.5)
    assert fg.size == 0 and bg.tolist() == [0, 1, 2, 3]


def test_partition_threshold_is_strict():
    cloud = line_cloud(3)
    fg, bg = partition(cloud, np.array([0.5, 0.5, 0.5]), 0.5)
    assert fg.size == 0 and bg.size == 3


def test_partition_example():
    cloud = line_cloud(3)
    fg, bg = partition(cloud, np.array([0.9, 0.1, 0.6]), 0.5)
    assert fg.tolist() == [0, 2] and bg.tolist() == [1]


def test_partition_is_disjoint_cover(rng):
    cloud = random_cloud(rng, 200)
    scores = rng.uniform(0, 1, 200)
    fg, bg = partition(cloud, scores, 0.4)
    merged = np.sort(np.concatenate([fg, bg]))
    assert np.array_equal(merged, np.arange(200))


def test_partition_length_mismatch():
    with pytest.raises(ValueError):
        partition(line_cloud(4), np.zeros(3), 0.5)


# --- fps ---------------------------------------------------------------

def test_fps_full_selection_starts_at_zero():
    cloud = line_cloud(6)
    sel = fps(cloud, 6)
    assert sel[0] == 0
    assert sorted(sel.tolist()) == list(range(6))


def test_fps_line_example():
    assert fps(line_cloud(10), 3).tolist() == [0, 9, 4]


def test_fps_single_point():
    assert fps(line_cloud(10), 1).tolist() == [0]


def test_fps_zero_count():
    assert fps(line_cloud(10), 0).size == 0


def test_fps_count_out_of_range():
    with pytest.raises(ValueError):
        fps(line_cloud(5), 6)
    with pytest.raises(ValueError):
        fps(line_cloud(5), -1)


def test_fps_matches_bruteforce_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(5, 40))
        cloud = random_cloud(rng, n)
        count = int(rng.integers(1, n + 1))
        assert fps(cloud, count).tolist() == fps_oracle(cloud.xyz, count)


def test_fps_returns_distinct_indices_on_duplicate_points():
    pts = np.zeros((5, 4))
    sel = fps(PointCloud(pts), 3)
    assert len(set(sel.tolist())) == 3


def test_fps_deterministic(rng):
    cloud = random_cloud(rng, 64)
    assert np.array_equal(fps(cloud, 10), fps(cloud, 10))


# --- rps ---------------------------------------------------------------

def test_rps_zero_and_full():
    cloud = line_cloud(8)
    assert rps(cloud, 0, 1).size == 0
    assert rps(cloud, 8, 1).tolist() == list(range(8))


def test_rps_sorted_and_deterministic(rng):
    cloud = random_cloud(rng, 50)
    a = rps(cloud, 12, seed=5)
    assert np.array_equal(a, np.sort(a))
    assert np.array_equal(a, rps(cloud, 12, seed=5))
    assert not np.array_equal(a, rps(cloud, 12, seed=6))


def test_rps_count_out_of_range():
    with pytest.raises(ValueError):
        rps(line_cloud(5), 6, 0)


def test_rps_uniformity():
    cloud = line_cloud(100)
    hits = np.zeros(100)
    trials = 10_000
    for s in range(trials):
        hits[rps(cloud, 10, seed=s)] += 1
    freq = hits / trials
    assert freq.min() > 0.09 and freq.max() < 0.11


# --- messages and volume ---------------------------------------------------

def _policy(**kw):
    return SamplingPolicy(**kw)


def test_full_ratio_message_equals_input(rng):
    cloud = random_cloud(rng, 120)
    scores = score_points(cloud, "heuristic")
    msg = sample_message(cloud, scores, _policy(r_fg=1.0, r_bg=1.0),
                         RigidTransform(), 0, seed=3)
    assert np.array_equal(msg.cloud.points, cloud.points)
    assert msg.element_count == 4 * 120


def test_message_counts_match_ceil_arithmetic(rng):
    n_fg, n_bg = 100, 900
    pts = np.zeros((n_fg + n_bg, 4))
    pts[:, 0] = np.arange(n_fg + n_bg, dtype=float)
    cloud = PointCloud(pts)
    scores = np.concatenate([np.ones(n_fg), np.zeros(n_bg)])
    msg = sample_message(cloud, scores, _policy(r_fg=0.2, r_bg=0.1),
                         RigidTransform(), 0, seed=1)
    assert msg.cloud.n == 20 + 90
    assert msg.element_count == 440


def test_message_keeps_original_point_order(rng):
    cloud = random_cloud(rng, 200)
    scores = rng.uniform(0, 1, 200)
    msg = sample_message(cloud, scores, _policy(r_fg=0.5, r_bg=0.3),
                         RigidTransform(), 0, seed=2)
    # selected rows must appear in the same relative order as in the input
    pos = [int(np.flatnonzero((cloud.points == row).all(axis=1))[0]) for row in msg.cloud.points]
    assert pos == sorted(pos)


def test_element_count_monotone_in_ratios(rng):
    cloud = random_cloud(rng, 500)
    scores = (rng.uniform(0, 1, 500) > 0.8).astype(float)
    counts = []
    for r_bg in (0.5, 0.2, 0.1, 0.05, 0.01):
        msg = sample_message(cloud, scores, _policy(r_fg=0.2, r_bg=r_bg),
                             RigidTransform(), 0, seed=4)
        counts.append(msg.element_count)
    assert counts == sorted(counts, reverse=True)
    fg_counts = []
    for r_fg in (0.05, 0.2, 0.6, 1.0):
        msg = sample_message(cloud, scores, _policy(r_fg=r_fg, r_bg=0.1),
                             RigidTransform(), 0, seed=4)
        fg_counts.append(msg.element_count)
    assert fg_counts == sorted(fg_counts)


def test_message_element_count_invariant(rng):
    cloud = random_cloud(rng, 10)
    with pytest.raises(ValueError):
        Message(cloud, RigidTransform(), 0, element_count=39)


def test_region_fg_only_drops_background(rng):
    cloud = random_cloud(rng, 100)
    scores = np.concatenate([np.ones(20), np.zeros(80)])
    msg = sample_message(cloud, scores, _policy(r_fg=1.0, r_bg=1.0, region="fg_only"),
                         RigidTransform(), 0, seed=1)
    assert msg.cloud.n == 20


def test_region_fg_sur_keeps_nearby_background():
    pts = np.zeros((3, 4))
    pts[0] = [0.0, 0.0, 1.0, 0.5]    # foreground
    pts[1] = [1.0, 0.0, 0.0, 0.1]    # background within 2 m
    pts[2] = [30.0, 0.0, 0.0, 0.1]   # background far away
    cloud = PointCloud(pts)
    scores = np.array([1.0, 0.0, 0.0])
    msg = sample_message(cloud, scores, _policy(r_fg=1.0, r_bg=1.0, region="fg_sur"),
                         RigidTransform(), 0, seed=1)
    assert msg.cloud.n == 2
    assert np.array_equal(msg.cloud.points, pts[:2])


def test_comm_volume_formula():
    assert comm_volume(1) == 2.0
    assert comm_volume(8192) == 15.0
    assert comm_volume(2**20) == 22.0
    assert comm_volume(2 * 4096) == comm_volume(4096) + 1.0
    with pytest.raises(ValueError):
        comm_volume(0)


def test_fps_spreads_better_than_rps(rng):
    # structural-coverage property at reduced scale; the acceptance suite
    # runs the full 100-trial version
    def min_pairwise(xyz):
        d = np.linalg.norm(xyz[:, None, :] - xyz[None, :, :], axis=2)
        return d[np.triu_indices(len(xyz), k=1)].min()

    wins = 0
    trials = 20
    for t in range(trials):
        cloud = random_cloud(np.random.default_rng(900 + t), 128)
        f = fps(cloud, 12)
        r = rps(cloud, 12, seed=t)
        if min_pairwise(cloud.xyz[f]) >= min_pairwise(cloud.xyz[r]):
            wins += 1
    assert wins >= 18
