"""Scenario execution: codebook training, message exchange, fusion, metric rows, sweeps.

Per frame and ego agent: every neighbor samples a message from its own sweep,
the channel perturbs the reported pose and delays the capture frame, the ego
transforms each received cloud into its frame (optionally ICP-correcting it
against its own sweep), fuses, and scores the result against a dense reference
built from everyone's full clouds at ground-truth poses.

Scenes are split into a training pool (even derived seeds) and an evaluation
pool (odd derived seeds), so a codebook is never scored on scenes it saw.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .config import ConfigError, ScenarioConfig
from .fusion import FusionInputs, enhance
from .geometry import (
    PointCloud,
    RigidTransform,
    concat_clouds,
    icp_align,
    perturb_pose,
    transform_cloud,
)
from .metrics import cosine_alignment, kl_alignment, masked_mse, occupancy_iou
from .pillars import PatchLayout, PillarGrid, occupancy_of, pillarize
from .sampling import Message, comm_volume, rps, sample_message, score_points
from .scenegen import Scene, generate_scene, simulate_lidar, transform_box
from .vqcodec import Codebook, read_codebook, train_codebook

CSV_COLUMNS = (
    "scenario",
    "r_fg",
    "r_bg",
    "comm_volume",
    "iou_sparse",
    "iou_enhanced",
    "mse_enhanced",
    "kl",
    "cosine_loss",
    "wall_ms",
)
CSV_HEADER = ",".join(CSV_COLUMNS)


@dataclass
class MetricsRecord:
    scenario: str
    r_fg: float
    r_bg: float
    comm_volume: float
    iou_sparse: float
    iou_enhanced: float
    mse_enhanced: float
    kl: float
    cosine_loss: float
    wall_ms: float
    extras: dict = field(default_factory=dict, repr=False, compare=False)

    def csv_row(self) -> str:
        vals = [getattr(self, c) for c in CSV_COLUMNS]
        return ",".join(v if isinstance(v, str) else repr(float(v)) for v in vals)


def train_scene_seeds(master: int, n: int) -> list[int]:
    return [2 * (master + i) for i in range(n)]


def eval_scene_seeds(master: int, n: int) -> list[int]:
    return [2 * (master + i) + 1 for i in range(n)]


def _case_seeds(master: int, setting: int, scene_i: int, frame: int, ego_i: int, nbr_i: int):
    ss = np.random.SeedSequence([master, setting, scene_i, frame, ego_i, nbr_i])
    msg_seed, noise_seed = (int(x) for x in ss.generate_state(2))
    return msg_seed, noise_seed


def build_training_pairs(config: ScenarioConfig) -> list[tuple[PillarGrid, PillarGrid]]:
    """Paired (sparse, dense) grids from the training scene pool.

    The sparse half subsamples the full sweep uniformly at the configured
    training ratio; grids are in each agent's own frame.
    """
    pairs = []
    for i, seed in enumerate(train_scene_seeds(config.seed, config.codebook.train_scenes)):
        scene = generate_scene(config.scene, seed)
        for ai, agent in enumerate(scene.agent_ids):
            for frame in range(scene.frames):
                dense_cloud = simulate_lidar(scene, agent, frame, config.density)
                sub_seed = int(
                    np.random.SeedSequence([config.seed, 7, i, ai, frame]).generate_state(1)[0]
                )
                k = int(round(config.codebook.train_rps_ratio * dense_cloud.n))
                sparse_cloud = dense_cloud.select(rps(dense_cloud, k, sub_seed))
                pairs.append(
                    (pillarize(sparse_cloud, config.grid), pillarize(dense_cloud, config.grid))
                )
    return pairs


def train_codebook_from_config(config: ScenarioConfig) -> Codebook:
    config.validate()
    layout = PatchLayout.for_spec(config.grid, config.patch_edge)
    pairs = build_training_pairs(config)
    return train_codebook(
        pairs, layout, k=config.codebook.k, iters=config.codebook.iters, seed=config.seed
    )


def load_or_train_codebook(config: ScenarioConfig) -> Codebook:
    if config.codebook.path is not None:
        return read_codebook(config.codebook.path)
    if not config.codebook.train:
        raise ConfigError("codebook.path: no codebook file given and codebook.train is false")
    return train_codebook_from_config(config)


# Ground returns form a ring centered on each sensor, which point-to-point ICP
# would happily align ring-to-ring instead of scene-to-scene; and structure the
# ego cannot see at all drags the fit toward unrelated surfaces. Registration
# therefore runs on above-ground points restricted to the mutual overlap
# (source points with a nearby ego point under the communicated pose); the
# correction applies to the whole message.
_ICP_GROUND_CUT = 0.25
_ICP_OVERLAP_RADIUS = 1.5
_ICP_MIN_POINTS = 12  # yaw + planar translation only, so a dozen points suffice


def _icp_correction(received: PointCloud, ego_cloud: PointCloud, ch) -> RigidTransform:
    src = received.points[received.points[:, 2] > _ICP_GROUND_CUT]
    tgt = ego_cloud.points[ego_cloud.points[:, 2] > _ICP_GROUND_CUT]
    if len(src) < _ICP_MIN_POINTS or len(tgt) < _ICP_MIN_POINTS:
        return RigidTransform.identity()
    dist, _ = cKDTree(tgt[:, :3]).query(src[:, :3])
    src = src[dist <= _ICP_OVERLAP_RADIUS]
    if len(src) < _ICP_MIN_POINTS:
        return RigidTransform.identity()
    return icp_align(
        PointCloud(src, received.frame),
        PointCloud(tgt, ego_cloud.frame),
        ch.icp_max_iters,
        ch.icp_tol,
    )


def _run_case(
    config: ScenarioConfig,
    codebook: Codebook | None,
    layout: PatchLayout,
    scene: Scene,
    scene_i: int,
    frame: int,
    ego: str,
    setting: int,
) -> MetricsRecord:
    t0 = time.perf_counter()
    ch = config.channel
    ego_pose = scene.pose(ego, frame)
    ego_inv = ego_pose.invert()
    ego_cloud = simulate_lidar(scene, ego, frame, config.density)
    ego_i = scene.agent_index(ego)
    tx_frame = frame - ch.latency_frames

    messages: list[Message] = []
    ref_clouds = [ego_cloud]
    for nbr_i, nbr in enumerate(scene.agent_ids):
        if nbr == ego:
            continue
        full_now = simulate_lidar(scene, nbr, frame, config.density)
        rel_true = ego_inv.compose(scene.pose(nbr, frame))
        ref_clouds.append(transform_cloud(full_now, rel_true, frame=ego))

        cloud_tx = full_now if tx_frame == frame else simulate_lidar(scene, nbr, tx_frame, config.density)
        pose_tx = scene.pose(nbr, tx_frame)
        boxes_nbr = [transform_box(b, pose_tx.invert()) for b in scene.boxes_at(tx_frame)]
        scores = score_points(cloud_tx, config.ablation.scorer, boxes_nbr)
        msg_seed, noise_seed = _case_seeds(config.seed, setting, scene_i, frame, ego_i, nbr_i)
        pose_reported = perturb_pose(pose_tx, ch.pose_noise_m, ch.pose_noise_rad, noise_seed)
        msg = sample_message(cloud_tx, scores, config.sampling, pose_reported, tx_frame, msg_seed)

        received = transform_cloud(msg.cloud, ego_inv.compose(pose_reported), frame=ego)
        if ch.icp:
            correction = _icp_correction(received, ego_cloud, ch)
            received = transform_cloud(received, correction)
        messages.append(Message(received, pose_reported, tx_frame, msg.element_count))

    dense_ref = pillarize(concat_clouds(ref_clouds, frame=ego), config.grid)

    # A lossless message has nothing to complete; the codec only compensates
    # sampling loss, so it is bypassed when every point is transmitted.
    use_codebook = config.ablation.pc and not config.sampling.lossless
    out = enhance(
        FusionInputs(ego_cloud, tuple(messages), config.grid, config.fusion_tau_o),
        codebook=codebook if use_codebook else None,
        layout=layout,
        use_sef=config.ablation.sef,
        use_acf=config.ablation.acf,
    )

    ref_occ = occupancy_of(dense_ref)
    iou_sparse = occupancy_iou(occupancy_of(out.sparse_fused).data.astype(np.float64), ref_occ)
    iou_enhanced = occupancy_iou(occupancy_of(out.enhanced).data.astype(np.float64), ref_occ)
    mse_enhanced = masked_mse(out.enhanced, dense_ref)
    kl = kl_alignment(out.enhanced, dense_ref)
    cosine_loss = cosine_alignment(out.enhanced, dense_ref)
    elements = sum(m.element_count for m in messages)
    volume = comm_volume(elements)

    extras = {
        "elements": elements,
        "mse_sparse": masked_mse(out.sparse_fused, dense_ref),
        "iou_ego": occupancy_iou(
            occupancy_of(pillarize(ego_cloud, config.grid)).data.astype(np.float64), ref_occ
        ),
    }
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return MetricsRecord(
        scenario=f"s{scene.seed}_f{frame}_{ego}",
        r_fg=config.sampling.r_fg,
        r_bg=config.sampling.r_bg,
        comm_volume=volume,
        iou_sparse=iou_sparse,
        iou_enhanced=iou_enhanced,
        mse_enhanced=mse_enhanced,
        kl=kl,
        cosine_loss=cosine_loss,
        wall_ms=wall_ms,
        extras=extras,
    )


def run_scenario(
    config: ScenarioConfig,
    codebook: Codebook | None = None,
    *,
    setting: int = 0,
) -> list[MetricsRecord]:
    """Run the full pipeline over the evaluation scenes of `config`.

    Frames earlier than the configured latency are skipped so every evaluated
    frame has a valid past frame to receive from.
    """
    config.validate()
    if codebook is None and config.ablation.pc and not config.sampling.lossless:
        codebook = load_or_train_codebook(config)
    layout = PatchLayout.for_spec(config.grid, config.patch_edge)
    records = []
    for scene_i, seed in enumerate(eval_scene_seeds(config.seed, config.eval_scenes)):
        scene = generate_scene(config.scene, seed)
        for frame in range(config.channel.latency_frames, scene.frames):
            for ego in scene.agent_ids:
                records.append(
                    _run_case(config, codebook, layout, scene, scene_i, frame, ego, setting)
                )
    return records


def write_csv(path: str, records: list[MetricsRecord]) -> None:
    with open(path, "w") as f:
        f.write(CSV_HEADER + "\n")
        for r in records:
            f.write(r.csv_row() + "\n")


def sweep(
    config: ScenarioConfig,
    r_bg_list: list[float],
    noise_list: list[float],
    latency_ms_list: list[float],
    out_path: str,
    codebook: Codebook | None = None,
    timing: bool = False,
) -> list[MetricsRecord]:
    """Cartesian product of settings x evaluation scenes, one CSV row per case.

    Latencies are given in milliseconds and mapped to whole frames at the
    scene frame period. Unless `timing` is set, wall_ms is written as 0 so two
    sweeps with the same master seed produce byte-identical files.
    """
    if not r_bg_list or not noise_list or not latency_ms_list:
        raise ValueError("sweep lists must be non-empty")
    config.validate()
    if codebook is None and config.ablation.pc:
        codebook = load_or_train_codebook(config)
    records = []
    setting = 0
    for r_bg in r_bg_list:
        for noise in noise_list:
            for latency_ms in latency_ms_list:
                lat_frames = int(round(latency_ms / config.scene.frame_period_ms))
                cfg = replace(
                    config,
                    sampling=replace(config.sampling, r_bg=r_bg),
                    channel=replace(
                        config.channel, pose_noise_m=noise, latency_frames=lat_frames
                    ),
                )
                rows = run_scenario(cfg, codebook, setting=setting)
                if not timing:
                    for r in rows:
                        r.wall_ms = 0.0
                records.extend(rows)
                setting += 1
    write_csv(out_path, records)
    return records
