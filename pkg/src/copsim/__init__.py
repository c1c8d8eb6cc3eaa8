"""Multi-agent early-fusion collaborative perception simulator.

Pipeline: neighbors subsample their LiDAR sweeps with foreground-aware
sampling, the ego fuses received sparse clouds into a pillar grid, completes
each neighbor view with a vector-quantized codebook, gates and blends the
completions into unobserved cells, and scores the result against a dense
fusion reference while accounting transmitted bytes.
"""

from .config import ConfigError, ScenarioConfig, config_from_dict, load_config
from .fusion import (
    FusionInputs,
    FusionOutput,
    adaptive_weights,
    complementary_fuse,
    enhance,
    gate_and_preserve,
    sparse_early_fusion,
)
from .geometry import (
    Point3,
    PointCloud,
    RigidTransform,
    icp_align,
    perturb_pose,
    read_cloud,
    transform_cloud,
    write_cloud,
)
from .metrics import (
    AlignmentReport,
    alignment_total,
    compare_grids,
    cosine_alignment,
    kl_alignment,
    masked_mse,
    occupancy_iou,
)
from .pillars import (
    GridSpec,
    OccupancyMask,
    PatchLayout,
    PillarGrid,
    occupancy_of,
    patchify,
    pillarize,
    read_grid,
    unpatchify,
    write_grid,
)
from .runner import MetricsRecord, run_scenario, sweep, train_codebook_from_config
from .sampling import Message, SamplingPolicy, comm_volume, fps, partition, rps, sample_message, score_points
from .scenegen import (
    BoxLabel,
    GenerationError,
    Scene,
    SceneParams,
    generate_scene,
    label_foreground,
    simulate_lidar,
)
from .vqcodec import (
    Codebook,
    CompletionResult,
    complete,
    quantize,
    read_codebook,
    rec_loss,
    total_codec_loss,
    train_codebook,
    vq_loss,
    write_codebook,
)

__version__ = "0.1.0"
