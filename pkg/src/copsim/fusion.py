"""Completion-enhanced early fusion.

The ego pillarizes everything it saw plus everything it received (sparse early
fusion), completes each neighbor grid independently, gates completions by
predicted occupancy while preserving actually-observed values, weights the
surviving neighbors by a per-cell softmax over their predicted occupancy, and
finally writes the weighted result only into cells the sparse fusion left
empty. Observed cells are never modified.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import PointCloud, concat_clouds
from .pillars import GridSpec, OccupancyMask, PillarGrid, PatchLayout, occupancy_of, pillarize
from .sampling import Message
from .vqcodec import Codebook, CompletionResult, complete


@dataclass(frozen=True)
class FusionInputs:
    """Ego cloud plus neighbor messages whose clouds are already in the ego frame."""

    ego_cloud: PointCloud
    neighbor_messages: tuple[Message, ...]
    spec: GridSpec
    tau_o: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.tau_o <= 1.0:
            raise ValueError("tau_o must lie in [0, 1]")
        for m in self.neighbor_messages:
            if m.cloud.frame != self.ego_cloud.frame:
                raise ValueError(
                    f"message cloud frame {m.cloud.frame!r} != ego frame {self.ego_cloud.frame!r}"
                )


@dataclass
class FusionOutput:
    enhanced: PillarGrid
    sparse_fused: PillarGrid
    observed_mask: OccupancyMask
    weights: np.ndarray  # (n_neighbors, H, W), rows sum to 1 where any neighbor survives


def sparse_early_fusion(
    ego_cloud: PointCloud, messages: Sequence[Message], spec: GridSpec
) -> PillarGrid:
    """Pillarize the concatenation of the ego cloud and all received clouds."""
    clouds = [ego_cloud] + [m.cloud for m in messages]
    return pillarize(concat_clouds(clouds, frame=ego_cloud.frame), spec)


def gate_and_preserve(
    completed: CompletionResult, sparse_neighbor: PillarGrid, tau_o: float
) -> PillarGrid:
    """Zero low-confidence completions, then restore observed sparse values.

    Observation beats the gate: any cell the neighbor actually reported keeps
    its sparse value even if the predicted occupancy is low.
    """
    if completed.dense_hat.spec != sparse_neighbor.spec:
        raise ValueError("completion and sparse grid specs differ")
    keep = completed.occ_hat > tau_o
    data = np.where(keep[:, :, None], completed.dense_hat.data, 0.0)
    observed = occupancy_of(sparse_neighbor).data.astype(bool)
    data = np.where(observed[:, :, None], sparse_neighbor.data, data)
    return PillarGrid(sparse_neighbor.spec, data)


def adaptive_weights(
    gated: Sequence[PillarGrid],
    occs: Sequence[np.ndarray],
    sparse_fused: PillarGrid,
) -> np.ndarray:
    """Per-cell softmax over neighbors of their predicted occupancy.

    Only neighbors whose gated grid is non-zero at a cell compete there; cells
    where nobody survives get all-zero weights. The weights are spatial and
    broadcast across channels downstream.
    """
    if len(gated) == 0:
        raise ValueError("adaptive_weights needs at least one neighbor")
    if len(gated) != len(occs):
        raise ValueError("gated grids and occupancy fields disagree in length")
    spec = sparse_fused.spec
    for g, o in zip(gated, occs):
        if g.spec != spec:
            raise ValueError("gated grid spec differs from the fused grid spec")
        if o.shape != (spec.h, spec.w):
            raise ValueError(f"occupancy field shape {o.shape} != ({spec.h}, {spec.w})")
    alive = np.stack([occupancy_of(g).data.astype(bool) for g in gated])
    scores = np.where(alive, np.exp(np.stack(occs)), 0.0)
    norm = scores.sum(axis=0)
    return np.divide(scores, norm, out=np.zeros_like(scores), where=norm > 0)


def complementary_fuse(
    sparse_fused: PillarGrid, gated: Sequence[PillarGrid], weights: np.ndarray
) -> FusionOutput:
    """Weighted neighbor blend, written only into cells the sparse fusion left empty."""
    spec = sparse_fused.spec
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(gated), spec.h, spec.w):
        raise ValueError(f"weights shape {weights.shape} != ({len(gated)}, {spec.h}, {spec.w})")
    fused = np.zeros(spec.shape)
    for w, g in zip(weights, gated):
        fused += w[:, :, None] * g.data
    observed = occupancy_of(sparse_fused)
    m = observed.data.astype(np.float64)[:, :, None]
    enhanced = m * sparse_fused.data + (1.0 - m) * fused
    return FusionOutput(PillarGrid(spec, enhanced), sparse_fused, observed, weights)


def enhance(
    inputs: FusionInputs,
    codebook: Codebook | None = None,
    layout: PatchLayout | None = None,
    *,
    use_sef: bool = True,
    use_acf: bool = True,
) -> FusionOutput:
    """Full fusion pass over one ego view.

    With `codebook=None` each neighbor grid passes through uncompleted (its own
    occupancy serves as the confidence field), which is also the lossless path:
    a fully transmitted cloud has nothing to complete. `use_sef`/`use_acf`
    switch off the sparse-fusion and adaptive-update stages for ablations.
    """
    spec = inputs.spec
    messages = inputs.neighbor_messages
    sparse_fused = sparse_early_fusion(inputs.ego_cloud, messages if use_sef else (), spec)
    if not messages or not use_acf:
        observed = occupancy_of(sparse_fused)
        zero_w = np.zeros((len(messages), spec.h, spec.w))
        return FusionOutput(sparse_fused, sparse_fused, observed, zero_w)

    gated, occs = [], []
    for m in messages:
        neighbor_grid = pillarize(m.cloud, spec)
        if codebook is None:
            comp = CompletionResult(
                neighbor_grid, occupancy_of(neighbor_grid).data.astype(np.float64)
            )
        else:
            if layout is None:
                raise ValueError("enhance needs a patch layout when a codebook is given")
            comp = complete(neighbor_grid, codebook, layout)
        gated.append(gate_and_preserve(comp, neighbor_grid, inputs.tau_o))
        occs.append(comp.occ_hat)
    weights = adaptive_weights(gated, occs, sparse_fused)
    return complementary_fuse(sparse_fused, gated, weights)
