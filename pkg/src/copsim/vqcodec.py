"""Vector-quantized pillar completion.

Patch vectors from a sparse grid are matched to their nearest code; each code
decodes to the mean dense patch and mean dense occupancy of the sparse
training patches assigned to it. The codebook is fit with farthest-first
seeded Lloyd iterations over paired sparse/dense grids, which gives the same
fixed point as gradient codebook updates without needing autodiff. The
per-code conditional mean is the squared-error-optimal decoder for a fixed
quantizer, so completion quality reduces to codebook quality.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .pillars import (
    GridSpec,
    PatchLayout,
    PillarGrid,
    map_to_tiles,
    occupancy_of,
    patchify,
    tiles_to_map,
    unpatchify,
)

log = logging.getLogger(__name__)


@dataclass
class Codebook:
    """codes: (K, D_c); dense_atoms: (K, D_p); occ_atoms: (K, p*p) in [0, 1]."""

    codes: np.ndarray
    dense_atoms: np.ndarray
    occ_atoms: np.ndarray
    usage: np.ndarray
    p: int
    objective: np.ndarray | None = None  # per-iteration training SSE, not serialized

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        self.dense_atoms = np.asarray(self.dense_atoms, dtype=np.float64)
        self.occ_atoms = np.asarray(self.occ_atoms, dtype=np.float64)
        self.usage = np.asarray(self.usage, dtype=np.int64)
        k = self.codes.shape[0]
        if self.dense_atoms.shape[0] != k or self.occ_atoms.shape[0] != k or len(self.usage) != k:
            raise ValueError("codebook blocks disagree on K")
        if self.occ_atoms.shape[1] != self.p * self.p:
            raise ValueError(f"occ_atoms must have {self.p * self.p} columns")
        for name, arr in (("codes", self.codes), ("dense_atoms", self.dense_atoms)):
            if arr.size and not np.isfinite(arr).all():
                raise ValueError(f"codebook {name} must be finite")
        if self.occ_atoms.size and (self.occ_atoms.min() < 0 or self.occ_atoms.max() > 1):
            raise ValueError("occ_atoms must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.codes.shape[0]

    @property
    def d_c(self) -> int:
        return self.codes.shape[1]

    @property
    def d_p(self) -> int:
        return self.dense_atoms.shape[1]


@dataclass
class CompletionResult:
    """Reconstructed dense grid, cell occupancy probabilities, chosen codes."""

    dense_hat: PillarGrid
    occ_hat: np.ndarray
    code_indices: np.ndarray | None = None

    def __post_init__(self):
        self.occ_hat = np.asarray(self.occ_hat, dtype=np.float64)
        spec = self.dense_hat.spec
        if self.occ_hat.shape != (spec.h, spec.w):
            raise ValueError(f"occ_hat shape {self.occ_hat.shape} != ({spec.h}, {spec.w})")
        if self.occ_hat.size and (self.occ_hat.min() < 0 or self.occ_hat.max() > 1):
            raise ValueError("occ_hat must lie in [0, 1]")


def _nearest_code(z: np.ndarray, codes: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Nearest code per row; ties resolve to the lowest index.

    Uses the expansion argmin_j ||z - e_j||^2 = argmin_j (||e_j||^2 - 2 z.e_j),
    dropping the per-row constant, so the scan runs as one matmul per chunk.
    """
    codes_sq = (codes**2).sum(axis=1)
    out = np.empty(len(z), dtype=np.int64)
    for s in range(0, len(z), chunk):
        block = z[s : s + chunk]
        scores = codes_sq[None, :] - 2.0 * (block @ codes.T)
        out[s : s + chunk] = scores.argmin(axis=1)
    return out


def quantize(z: np.ndarray, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Map each row of z to its nearest code. Returns (indices, quantized rows)."""
    z = np.asarray(z, dtype=np.float64)
    if codebook.k == 0:
        raise ValueError("codebook is empty")
    if z.ndim != 2 or z.shape[1] != codebook.d_c:
        raise ValueError(f"z has shape {z.shape}, expected (P, {codebook.d_c})")
    idx = _nearest_code(z, codebook.codes)
    return idx, codebook.codes[idx]


def _farthest_first(z: np.ndarray, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    centers = np.empty((k, z.shape[1]))
    centers[0] = z[int(rng.integers(len(z)))]
    min_d2 = ((z - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        j = int(np.argmax(min_d2))
        centers[i] = z[j]
        np.minimum(min_d2, ((z - z[j]) ** 2).sum(axis=1), out=min_d2)
    return centers


def _cluster_means(z: np.ndarray, assign: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, z.shape[1]))
    np.add.at(sums, assign, z)
    means = np.zeros_like(sums)
    live = counts > 0
    means[live] = sums[live] / counts[live, None]
    return means, counts


def train_codebook(
    pairs: Sequence[tuple[PillarGrid, PillarGrid]],
    layout: PatchLayout,
    k: int = 128,
    iters: int = 10,
    seed: int = 0,
) -> Codebook:
    """Fit a codebook from paired (sparse, dense) grids.

    All-zero sparse patches are skipped when collecting the corpus. Centers
    are seeded farthest-first from a random start, then refined with Lloyd
    iterations until assignments stabilize or `iters` rounds pass. A cluster
    that loses all members is reseeded to the point currently farthest from
    its own center, which never increases the clustering objective.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    sparse_rows, dense_rows, occ_rows = [], [], []
    for sparse, dense in pairs:
        zs = patchify(sparse, layout)
        zd = patchify(dense, layout)
        occ = map_to_tiles(occupancy_of(dense).data.astype(np.float64), layout.p)
        sparse_rows.append(zs)
        dense_rows.append(zd)
        occ_rows.append(occ)
    if not sparse_rows:
        raise ValueError(f"training corpus has 0 non-empty sparse patches; need at least k={k}")
    z_all = np.concatenate(sparse_rows)
    zd_all = np.concatenate(dense_rows)
    zo_all = np.concatenate(occ_rows)
    informative = np.abs(z_all).sum(axis=1) > 0
    z = z_all[informative]
    if len(z) < k:
        raise ValueError(
            f"training corpus has {len(z)} non-empty sparse patches; need at least k={k}"
        )

    centers = _farthest_first(z, k, seed)
    prev_assign = None
    objective = []
    for _ in range(iters):
        assign = _nearest_code(z, centers)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        means, counts = _cluster_means(z, assign, k)
        live = counts > 0
        centers[live] = means[live]
        dead = np.flatnonzero(~live)
        if len(dead):
            resid = ((z - centers[assign]) ** 2).sum(axis=1)
            for dk in dead:
                j = int(np.argmax(resid))
                if resid[j] <= 0.0:
                    break  # degenerate corpus, nothing left to spread to
                centers[dk] = z[j]
                resid[j] = -1.0
        sse = float(((z - centers[_nearest_code(z, centers)]) ** 2).sum())
        objective.append(sse)

    usage = np.bincount(_nearest_code(z, centers), minlength=k)
    # Atoms are conditional means over everything a code actually receives,
    # all-zero patches included: they carry dense targets too, and folding
    # them in keeps the code nearest to the zero vector calibrated at the
    # base occupancy rate instead of inheriting certainty from the few
    # informative patches in its cluster.
    final_all = _nearest_code(z_all, centers)
    dense_atoms, _ = _cluster_means(zd_all, final_all, k)
    occ_atoms, _ = _cluster_means(zo_all, final_all, k)
    if (usage == 0).any():
        log.warning(
            "train_codebook: %d codes unused after training (degenerate corpus); "
            "their atoms decode to zeros",
            int((usage == 0).sum()),
        )
    return Codebook(centers, dense_atoms, occ_atoms, usage, layout.p, np.asarray(objective))


def complete(sparse: PillarGrid, codebook: Codebook, layout: PatchLayout) -> CompletionResult:
    """Quantize the sparse grid patch-wise and decode dense patches + occupancy."""
    spec = sparse.spec
    if layout.p != codebook.p:
        raise ValueError(f"layout patch edge {layout.p} != codebook patch edge {codebook.p}")
    if layout.patch_len != codebook.d_c:
        raise ValueError(
            f"patch length {layout.patch_len} != code dimension {codebook.d_c}"
        )
    if codebook.d_p != layout.patch_len:
        raise ValueError("codebook dense atoms do not match the patch layout")
    z = patchify(sparse, layout)
    idx, _ = quantize(z, codebook)
    dense_hat = unpatchify(codebook.dense_atoms[idx], layout, spec)
    occ_hat = tiles_to_map(codebook.occ_atoms[idx], layout.p, spec.h, spec.w)
    return CompletionResult(dense_hat, occ_hat, idx)


class RecLoss(NamedTuple):
    bce: float
    masked_mse: float
    total: float


def rec_loss(result: CompletionResult, dense: PillarGrid) -> RecLoss:
    """Occupancy BCE plus mean squared channel error over occupied cells."""
    if result.dense_hat.spec != dense.spec:
        raise ValueError("completion and dense grid specs differ")
    occ = occupancy_of(dense).data.astype(np.float64)
    q = np.clip(result.occ_hat, 1e-7, 1.0 - 1e-7)
    bce = float(-np.mean(occ * np.log(q) + (1.0 - occ) * np.log1p(-q)))
    n_occ = int(occ.sum())
    if n_occ == 0:
        log.warning("rec_loss: dense occupancy is empty; masked mse defined as 0")
        masked = 0.0
    else:
        diff = result.dense_hat.data - dense.data
        masked = float((occ * (diff**2).sum(axis=2)).sum() / n_occ)
    return RecLoss(bce, masked, bce + masked)


def vq_loss(z_s: np.ndarray, z_q: np.ndarray, beta: float = 0.25) -> float:
    """Quantization gap metric: (1 + beta) times the mean squared row gap.

    During gradient training the two terms differ only by stop-gradient
    placement; as a metric they share the same value.
    """
    z_s = np.asarray(z_s, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    if z_s.shape != z_q.shape:
        raise ValueError(f"shape mismatch {z_s.shape} vs {z_q.shape}")
    if len(z_s) == 0:
        return 0.0
    gap = ((z_s - z_q) ** 2).sum(axis=1).mean()
    return float((1.0 + beta) * gap)


def total_codec_loss(rec: float, vq: float, lam: float = 10.0) -> float:
    return lam * rec + vq


# ---------------------------------------------------------------------------
# File format: b"CCBK", version u8=1, u32 K, u32 D_c, u32 D_p, u32 p, then
# codes, dense_atoms, occ_atoms as little-endian f32 blocks and usage as u32.

CODEBOOK_MAGIC = b"CCBK"
CODEBOOK_VERSION = 1


def write_codebook(path: str, cb: Codebook) -> None:
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<BIIII", CODEBOOK_VERSION, cb.k, cb.d_c, cb.d_p, cb.p))
        f.write(np.ascontiguousarray(cb.codes, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cb.dense_atoms, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cb.occ_atoms, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(cb.usage, dtype="<u4").tobytes())


def read_codebook(path: str) -> Codebook:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise ValueError(f"{path}: bad magic, expected {CODEBOOK_MAGIC!r}")
    version, k, d_c, d_p, p = struct.unpack_from("<BIIII", blob, 4)
    if version != CODEBOOK_VERSION:
        raise ValueError(f"{path}: unsupported codebook format version {version}")
    off = 21
    expected = off + 4 * (k * d_c + k * d_p + k * p * p + k)
    if len(blob) != expected:
        raise ValueError(
            f"{path}: truncated codebook file ({len(blob)} bytes, expected {expected})"
        )

    def block(count: int, dtype: str) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    codes = block(k * d_c, "<f4").reshape(k, d_c).astype(np.float64)
    dense = block(k * d_p, "<f4").reshape(k, d_p).astype(np.float64)
    occ = block(k * p * p, "<f4").reshape(k, p * p).astype(np.float64)
    usage = block(k, "<u4").astype(np.int64)
    return Codebook(codes, dense, occ, usage, p)
