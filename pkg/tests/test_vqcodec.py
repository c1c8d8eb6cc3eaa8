import numpy as np
import pytest

from copsim.pillars import GridSpec, PatchLayout, PillarGrid, patchify, unpatchify
from copsim.vqcodec import (
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

from conftest import f32_grained

SPEC = GridSpec(0.0, 0.0, 1.0, 8, 8, 8)
LAYOUT = PatchLayout.for_spec(SPEC, p=4)  # 4 patches of length 128


def brute_force_nearest(z, codes):
    """Exhaustive scan oracle for the quantizer."""
    out = []
    for row in z:
        d2 = [float(((row - e) ** 2).sum()) for e in codes]
        out.append(int(np.argmin(d2)))
    return out


def make_codebook(codes, p=4, d_p=None):
    codes = np.asarray(codes, dtype=np.float64)
    k = codes.shape[0]
    d_p = d_p if d_p is not None else codes.shape[1]
    return Codebook(
        codes,
        np.zeros((k, d_p)),
        np.zeros((k, p * p)),
        np.ones(k, dtype=np.int64),
        p,
    )


def grid_from_patches(mat):
    return unpatchify(np.asarray(mat, dtype=np.float64), LAYOUT, SPEC)


def random_pairs(rng, n_pairs=6, zero_frac=0.3):
    """Random sparse/dense grid pairs with a share of all-zero sparse patches."""
    pairs = []
    for _ in range(n_pairs):
        dense = rng.uniform(-1, 1, (LAYOUT.n_patches, LAYOUT.patch_len))
        sparse = dense * (rng.uniform(size=dense.shape) < 0.5)
        kill = rng.uniform(size=LAYOUT.n_patches) < zero_frac
        sparse[kill] = 0.0
        pairs.append((grid_from_patches(sparse), grid_from_patches(dense)))
    return pairs


# --- quantize ----------------------------------------------------------------

def test_quantize_picks_nearest():
    cb = make_codebook([[0.0, 0.0], [1.0, 1.0]], p=1, d_p=2)
    idx, zq = quantize(np.array([[0.2, 0.1]]), cb)
    assert idx.tolist() == [0]
    assert zq.tolist() == [[0.0, 0.0]]


def test_quantize_exact_hit():
    codes = np.arange(10.0).reshape(5, 2)
    cb = make_codebook(codes, p=1, d_p=2)
    idx, zq = quantize(codes[3:4], cb)
    assert idx.tolist() == [3]
    assert np.array_equal(zq[0], codes[3])


def test_quantize_tie_breaks_to_lowest_index():
    cb = make_codebook([[1.0, 0.0], [1.0, 0.0], [5.0, 5.0]], p=1, d_p=2)
    idx, _ = quantize(np.array([[1.0, 0.0], [0.9, 0.1]]), cb)
    assert idx.tolist() == [0, 0]


def test_quantize_matches_bruteforce(rng):
    z = rng.normal(size=(1000, 16))
    codes = rng.normal(size=(128, 16))
    cb = make_codebook(codes, p=4, d_p=128)
    idx, zq = quantize(z, cb)
    assert idx.tolist() == brute_force_nearest(z, codes)
    assert np.array_equal(zq, codes[idx])


def test_quantize_rejects_bad_inputs(rng):
    cb = make_codebook(rng.normal(size=(4, 8)), p=1, d_p=8)
    with pytest.raises(ValueError):
        quantize(rng.normal(size=(3, 5)), cb)
    empty = Codebook(np.zeros((0, 8)), np.zeros((0, 8)), np.zeros((0, 1)),
                     np.zeros(0, dtype=np.int64), 1)
    with pytest.raises(ValueError):
        quantize(rng.normal(size=(3, 8)), empty)


# --- training ----------------------------------------------------------------

def test_training_objective_non_increasing(rng):
    pairs = random_pairs(rng)
    cb = train_codebook(pairs, LAYOUT, k=6, iters=15, seed=0)
    obj = cb.objective
    assert obj is not None and len(obj) >= 1
    assert all(obj[i + 1] <= obj[i] + 1e-9 for i in range(len(obj) - 1))


def test_training_stable_codes_equal_cluster_means(rng):
    pairs = random_pairs(rng)
    cb = train_codebook(pairs, LAYOUT, k=5, iters=200, seed=1)
    # long iteration budget: assignments stabilized, so codes are exact means
    zs = np.concatenate([patchify(s, LAYOUT) for s, _ in pairs])
    zs = zs[np.abs(zs).sum(axis=1) > 0]
    idx, _ = quantize(zs, cb)
    for k in range(cb.k):
        members = zs[idx == k]
        if len(members):
            assert np.abs(cb.codes[k] - members.mean(axis=0)).max() < 1e-9


def test_training_usage_covers_all_codes(rng):
    pairs = random_pairs(rng, n_pairs=10)
    cb = train_codebook(pairs, LAYOUT, k=8, iters=30, seed=2)
    assert (cb.usage >= 1).all()


def test_training_corpus_too_small(rng):
    pairs = random_pairs(rng, n_pairs=1)
    with pytest.raises(ValueError, match="non-empty sparse patches"):
        train_codebook(pairs, LAYOUT, k=64, iters=5, seed=0)


def test_degenerate_corpus_single_dominant_cluster(rng):
    patch = rng.uniform(0.2, 1.0, LAYOUT.patch_len)
    dense_patch = rng.uniform(0.2, 1.0, LAYOUT.patch_len)
    sparse = grid_from_patches(np.tile(patch, (LAYOUT.n_patches, 1)))
    dense = grid_from_patches(np.tile(dense_patch, (LAYOUT.n_patches, 1)))
    cb = train_codebook([(sparse, dense)] * 2, LAYOUT, k=3, iters=10, seed=0)
    assert (cb.usage > 0).sum() == 1
    dominant = int(np.argmax(cb.usage))
    assert np.abs(cb.dense_atoms[dominant] - dense_patch).max() < 1e-9


def test_two_separated_clusters_recovered(rng):
    a = np.zeros(LAYOUT.patch_len)
    a[:8] = 10.0
    b = np.zeros(LAYOUT.patch_len)
    b[-8:] = -10.0
    rows, labels = [], []
    for i in range(LAYOUT.n_patches * 4):
        base = a if i % 2 == 0 else b
        rows.append(base + rng.normal(0, 0.05, LAYOUT.patch_len))
        labels.append(i % 2)
    rows = np.asarray(rows)
    pairs = [
        (grid_from_patches(rows[i : i + LAYOUT.n_patches]),
         grid_from_patches(rows[i : i + LAYOUT.n_patches]))
        for i in range(0, len(rows), LAYOUT.n_patches)
    ]
    cb = train_codebook(pairs, LAYOUT, k=2, iters=20, seed=3)
    idx, _ = quantize(rows, cb)
    split = [set(np.flatnonzero(idx == k) % 2) for k in (0, 1)]
    assert split[0] != split[1]
    assert all(len(s) == 1 for s in split)


def test_zero_patches_calibrate_the_zero_code(rng):
    # grids whose sparse patches are either empty or informative: the code
    # receiving the zero patches must average the dense targets of both kinds
    dense_rows = np.ones((LAYOUT.n_patches, LAYOUT.patch_len))
    sparse_rows = np.ones((LAYOUT.n_patches, LAYOUT.patch_len))
    sparse_rows[2:] = 0.0  # half the patches transmitted nothing
    pairs = [(grid_from_patches(sparse_rows), grid_from_patches(dense_rows))] * 3
    cb = train_codebook(pairs, LAYOUT, k=1, iters=5, seed=0)
    # the single code receives 2 informative + 2 zero patches per grid, all
    # with dense target = ones
    assert np.abs(cb.dense_atoms[0] - 1.0).max() < 1e-9
    assert np.abs(cb.occ_atoms[0] - 1.0).max() < 1e-9


# --- completion ----------------------------------------------------------------

def test_complete_memorizes_patches_on_codes(rng):
    pairs = random_pairs(rng, zero_frac=0.0)
    cb = train_codebook(pairs, LAYOUT, k=4, iters=50, seed=5)
    sparse_mat = np.tile(cb.codes[1], (LAYOUT.n_patches, 1))
    result = complete(grid_from_patches(sparse_mat), cb, LAYOUT)
    assert result.code_indices.tolist() == [1] * LAYOUT.n_patches
    expect = unpatchify(np.tile(cb.dense_atoms[1], (LAYOUT.n_patches, 1)), LAYOUT, SPEC)
    assert np.array_equal(result.dense_hat.data, expect.data)


def test_complete_all_zero_input_uniform_per_patch(rng):
    pairs = random_pairs(rng)
    cb = train_codebook(pairs, LAYOUT, k=4, iters=20, seed=6)
    result = complete(PillarGrid(SPEC, np.zeros(SPEC.shape)), cb, LAYOUT)
    k0 = int(result.code_indices[0])
    assert (result.code_indices == k0).all()
    mat = patchify(result.dense_hat, LAYOUT)
    assert np.array_equal(mat, np.tile(cb.dense_atoms[k0], (LAYOUT.n_patches, 1)))


def test_complete_rejects_mismatched_layout(rng):
    pairs = random_pairs(rng)
    cb = train_codebook(pairs, LAYOUT, k=4, iters=5, seed=0)
    other_spec = GridSpec(0.0, 0.0, 1.0, 8, 8, 8)
    bad_layout = PatchLayout.for_spec(other_spec, p=2)
    with pytest.raises(ValueError):
        complete(PillarGrid(other_spec, np.zeros(other_spec.shape)), cb, bad_layout)


# --- losses ----------------------------------------------------------------

def _result_with(occ_hat, dense_hat_data):
    return CompletionResult(PillarGrid(SPEC, dense_hat_data), occ_hat)


def test_rec_loss_perfect_prediction(rng):
    dense = PillarGrid(SPEC, rng.uniform(0.1, 1.0, SPEC.shape))
    from copsim.pillars import occupancy_of

    occ = occupancy_of(dense).data.astype(np.float64)
    r = rec_loss(_result_with(np.clip(occ, 1e-9, 1 - 1e-9), dense.data), dense)
    assert r.masked_mse == 0.0
    assert r.bce < 1e-5
    assert r.total == r.bce + r.masked_mse


def test_rec_loss_half_probability_bce():
    dense = PillarGrid(SPEC, np.ones(SPEC.shape))
    r = rec_loss(_result_with(np.full((8, 8), 0.5), np.ones(SPEC.shape)), dense)
    assert r.bce == pytest.approx(np.log(2.0), abs=1e-9)


def test_rec_loss_single_cell_norm_two():
    data = np.zeros(SPEC.shape)
    data[0, 0, 0] = 1.0  # one occupied cell in the dense target
    dense = PillarGrid(SPEC, data)
    pred = np.zeros(SPEC.shape)
    pred[0, 0, 0] = 1.0
    pred[0, 0, 1] = 2.0  # error vector (0, 2, 0, ...) has norm 2
    r = rec_loss(_result_with(np.ones((8, 8)) * 0.5, pred), dense)
    assert r.masked_mse == pytest.approx(4.0)


def test_rec_loss_empty_dense_flagged(caplog):
    import logging

    dense = PillarGrid(SPEC, np.zeros(SPEC.shape))
    with caplog.at_level(logging.WARNING):
        r = rec_loss(_result_with(np.full((8, 8), 0.2), np.zeros(SPEC.shape)), dense)
    assert r.masked_mse == 0.0
    assert any("masked mse" in m for m in caplog.messages)


def test_vq_loss_values():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert vq_loss(z, z) == 0.0
    single = np.array([[1.0, 0.0]])
    assert vq_loss(single, np.array([[0.0, 0.0]]), beta=0.25) == pytest.approx(1.25)
    base = vq_loss(z, z + 0.1)
    assert vq_loss(z, z + 0.2) == pytest.approx(4.0 * base)


def test_total_codec_loss():
    assert total_codec_loss(0.0, 0.0) == 0.0
    assert total_codec_loss(0.05, 1.25, lam=10.0) == pytest.approx(1.75)
    assert total_codec_loss(123.0, 1.25, lam=0.0) == 1.25


# --- file format ----------------------------------------------------------------

def test_codebook_round_trip(tmp_path, rng):
    k, d = 16, LAYOUT.patch_len
    cb = Codebook(
        f32_grained(rng, (k, d)),
        f32_grained(rng, (k, d)),
        f32_grained(rng, (k, 16), low=0.0, high=1.0),
        rng.integers(1, 500, k),
        p=4,
        objective=np.array([3.0, 2.0]),
    )
    path = str(tmp_path / "cb.ccbk")
    write_codebook(path, cb)
    back = read_codebook(path)
    assert np.array_equal(back.codes, cb.codes)
    assert np.array_equal(back.dense_atoms, cb.dense_atoms)
    assert np.array_equal(back.occ_atoms, cb.occ_atoms)
    assert np.array_equal(back.usage, cb.usage)
    assert back.p == cb.p
    assert back.objective is None  # diagnostics stay out of the file format


def test_codebook_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "bad.ccbk")
    with open(path, "wb") as f:
        f.write(b"WHAT" + bytes(40))
    with pytest.raises(ValueError, match="magic"):
        read_codebook(path)
