import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from segkit import data as D
from segkit.data import AffineDraw, AugmentParams, Sample


def _png(path, arr, mode=None):
    Image.fromarray(arr, mode).save(path)
    return path


# ---------------------------------------------------------------- loading

def test_load_sample_shapes_and_scaling(tmp_path):
    img = np.zeros((576, 576, 3), np.uint8)
    img[0, 0] = 255
    s = D.load_sample(_png(tmp_path / "a.png", img), _png(tmp_path / "m.png", np.zeros((576, 576), np.uint8)))
    assert s.image.shape == (3, 576, 576)
    assert s.image[:, 0, 0].tolist() == [1.0, 1.0, 1.0]
    assert s.mask.sum() == 0 and s.source_id == "a"


def test_jpeg_mask_threshold(tmp_path):
    m = np.zeros((32, 32), np.uint8)
    m[8:24, 8:24] = 255
    Image.fromarray(m).save(tmp_path / "m.jpg", quality=60)
    loaded = D.load_mask(tmp_path / "m.jpg")
    assert set(np.unique(loaded)) <= {0, 1}
    assert abs(int(loaded.sum()) - 256) <= 8
    assert D.load_mask(_png(tmp_path / "x.png", np.full((4, 4), 127, np.uint8))).sum() == 0


def test_non_rgb_image_rejected(tmp_path):
    with pytest.raises(D.ImageFormatError):
        D.load_image(_png(tmp_path / "g.png", np.zeros((8, 8), np.uint8)))
    with pytest.raises(D.DataError):
        D.load_image(tmp_path / "missing.png")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(D.DataError):
        D.load_image(tmp_path / "bad.png")


def test_mask_image_size_mismatch(tmp_path):
    with pytest.raises(D.ImageFormatError):
        D.load_sample(_png(tmp_path / "a.png", np.zeros((8, 8, 3), np.uint8)),
                      _png(tmp_path / "m.png", np.zeros((8, 9), np.uint8)))


def test_dataset_round_trip(tmp_path):
    samples = D.synth_blobs(np.random.default_rng(0), 5, 32, 2)
    for s in samples:
        D.save_sample(s, tmp_path)
    _png(tmp_path / "images" / "unlabeled.png", np.zeros((32, 32, 3), np.uint8))
    loaded = D.load_dataset(tmp_path)
    assert [s.source_id for s in loaded] == [s.source_id for s in samples]
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-7
    assert len(D.load_dataset(tmp_path, annotated_only=False)) == 6


def test_empty_dataset(tmp_path):
    with pytest.raises(D.DataError):
        D.dataset_pairs(tmp_path)
    (tmp_path / "images").mkdir()
    with pytest.raises(D.DataError):
        D.dataset_pairs(tmp_path)


# ---------------------------------------------------------------- preprocessing

def _sample(h=576, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.random((3, h, h)).astype(np.float32), np.zeros((h, h), np.uint8), "s")


def test_center_crop():
    s = _sample()
    s.mask[300, 300] = 1
    c = D.center_crop(s, 512)
    assert c.image.shape == (3, 512, 512)
    assert np.array_equal(c.image, s.image[:, 32:544, 32:544])
    assert c.mask[268, 268] == 1 and c.mask.sum() == 1
    same = D.center_crop(s, 576)
    assert np.array_equal(same.image, s.image) and np.array_equal(same.mask, s.mask)
    with pytest.raises(ValueError):
        D.center_crop(s, 600)


def test_standardize():
    s = _sample(8)
    assert np.array_equal(D.standardize(s, (0, 0, 0), (1, 1, 1)).image, s.image)
    mean = (0.2, 0.5, 0.7)
    const = Sample(np.broadcast_to(np.array(mean, np.float32)[:, None, None], (3, 4, 4)).copy(), None, "c")
    assert np.abs(D.standardize(const, mean, (0.3, 0.3, 0.3)).image).max() < 1e-6
    own_mean = s.image.mean(axis=(1, 2))
    own_std = s.image.std(axis=(1, 2))
    out = D.standardize(s, own_mean, own_std).image
    assert np.allclose(out.mean(axis=(1, 2)), 0, atol=1e-5)
    assert np.allclose(out.std(axis=(1, 2)), 1, atol=1e-4)
    with pytest.raises(ValueError):
        D.standardize(s, mean, (1, 0, 1))


# ---------------------------------------------------------------- folds

def test_split_examples():
    ids = [f"id{i}" for i in range(299)]
    assert D.split_folds(ids, 5, 0).sizes == [60, 60, 60, 60, 59]
    assert D.split_folds(ids, 5, 3).assignment == D.split_folds(ids, 5, 3).assignment
    assert D.split_folds([str(i) for i in range(10)], 5, 1).sizes == [2] * 5
    with pytest.raises(ValueError):
        D.split_folds(["a", "a", "b"], 2)
    with pytest.raises(ValueError):
        D.split_folds(["a"], 2)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(2, 400), k=st.integers(2, 10), seed=st.integers(0, 2**32 - 1))
def test_split_is_a_balanced_partition(n, k, seed):
    if n < k:
        return
    ids = [f"s{i}" for i in range(n)]
    split = D.split_folds(ids, k, seed)
    folds = [set(split.fold(i)) for i in range(k)]
    assert set().union(*folds) == set(ids)
    assert sum(len(f) for f in folds) == n
    assert max(split.sizes) - min(split.sizes) <= 1


def test_fold_table_round_trip(tmp_path):
    split = D.split_folds([f"x{i}" for i in range(23)], 4, 9)
    split.to_csv(tmp_path / "f.csv")
    back = D.FoldSplit.from_csv(tmp_path / "f.csv")
    assert back.assignment == split.assignment and back.k == 4


# ---------------------------------------------------------------- augmentation

def test_identity_augmentation_is_exact():
    s = _sample(32)
    s.mask[5:9, 10:20] = 1
    out = D.augment_affine(s, AugmentParams.identity(), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)
    img = D.augment_hsv(s.image, AugmentParams.identity(), np.random.default_rng(0))
    assert np.abs(img - s.image).max() <= 1e-6


def test_horizontal_flip():
    s = _sample(16)
    s.mask[3:7, 1:5] = 1
    out = D.apply_affine(s, AffineDraw(hflip=True))
    assert np.allclose(out.image, s.image[:, :, ::-1], atol=1e-6)
    assert np.array_equal(out.mask, s.mask[:, ::-1])
    assert out.mask.sum() == s.mask.sum()


def test_rotation_by_90_moves_centroid():
    size = 33
    s = Sample(np.zeros((3, size, size), np.float32), D.ellipse_mask((size, size), (8, 22), (3, 3)).astype(np.uint8),
               "r")
    out = D.apply_affine(s, AffineDraw(angle=90.0))
    c = (size - 1) / 2
    r0, c0 = np.argwhere(s.mask).mean(axis=0)
    r1, c1 = np.argwhere(out.mask).mean(axis=0)
    # counter-clockwise as displayed: (row, col) -> (c - (col - c), c + (row - c))
    assert abs(r1 - (c - (c0 - c))) <= 1 and abs(c1 - (c + (r0 - c))) <= 1
    assert np.array_equal(out.mask, np.rot90(s.mask))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augmentation_keeps_image_and_mask_aligned(seed):
    rng = np.random.default_rng(seed)
    size = 32
    mask = D.ellipse_mask((size, size), rng.uniform(10, 22, 2), (4, 6), rng.uniform(0, 180))
    # the image encodes each pixel's own (row, col); bilinear sampling reproduces ramps exactly
    rr, cc = np.mgrid[:size, :size].astype(np.float32)
    image = np.stack([rr / size, cc / size, np.zeros_like(rr)])
    out = D.augment_affine(Sample(image, mask.astype(np.uint8), "a"), AugmentParams(), rng)
    src = np.stack([out.image[0], out.image[1]], axis=-1) * size
    for r, c in np.argwhere(out.mask > 0):
        sr, sc = src[r, c]
        if not (1 <= sr <= size - 2 and 1 <= sc <= size - 2):
            continue  # reflected border pixels are not linear in the source coordinate
        near = [(i, j) for i in (int(np.floor(sr)), int(np.ceil(sr))) for j in (int(np.floor(sc)), int(np.ceil(sc)))
                if abs(i - sr) <= 0.5 + 1e-4 and abs(j - sc) <= 0.5 + 1e-4]
        assert any(mask[i, j] for i, j in near), (r, c, sr, sc)


def test_hsv_conversions():
    red = np.array([1.0, 0, 0]).reshape(3, 1, 1)
    assert D.rgb_to_hsv(red).ravel().tolist() == [0.0, 1.0, 1.0]
    img = np.random.default_rng(0).random((3, 16, 16))
    assert np.abs(D.hsv_to_rgb(D.rgb_to_hsv(img)) - img).max() <= 1e-6
    assert np.abs(D.jitter_hsv(img, 0.0, 1.0, 1.0) - img).max() <= 1e-6
    gray = np.full((3, 4, 4), 0.6)
    assert np.allclose(D.jitter_hsv(gray, 0.0, 1.0, 0.5), 0.3)
    green = D.jitter_hsv(red, 120.0, 1.0, 1.0)
    assert np.allclose(green.ravel(), [0, 1, 0])


def test_augment_params_validation():
    assert AugmentParams().validate() == []
    bad = AugmentParams(rotation=-1, hflip=2, scale=(1.2, 1.0))
    assert len(bad.validate()) == 3


# ---------------------------------------------------------------- synthetic data

def test_synth_blobs_bounds():
    samples = D.synth_blobs(np.random.default_rng(0), 200, 64, 3)
    assert len(samples) == 200 and len({s.source_id for s in samples}) == 200
    for s in samples:
        assert s.image.shape == (3, 64, 64) and 0 <= s.mask.sum() <= 64 * 64
        assert 0 <= s.image.min() and s.image.max() <= 1


def test_zero_lesions_gives_empty_mask():
    assert D.synth_sample(np.random.default_rng(0), 64, 0).mask.sum() == 0


def test_rasterized_blob():
    m = D.ellipse_mask((32, 32), (12.0, 17.0), (5, 5))
    assert 60 <= m.sum() <= 100
    r, c = np.argwhere(m).mean(axis=0)
    assert abs(r - 12) <= 1 and abs(c - 17) <= 1


def test_lesion_count_weights():
    w = D.lesion_count_weights(3, 0.2)
    assert w.sum() == pytest.approx(1) and w[0] == pytest.approx(0.2)
    assert w[1] > w[2] > w[3]


def test_empty_fraction_produces_normal_frames():
    samples = D.synth_blobs(np.random.default_rng(1), 100, 32, 2, empty_fraction=0.5, radius_range=(3, 5))
    empty = sum(s.mask.sum() == 0 for s in samples)
    assert 30 <= empty <= 70


# ---------------------------------------------------------------- batches

def test_make_batch_is_thread_independent():
    samples = D.synth_blobs(np.random.default_rng(2), 8, 32, 2)
    a = D.make_batch(samples, [3, 1, 4, 0], AugmentParams(), seed=5, epoch=2, threads=1)
    b = D.make_batch(samples, [3, 1, 4, 0], AugmentParams(), seed=5, epoch=2, threads=4)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[0].shape == (4, 3, 32, 32) and a[1].shape == (4, 1, 32, 32)
    assert a[0].dtype == np.float32 and set(np.unique(a[1])) <= {0.0, 1.0}
