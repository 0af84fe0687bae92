import math
import struct

import numpy as np
import pytest
from scipy import stats

from vitae import data
from vitae.errors import BadMagic, TruncatedFile


@pytest.fixture(scope="module")
def full_grid():
    return data.generate_sprites(seed=0)


def test_full_grid_size_and_factors(full_grid):
    assert len(full_grid) == 3 * 6 * 8 * 8 * 8 == 9216
    assert full_grid.images.shape == (9216, 1, 64, 64)
    assert [s.cardinality for s in full_grid.factor_specs] == [3, 6, 8, 8, 8]
    # each factor combination appears exactly once
    assert len(np.unique(full_grid.factors, axis=0)) == 9216


def test_pixels_binary_and_in_range(full_grid):
    assert set(np.unique(full_grid.images)) <= {0.0, 1.0}
    assert np.all(full_grid.images.reshape(9216, -1).sum(axis=1) > 0)


def test_same_seed_same_subsample():
    a = data.generate_sprites(seed=3, subsample=50)
    b = data.generate_sprites(seed=3, subsample=50)
    c = data.generate_sprites(seed=4, subsample=50)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.factors, b.factors)
    assert not np.array_equal(a.factors, c.factors)


def test_rasterization_is_pure():
    a = data.rasterize(2, 0.7, 1.1, 0.4, 0.6)
    b = data.rasterize(2, 0.7, 1.1, 0.4, 0.6)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("shape", [0, 1, 2])
def test_centred_max_scale_area(shape):
    img = data.rasterize(shape, 1.0, 0.0, 0.5, 0.5)
    area = data.shape_area(shape, 1.0)
    assert abs(img.sum() - area) <= 0.02 * area


def test_square_area_exact():
    assert data.rasterize(0, 1.0, 0.0, 0.5, 0.5).sum() == 4 * data.SPRITE_RADIUS ** 2


def test_orientation_rotates_shape():
    # a quarter turn of the ellipse swaps its extents
    h = data.rasterize(1, 1.0, 0.0, 0.5, 0.5)
    v = data.rasterize(1, 1.0, math.pi / 2, 0.5, 0.5)
    assert np.array_equal(h, v.T)


def test_position_moves_centroid():
    img = data.rasterize(0, 0.5, 0.0, 0.2, 0.8)
    ys, xs = np.nonzero(img)
    assert xs.mean() + 0.5 == pytest.approx(0.2 * 64, abs=0.5)
    assert ys.mean() + 0.5 == pytest.approx(0.8 * 64, abs=0.5)


def test_dataset_validates_discrete_range():
    with pytest.raises(ValueError):
        data.LabeledImageDataset(np.zeros((1, 1, 2, 2)), np.array([[3]]), [data.FactorSpec("f", "discrete", 3)])
    with pytest.raises(ValueError):
        data.LabeledImageDataset(np.zeros((2, 1, 2, 2)), np.array([[0]]), [])


# -- IDX ---------------------------------------------------------------------------
def test_idx_images_fixture(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(struct.pack(">IIII", 0x803, 1, 2, 2) + bytes([0, 128, 255, 64]))
    out = data.load_idx(p)
    assert out.shape == (1, 2, 2)
    assert np.array_equal(out.reshape(-1), [0, 128 / 255, 1, 64 / 255])


def test_idx_labels_fixture(tmp_path):
    p = tmp_path / "lab.idx"
    p.write_bytes(struct.pack(">II", 0x801, 3) + bytes([7, 0, 9]))
    out = data.load_idx(p)
    assert out.shape == (3,)
    assert list(out) == [7, 0, 9]


def test_idx_bad_magic(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(struct.pack(">II", 0x802, 1) + b"\x00")
    with pytest.raises(BadMagic):
        data.load_idx(p)


def test_idx_truncated(tmp_path):
    p = tmp_path / "short.idx"
    p.write_bytes(struct.pack(">IIII", 0x803, 2, 2, 2) + bytes(5))
    with pytest.raises(TruncatedFile):
        data.load_idx(p)
    p.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFile):
        data.load_idx(p)


def test_idx_write_round_trip_and_mnist(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 256, size=(4, 3, 5)).astype(np.uint8)
    labels = np.array([1, 2, 3, 9])
    data.write_idx(tmp_path / "i.idx", imgs)
    data.write_idx(tmp_path / "l.idx", labels)
    ds = data.load_mnist(tmp_path / "i.idx", tmp_path / "l.idx")
    assert ds.images.shape == (4, 1, 3, 5)
    assert np.array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)
    assert list(ds.factors[:, 0]) == [1, 2, 3, 9]
    assert ds.images.min() >= 0 and ds.images.max() <= 1


# -- augmentation ------------------------------------------------------------------------
def test_augmentation_reproducible():
    imgs = data.generate_sprites(seed=0, subsample=8).images
    assert np.array_equal(data.augment_rotate_translate(imgs, 5), data.augment_rotate_translate(imgs, 5))


def test_zero_width_augmentation_is_identity():
    imgs = data.generate_sprites(seed=0, subsample=8).images
    out = data.augment_rotate_translate(imgs, 1, max_angle_deg=0.0, max_shift=0.0)
    assert np.max(np.abs(out - imgs)) <= 1e-12


def test_translation_mass_bookkeeping():
    # Pure shifts of up to s pixels lose at most the mass within ceil(s) + 1
    # pixels of the border, and never create mass.
    s = 3.0
    r = np.random.default_rng(2)
    imgs = r.uniform(size=(20, 1, 16, 16))
    out = data.augment_rotate_translate(imgs, 3, max_angle_deg=0.0, max_shift=s)
    band = int(math.ceil(s)) + 1
    inner = np.zeros((16, 16), dtype=bool)
    inner[band:-band, band:-band] = True
    border_mass = imgs[:, 0][:, ~inner].sum(axis=1)
    change = imgs.reshape(20, -1).sum(axis=1) - out.reshape(20, -1).sum(axis=1)
    assert np.all(change >= -1e-9)
    assert np.all(change <= border_mass + 1e-9)


def test_augmentation_moves_content_by_the_draw():
    img = np.zeros((1, 1, 32, 32))
    img[0, 0, 16, 10] = 1.0
    out, angles, shifts = data.augment_rotate_translate(img, 7, max_angle_deg=0.0, return_draws=True)
    ys, xs = np.nonzero(out[0, 0] > 0)
    w = out[0, 0][ys, xs]
    assert np.sum(w * xs) / w.sum() == pytest.approx(10 + shifts[0, 0], abs=1e-9)
    assert np.sum(w * ys) / w.sum() == pytest.approx(16 + shifts[0, 1], abs=1e-9)


def test_augmentation_draw_distribution():
    angles, shifts = data.sample_augmentation(np.random.default_rng(0), 10_000)
    a = math.radians(20.0)
    assert angles.min() >= -a and angles.max() <= a
    assert shifts.min() >= -3.0 and shifts.max() <= 3.0
    assert stats.kstest(angles, stats.uniform(-a, 2 * a).cdf).statistic < 0.02
    for k in range(2):
        assert stats.kstest(shifts[:, k], stats.uniform(-3, 6).cdf).statistic < 0.02


def test_augment_dataset_keeps_factors():
    ds = data.generate_sprites(seed=0, subsample=6)
    aug = data.augment_dataset(ds, 1)
    assert np.array_equal(aug.factors, ds.factors)
    assert aug.images.min() >= 0 and aug.images.max() <= 1


# -- batching ------------------------------------------------------------------------------
def test_batch_sizes():
    assert [len(b) for b in data.batch_iter(10, 4, seed=0, epoch=0)] == [4, 4, 2]


def test_batch_order_depends_on_seed_and_epoch():
    order = lambda s, e: np.concatenate(list(data.batch_iter(50, 8, s, e)))
    assert np.array_equal(order(1, 2), order(1, 2))
    assert not np.array_equal(order(1, 2), order(1, 3))


def test_batches_cover_dataset_once():
    idx = np.concatenate(list(data.batch_iter(37, 5, seed=4, epoch=1)))
    assert sorted(idx.tolist()) == list(range(37))


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        list(data.batch_iter(5, 0, 0, 0))


def test_split_indices():
    tr, te = data.split_indices(100, seed=0)
    assert len(tr) == 80 and len(te) == 20
    assert not set(tr) & set(te)


def test_dataset_cache_round_trip(tmp_path):
    ds = data.generate_sprites(seed=0, subsample=12)
    data.save_dataset(tmp_path, ds)
    back = data.load_dataset(tmp_path)
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.factors, ds.factors)
    assert [s.header() for s in back.factor_specs] == [s.header() for s in ds.factor_specs]
    assert (tmp_path / "sprites.specs").read_text().split()[0] == "shape:discrete:3"
