import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from segtransgan import data as D
from segtransgan import tensor as T


# -- phantoms -----------------------------------------------------------------

def test_noise_free_phantom_is_two_valued():
    cfg = D.PhantomConfig(noise_sigma=0.0, offset_range=(0.4, 0.4), base_range=(0.3, 0.3), blur_width=1)
    s = D.generate_phantom(T.Rng(0), cfg)
    assert set(np.unique(s.image).tolist()) == {0.3, 0.3 + 0.4}
    assert np.array_equal(s.image[0] == 0.3 + 0.4, s.mask[0] == 1)


def test_blur_and_noise_leave_mask_untouched():
    clean = D.PhantomConfig(noise_sigma=0.0, blur_width=1)
    noisy = D.PhantomConfig()
    a, b = D.generate_phantom(T.Rng(4), clean), D.generate_phantom(T.Rng(4), noisy)
    assert np.array_equal(a.mask, b.mask)
    assert set(np.unique(b.mask).tolist()) <= {0.0, 1.0}
    assert b.image.min() >= 0 and b.image.max() <= 1


def test_phantom_determinism():
    a, b = D.generate_phantom(T.Rng(9)), D.generate_phantom(T.Rng(9))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    c = D.generate_phantom(T.Rng(10))
    assert not np.array_equal(a.mask, c.mask)


def test_foreground_fraction_sweep():
    cfg = D.PhantomConfig()
    root = T.Rng(2024)
    fracs = np.array([D.generate_phantom(root.derive(i), cfg).mask.mean() for i in range(1000)])
    assert fracs.min() >= 0.02 and fracs.max() <= 0.6


def test_phantom_shape_variability():
    fracs = [s.mask.mean() for s in D.generate_phantoms(50, 0)]
    assert np.std(fracs) > 0.01  # sizes actually vary


def test_degenerate_config_raises():
    cfg = D.PhantomConfig(min_fraction=0.9, max_fraction=0.95)
    with pytest.raises(D.PhantomGenerationError):
        D.generate_phantom(T.Rng(0), cfg)


def test_phantom_config_validation():
    with pytest.raises(ValueError):
        D.PhantomConfig(size=30)
    with pytest.raises(ValueError):
        D.PhantomConfig(offset_range=(0.5, 0.2))


def test_box_blur_mean_filter():
    img = np.zeros((5, 5))
    img[2, 2] = 9.0
    out = D.box_blur(img, 3)
    assert np.allclose(out[1:4, 1:4], 1.0) and out.sum() == pytest.approx(9.0)
    assert np.array_equal(D.box_blur(img, 1), img)


# -- samples ------------------------------------------------------------------

def test_sample_validation():
    with pytest.raises(D.NonBinaryMaskError):
        D.Sample(np.zeros((1, 4, 4)), np.full((1, 4, 4), 0.5), "x")
    with pytest.raises(T.ShapeError):
        D.Sample(np.zeros((1, 4, 4)), np.zeros((1, 4, 8)), "x")


# -- PGM ------------------------------------------------------------------------

def test_pgm_definition_example(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 255, 0, 255]))
    assert D.load_pgm(tmp_path / "a.pgm").ravel().tolist() == [0.0, 1.0, 0.0, 1.0]


def test_pgm_comments_tolerated(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n# depth\n255\n" + bytes([10, 20]))
    assert D.read_pgm_raw(tmp_path / "c.pgm")[0].tolist() == [[10, 20]]


@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_8bit_round_trip(tmp_path_factory, ints):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    img = ints / 255.0
    D.save_pgm(path, img)
    back = D.load_pgm(path)
    assert np.array_equal(back, img)
    assert np.array_equal(D.read_pgm_raw(path)[0], ints)
    D.save_pgm(path.with_name("y.pgm"), back)
    assert path.read_bytes() == path.with_name("y.pgm").read_bytes()


@given(hnp.arrays(np.uint16, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_16bit_round_trip(tmp_path_factory, ints):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    D.save_pgm(path, ints / 65535.0, maxval=65535)
    raw, maxval = D.read_pgm_raw(path)
    assert maxval == 65535 and np.array_equal(raw, ints)
    assert np.array_equal(D.load_pgm(path), ints / 65535.0)


def test_pgm_16bit_is_big_endian(tmp_path):
    D.save_pgm(tmp_path / "x.pgm", np.array([[258 / 65535]]), maxval=65535)
    assert (tmp_path / "x.pgm").read_bytes().endswith(bytes([1, 2]))


def test_pgm_errors_are_distinct(tmp_path):
    (tmp_path / "magic.pgm").write_bytes(b"P2 2 2 255\n0 0 0 0")
    with pytest.raises(D.BadMagicError):
        D.load_pgm(tmp_path / "magic.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 1, 2]))
    with pytest.raises(D.TruncatedPayloadError):
        D.load_pgm(tmp_path / "short.pgm")
    (tmp_path / "mask.pgm").write_bytes(b"P5 2 2 255\n" + bytes([0, 7, 255, 0]))
    with pytest.raises(D.NonBinaryMaskError):
        D.load_pgm(tmp_path / "mask.pgm", mask=True)
    (tmp_path / "depth.pgm").write_bytes(b"P5 2 2 1023\n" + bytes(8))
    with pytest.raises(D.UnsupportedMaxvalError):
        D.load_pgm(tmp_path / "depth.pgm")
    errors = [D.BadMagicError, D.TruncatedPayloadError, D.NonBinaryMaskError, D.UnsupportedMaxvalError]
    assert len(set(errors)) == 4 and all(issubclass(e, D.PGMError) for e in errors)


def test_mask_binarity_survives_io(tmp_path):
    s = D.generate_phantoms(3, 1)
    D.save_dataset(tmp_path, s)
    for orig in s:
        back = D.load_sample(tmp_path, orig.id)
        assert np.array_equal(back.mask, orig.mask)
        assert np.abs(back.image - orig.image).max() <= 0.5 / 255 + 1e-12


# -- splits -------------------------------------------------------------------------

def test_split_95_36():
    ids = [f"{i:04d}" for i in range(131)]
    s = D.split_dataset(ids, 95 / 131, 0)
    assert (len(s.train), len(s.test)) == (95, 36)


@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2 ** 31))
def test_split_is_partition(n, frac, seed):
    ids = [str(i) for i in range(n)]
    s = D.split_dataset(ids, frac, seed)
    assert not set(s.train) & set(s.test)
    assert sorted(s.train + s.test, key=int) == ids
    assert s.train and s.test
    assert s.train == D.split_dataset(ids, frac, seed).train


@pytest.mark.parametrize("k,n", [(7, 25), (14, 25), (15, 29), (95, 131)])
def test_split_exact_ratio_despite_float_rounding(k, n):
    s = D.split_dataset([str(i) for i in range(n)], k / n, 0)
    assert (len(s.train), len(s.test)) == (k, n - k)


def test_split_seed_and_boundary():
    ids = [str(i) for i in range(50)]
    assert D.split_dataset(ids, 0.5, 1).train != D.split_dataset(ids, 0.5, 2).train
    s = D.split_dataset(["a", "b"], 0.5, 0)
    assert (len(s.train), len(s.test)) == (1, 1)
    with pytest.raises(ValueError):
        D.split_dataset(["a"], 0.5, 0)


def test_split_manifest_round_trip(tmp_path):
    s = D.split_dataset([f"{i:03d}" for i in range(10)], 0.7, 3)
    D.write_split(tmp_path / "split.txt", s)
    assert D.read_split(tmp_path / "split.txt") == s


# -- batching ----------------------------------------------------------------------

def test_batch_sizes_and_partial_batch():
    samples = D.generate_phantoms(5, 0, D.PhantomConfig(size=16))
    sizes = [img.shape[0] for img, _ in D.batches(samples, 2, T.Rng(0))]
    assert sizes == [2, 2, 1]


def test_unbatch_is_bitwise_inverse():
    samples = D.generate_phantoms(3, 0, D.PhantomConfig(size=16))
    image, mask = D.make_batch(samples)
    for a, b in zip(samples, D.unbatch(image, mask, [s.id for s in samples])):
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) and a.id == b.id


def test_epoch_orders_differ_and_cover():
    rng = T.Rng(0)
    a, b = D.epoch_order(20, rng, 0), D.epoch_order(20, rng, 1)
    assert not np.array_equal(a, b)
    assert sorted(a) == list(range(20))
    assert np.array_equal(a, D.epoch_order(20, T.Rng(0), 0))


def test_heterogeneous_sizes_rejected():
    samples = D.generate_phantoms(1, 0, D.PhantomConfig(size=16)) + D.generate_phantoms(1, 0, D.PhantomConfig(size=8))
    with pytest.raises(T.ShapeError):
        list(D.batches(samples, 2, T.Rng(0)))
