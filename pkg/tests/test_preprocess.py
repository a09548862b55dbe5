import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import clahe_bruteforce, histogram_equalize
from panogan import preprocess as pp
from panogan.errors import FormatError, InvalidInputError


def test_clahe_constant_image_stays_constant():
    img = np.full((40, 33), 0.5)
    out = pp.clahe(img, pp.ClaheParams(tile_size=16, clip_limit=0.01))
    assert out.shape == img.shape
    assert np.ptp(out) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_clahe_matches_bruteforce(seed):
    img = np.random.default_rng(seed).random((16, 16))
    out = pp.clahe(img, pp.ClaheParams(tile_size=8, clip_limit=0.01))
    ref = np.array(clahe_bruteforce(img.tolist(), 8, 0.01, 256))
    assert np.array_equal(out, ref)


def test_clahe_matches_bruteforce_with_ragged_border_tiles():
    img = np.random.default_rng(9).random((21, 13))
    params = pp.ClaheParams(tile_size=6, clip_limit=0.05, num_bins=32)
    ref = np.array(clahe_bruteforce(img.tolist(), 6, 0.05, 32))
    assert np.array_equal(pp.clahe(img, params), ref)


def test_clahe_full_clip_is_plain_equalization():
    img = np.random.default_rng(1).random((8, 8))
    out = pp.clahe(img, pp.ClaheParams(tile_size=8, clip_limit=1.0))
    assert np.array_equal(out, np.array(histogram_equalize(img.tolist(), 256)))


def test_clahe_output_in_unit_range():
    img = np.random.default_rng(2).random((50, 70)) ** 3
    out = pp.clahe(img, pp.ClaheParams(tile_size=16))
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("bad", [np.full((4, 4), np.nan), np.full((4, 4), 1.5), np.zeros((0, 3)),
                                 np.zeros((2, 2, 2))])
def test_clahe_rejects_invalid_images(bad):
    with pytest.raises(InvalidInputError):
        pp.clahe(bad)


@pytest.mark.parametrize("kwargs", [{"tile_size": 1}, {"clip_limit": 0.0}, {"clip_limit": 1.1},
                                    {"num_bins": 1}])
def test_clahe_params_validated(kwargs):
    with pytest.raises(InvalidInputError):
        pp.ClaheParams(**kwargs)


def test_resize_identity():
    img = np.random.default_rng(3).random((4, 4))
    assert np.array_equal(pp.resize(img, 4), img)


def test_resize_checkerboard_to_single_pixel():
    # half-pixel convention: the one output pixel samples the source center,
    # which blends all four source pixels equally
    assert pp.resize(np.array([[0.0, 1.0], [1.0, 0.0]]), 1).tolist() == [[0.5]]


def test_resize_upsample_golden():
    out = pp.resize(np.array([[0.0, 1.0], [1.0, 0.0]]), 4)
    expected = np.array([
        [0.0, 0.25, 0.75, 1.0],
        [0.25, 0.375, 0.625, 0.75],
        [0.75, 0.625, 0.375, 0.25],
        [1.0, 0.75, 0.25, 0.0],
    ])
    assert np.allclose(out, expected, atol=1e-15)


@given(st.floats(0, 1), st.integers(1, 20), st.integers(1, 9), st.integers(1, 9))
def test_resize_constant(value, target, h, w):
    out = pp.resize(np.full((h, w), value), target)
    assert out.shape == (target, target)
    assert np.allclose(out, value, rtol=0, atol=1e-15)


def test_resize_rejects_zero_target():
    with pytest.raises(InvalidInputError):
        pp.resize(np.zeros((3, 3)), 0)


def test_extract_corners():
    patches = pp.extract_patches(np.zeros((128, 128)), np.ones((128, 128), bool), 64, 64, 0.5)
    assert sorted((p.y, p.x) for p in patches) == [(0, 0), (0, 64), (64, 0), (64, 64)]
    assert all(p.label is None for p in patches)


def test_extract_all_false_mask():
    assert pp.extract_patches(np.zeros((128, 128)), np.zeros((128, 128), bool), 64, 64, 0.1) == []


def test_extract_overlapping_stride():
    patches = pp.extract_patches(np.zeros((96, 96)), np.ones((96, 96), bool), 64, 32, 0.5)
    assert len(patches) == 4


def test_extract_rescales_intensities():
    img = np.random.default_rng(4).random((64, 64))
    (p,) = pp.extract_patches(img, np.ones((64, 64), bool), 64)
    assert p.data.dtype == np.float32
    assert np.allclose(p.data, 2 * img - 1, atol=1e-7)


def test_extract_mask_shape_mismatch():
    with pytest.raises(InvalidInputError):
        pp.extract_patches(np.zeros((10, 10)), np.ones((10, 11), bool), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 40), st.integers(8, 40), st.integers(2, 8), st.integers(1, 6),
       st.floats(0, 1), st.integers(0, 2 ** 16))
def test_extract_count_bound_and_coverage(h, w, size, stride, coverage, seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((h, w)) < 0.6
    patches = pp.extract_patches(rng.random((h, w)), mask, size, stride, coverage)
    bound = ((w - size) // stride + 1) * ((h - size) // stride + 1)
    assert len(patches) <= bound
    for p in patches:
        assert mask[p.y:p.y + size, p.x:p.x + size].sum() / size ** 2 >= coverage
        assert p.data.min() >= -1 and p.data.max() <= 1


@given(st.floats(0, 1))
def test_intensity_rescale_round_trip(v):
    assert pp.from_patch_range(pp.to_patch_range(v)) == pytest.approx(v, abs=1e-15)


def _patch(x, y, size=64):
    return pp.Patch(np.zeros((size, size), np.float32), None, "img", x, y)


def test_label_healthy_all_normal():
    out = pp.label_patches([_patch(0, 0), _patch(64, 0)], [pp.NoduleAnnotation(10, 10)],
                           pp.HEALTHY_SOURCE)
    assert [p.label for p in out] == [pp.NORMAL, pp.NORMAL]


def test_label_unhealthy_containment():
    out = pp.label_patches([_patch(0, 0)], [pp.NoduleAnnotation(10, 10)], pp.UNHEALTHY_SOURCE)
    assert [p.label for p in out] == [pp.ABNORMAL]


def test_label_unhealthy_discards_non_containing():
    assert pp.label_patches([_patch(0, 0)], [pp.NoduleAnnotation(100, 100)],
                            pp.UNHEALTHY_SOURCE) == []


def test_label_bounds_half_open():
    p = _patch(0, 0)
    assert p.contains(63.9, 0) and not p.contains(64, 0) and not p.contains(0, 64)


def test_label_unknown_policy():
    with pytest.raises(InvalidInputError):
        pp.label_patches([], [], "sometimes")


def test_pgm_round_trip_8_and_16_bit(tmp_path):
    img = np.random.default_rng(5).random((7, 9))
    for maxval in (255, 65535):
        path = tmp_path / f"img{maxval}.pgm"
        pp.write_pgm(path, img, maxval)
        back = pp.read_pgm(path)
        assert back.shape == (7, 9)
        assert np.allclose(back, img, atol=0.5 / maxval + 1e-12)


def test_pgm_header_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n" + bytes([0, 255]))
    assert pp.read_pgm(path).tolist() == [[0.0, 1.0]]


def test_pgm_rejects_ascii(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(FormatError):
        pp.read_pgm(path)


def test_raw_float_round_trip(tmp_path):
    img = np.random.default_rng(6).random((5, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "x.raw"
    pp.write_raw_float(path, img)
    assert path.read_bytes().startswith(b"3 5\n")
    assert np.array_equal(pp.read_raw_float(path), img)


def test_annotations(tmp_path):
    path = tmp_path / "a.json"
    path.write_text('{"image_id": "p1", "centroids": [[3, 4], [5.5, 6]]}')
    image_id, cents = pp.read_annotations(path)
    assert image_id == "p1"
    assert cents == [pp.NoduleAnnotation(3, 4), pp.NoduleAnnotation(5.5, 6)]
    with pytest.raises(InvalidInputError):
        pp.check_annotations(cents, (5, 5))
