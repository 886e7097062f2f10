import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.fft import dctn

import vidt.tensor as T
from vidt.errors import ConfigurationError
from vidt.tensor.gradcheck import check_gradients
from vidt.uqr import (MaskHead, crop_resample, dct_decode, dct_encode, dct_matrix, encode_instance, mask_iou,
                      naive_dct2, paste_instance, zigzag_indices)

# IoU of the n=64 reconstruction of a centred 32x32 square on a 64x64 grid,
# computed with scipy.fft.dctn(norm="ortho") and zigzag truncation.
CENTRED_SQUARE_IOU_64 = 0.984375


@pytest.mark.parametrize("m", [1, 2, 3, 8, 31, 64])
def test_dct_matrix_is_orthonormal(m):
    a = dct_matrix(m)
    np.testing.assert_allclose(a @ a.T, np.eye(m), atol=1e-12, rtol=0)


@pytest.mark.parametrize("m", [1, 2, 5, 8])
def test_matrix_dct_matches_double_sum(m):
    rng = np.random.default_rng(m)
    s = rng.normal(size=(m, m))
    a = dct_matrix(m)
    np.testing.assert_allclose(a @ s @ a.T, naive_dct2(s), atol=1e-9, rtol=0)


@pytest.mark.parametrize("m", [4, 16, 64])
def test_matrix_dct_matches_scipy(m):
    s = np.random.default_rng(m).normal(size=(m, m))
    a = dct_matrix(m)
    np.testing.assert_allclose(a @ s @ a.T, dctn(s, norm="ortho"), atol=1e-10)


@pytest.mark.parametrize("m", [3, 8, 64])
def test_zigzag_visits_every_index_once(m):
    zz = zigzag_indices(m)
    assert tuple(zz[0]) == (0, 0)
    assert len({tuple(p) for p in zz}) == m * m
    assert (np.abs(np.diff(zz, axis=0)).max(axis=1) <= 1).all() or m == 1


def test_zigzag_prefix_is_low_frequency():
    zz = zigzag_indices(8)
    assert [tuple(p) for p in zz[:6]] == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]
    assert (zz.sum(axis=1)[1:] >= zz.sum(axis=1)[:-1]).all()


def test_constant_mask_has_only_dc():
    v = dct_encode(np.ones((16, 16)), 256)
    assert v[0] == pytest.approx(16.0)
    np.testing.assert_allclose(v[1:], 0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 32), st.integers(0, 2**31 - 1))
def test_full_round_trip_is_exact(m, seed):
    mask = np.random.default_rng(seed).random((m, m)) < 0.5
    v = dct_encode(mask.astype(float), m * m)
    np.testing.assert_array_equal(dct_decode(v, m), mask)
    np.testing.assert_allclose(dct_decode(v, m, threshold=None), mask, atol=1e-9)
    np.testing.assert_allclose(dct_encode(dct_decode(v, m, threshold=None), m * m), v, atol=1e-9)


def test_truncated_centred_square():
    s = np.zeros((64, 64))
    s[16:48, 16:48] = 1
    got = dct_decode(dct_encode(s, 64), 64)
    assert mask_iou(got, s > 0) == pytest.approx(CENTRED_SQUARE_IOU_64, abs=1e-12)
    assert mask_iou(got, s > 0) >= 0.9


def test_zero_vector_decodes_to_background():
    assert not dct_decode(np.zeros(256), 64).any()


def test_coefficient_count_errors():
    with pytest.raises(ConfigurationError):
        dct_encode(np.ones((4, 4)), 17)
    with pytest.raises(ConfigurationError):
        dct_encode(np.ones((4, 4)), 0)
    with pytest.raises(ConfigurationError):
        dct_encode(np.ones((4, 5)), 4)
    with pytest.raises(ConfigurationError):
        dct_decode(np.zeros(17), 4)


def test_small_objects_reconstruct_worse():
    def recon_iou(side):
        s = np.zeros((64, 64), dtype=bool)
        lo = 32 - side // 2
        s[lo:lo + side, lo:lo + side] = True
        return mask_iou(dct_decode(dct_encode(s.astype(float), 64), 64), s)

    assert recon_iou(2) < recon_iou(32)


def test_crop_resample_of_box_aligned_region():
    mask = np.zeros((40, 40), dtype=bool)
    mask[10:30, 5:25] = True
    square = crop_resample(mask, (5, 10, 25, 30), m=16)
    np.testing.assert_allclose(square, 1.0)
    half = crop_resample(mask, (5, 10, 45, 30), m=16) >= 0.5
    assert half[:, :8].all() and not half[:, 8:].any()


def test_encode_paste_round_trip():
    yy, xx = np.mgrid[:48, :64]
    disk = (yy + 0.5 - 20) ** 2 + (xx + 0.5 - 30) ** 2 <= 12 ** 2
    box = (18, 8, 42, 32)
    v = encode_instance(disk, box, m=64, n=64 * 64)
    pasted = paste_instance(v, box, (48, 64), m=64)
    assert mask_iou(pasted, disk) > 0.97
    v256 = encode_instance(disk, box)
    assert mask_iou(paste_instance(v256, box, (48, 64)), disk) > 0.9


def test_paste_respects_box_and_image_bounds():
    v = dct_encode(np.ones((64, 64)), 256)
    out = paste_instance(v, (-5, 2, 10, 8), (12, 12))
    assert out[2:8, 0:10].all()
    assert out.sum() == 60
    assert not paste_instance(v, (20, 20, 30, 30), (12, 12)).any()


def test_mask_head_shapes_and_gradient():
    rng = np.random.default_rng(0)
    with T.default_dtype(np.float64):
        head = MaskHead(16, 32, rng)
        det = T.Tensor(rng.normal(size=(2, 5, 16)), requires_grad=True)
        out = head(det)
        assert out.shape == (2, 5, 32)
        assert max(check_gradients(head, [det])) < 1e-4


def test_mask_iou_conventions():
    a = np.zeros((3, 3), bool)
    assert mask_iou(a, a) == 1.0
    b = a.copy()
    b[0, 0] = True
    assert mask_iou(a, b) == 0.0
