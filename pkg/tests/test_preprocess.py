import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cmbpipe.catalog import Volume
from cmbpipe.errors import DegenerateVolume, IndexOutOfRange, ShapeMismatch
from cmbpipe.postprocess import connected_components
from cmbpipe.preprocess import (
    DETECTOR_INPUT, SEGMENTER_INPUT, ResizeTransform, assemble_segmenter_input, invert_resize,
    preprocess_subject, resize_inplane, stack_detector_channels, zscore_normalize,
)

from conftest import make_subject


def bilinear_oracle(img, out_h, out_w):
    """Per-pixel half-pixel bilinear formula with clamped edges, written out longhand."""
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        y = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(math.floor(y))
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(math.floor(x))
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


def test_zscore_two_point():
    v = Volume(np.array([0, 2] * 8, dtype=np.float64).reshape(2, 2, 4))
    np.testing.assert_allclose(zscore_normalize(v).data, v.data - 1, atol=1e-6)


def test_zscore_moments_and_metadata():
    rng = np.random.default_rng(1)
    v = Volume(rng.gamma(2.0, 50.0, (6, 20, 24)).astype(np.float32), (3.0, 0.9, 0.9))
    z = zscore_normalize(v)
    assert abs(z.data.astype(np.float64).mean()) < 1e-6
    assert abs(z.data.astype(np.float64).std() - 1) < 1e-6
    assert z.shape == v.shape and z.spacing == v.spacing


def test_zscore_constant():
    with pytest.raises(DegenerateVolume):
        zscore_normalize(Volume(np.full((2, 3, 3), 7.0)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5, 5), elements=st.floats(-1e3, 1e3)))
def test_zscore_idempotent(data):
    if data.std() < 1e-3:
        return
    once = zscore_normalize(Volume(data))
    twice = zscore_normalize(once)
    np.testing.assert_allclose(twice.data, once.data, atol=1e-5)


def test_resize_identity_is_bit_exact():
    v = Volume(np.random.default_rng(0).normal(size=(2, 512, 512)).astype(np.float32))
    out = resize_inplane(v, ResizeTransform((512, 512)))
    np.testing.assert_array_equal(out.data, v.data)


def test_resize_shape_and_spacing():
    v = Volume(np.zeros((3, 128, 256), np.float32), (3.0, 1.0, 0.5))
    out = resize_inplane(v, ResizeTransform((128, 256)))
    assert out.shape == (3, 512, 512)
    assert out.spacing == pytest.approx((3.0, 0.25, 0.25))


def test_resize_rejects_wrong_source():
    with pytest.raises(ShapeMismatch):
        resize_inplane(Volume(np.zeros((1, 10, 10))), ResizeTransform((12, 12)))


def test_checkerboard_roundtrip_matches_oracle():
    board = ((np.indices((256, 256)).sum(axis=0)) % 2).astype(np.float64)
    t = ResizeTransform((256, 256), (512, 512), "linear")
    up = resize_inplane(Volume(board[None]), t)
    back = invert_resize(up, t, kind="linear")
    expected_up = bilinear_oracle(board, 512, 512)
    expected = bilinear_oracle(expected_up, 256, 256)
    assert np.abs(up.data[0] - expected_up).max() <= 1e-6
    assert np.abs(back.data[0] - expected).max() <= 1e-6


def test_nearest_upsample_keeps_mask_binary():
    m = np.zeros((1, 100, 100), np.uint8)
    m[0, 40:43, 50:52] = 1
    out = resize_inplane(Volume(m), ResizeTransform((100, 100), kind="nearest"))
    assert set(np.unique(out.data)) == {0, 1}


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, (2, 17, 23), elements=st.integers(0, 1)), st.integers(8, 64), st.integers(8, 64))
def test_nearest_resize_binary_for_random_masks(mask, h, w):
    out = resize_inplane(Volume(mask), ResizeTransform((17, 23), (h, w), "nearest"))
    assert set(np.unique(out.data)) <= {0, 1}


@pytest.mark.parametrize("value", [-3.5, 0.0, 12.25])
def test_constant_image_stays_constant(value):
    out = resize_inplane(Volume(np.full((2, 37, 50), value, np.float32)), ResizeTransform((37, 50)))
    np.testing.assert_allclose(out.data, value, rtol=1e-6)


def test_transform_coordinate_roundtrip():
    t = ResizeTransform((137, 90))
    rng = np.random.default_rng(0)
    for r, c in rng.uniform(0, 130, (100, 2)):
        back = t.inverse_coord(*t.forward_coord(r, c))
        assert abs(back[0] - r) <= 0.5 and abs(back[1] - c) <= 0.5
    assert ResizeTransform.from_manifest(t.to_manifest()) == t


def test_invert_resize_preserves_lesion_count():
    # lesions of diameter >= 3 voxels survive forward and inverse nearest resampling
    m = np.zeros((5, 128, 128), np.uint8)
    zz, yy, xx = np.ogrid[:5, :128, :128]
    for cz, cy, cx in [(2, 20, 20), (2, 60, 90), (1, 100, 40)]:
        m[(zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= 2] = 1
    t = ResizeTransform((128, 128), kind="nearest")
    back = invert_resize(resize_inplane(Volume(m), t), t)
    assert connected_components(back.data).count == connected_components(m).count == 3
    np.testing.assert_array_equal(back.data, m)


def test_invert_resize_identity_and_zero():
    t = ResizeTransform((512, 512))
    arr = np.random.default_rng(0).integers(0, 2, (2, 512, 512)).astype(np.uint8)
    np.testing.assert_array_equal(invert_resize(Volume(arr), t).data, arr)
    t2 = ResizeTransform((100, 80))
    assert not invert_resize(Volume(np.zeros((2, 512, 512))), t2).data.any()
    with pytest.raises(ShapeMismatch):
        invert_resize(Volume(np.zeros((2, 500, 512))), t2)


def test_detector_channels():
    s = make_subject()
    stack = stack_detector_channels(s.t1, s.t2, s.t2s, 0)
    assert stack.tag == DETECTOR_INPUT and stack.data.shape == (3, 16, 16)
    np.testing.assert_array_equal(stack.data[2], s.t2s.data[0])
    np.testing.assert_array_equal(stack.data[0], s.t1.data[0])
    with pytest.raises(IndexOutOfRange):
        stack_detector_channels(s.t1, s.t2, s.t2s, 4)
    with pytest.raises(ShapeMismatch):
        stack_detector_channels(Volume(np.zeros((4, 16, 15))), s.t2, s.t2s, 0)


def test_segmenter_input_boundaries():
    s = make_subject(shape=(5, 8, 8))
    stage1 = Volume(np.random.default_rng(3).random((5, 8, 8)).astype(np.float32))
    first = assemble_segmenter_input(s.t2s, stage1, 0)
    last = assemble_segmenter_input(s.t2s, stage1, 4)
    mid = assemble_segmenter_input(s.t2s, stage1, 2)
    assert first.tag == SEGMENTER_INPUT
    assert not first.data[0].any()
    assert not last.data[2].any()
    np.testing.assert_array_equal(mid.data[0], s.t2s.data[1])
    np.testing.assert_array_equal(mid.data[1], s.t2s.data[2])
    np.testing.assert_array_equal(mid.data[2], s.t2s.data[3])
    np.testing.assert_array_equal(mid.data[3], stage1.data[2])


@given(st.integers(1, 6), st.integers(-3, 9))
def test_segmenter_input_fuzz(n, idx):
    s = make_subject(shape=(n, 4, 4), annotation=False)
    stage1 = Volume(np.zeros((n, 4, 4)))
    if 0 <= idx < n:
        assert assemble_segmenter_input(s.t2s, stage1, idx).data.shape == (4, 4, 4)
    else:
        with pytest.raises(IndexOutOfRange):
            assemble_segmenter_input(s.t2s, stage1, idx)


def test_preprocess_subject():
    s = make_subject(shape=(3, 64, 32))
    p, t = preprocess_subject(s, 128)
    assert p.shape == (3, 128, 128)
    assert t.source == (64, 32)
    assert set(np.unique(p.annotation.data)) == {0, 1}
    assert abs(zscore_normalize(s.t2s).data.mean()) < 1e-6
