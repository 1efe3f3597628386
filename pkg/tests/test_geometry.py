import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distillcache.geometry import (
    ConfidenceMap,
    DegenerateSampleError,
    Frame,
    PointMap,
    ValidityMask,
    View,
    ViewSet,
    downsample_bilinear,
    masked_mean_norm,
    threshold_mask,
)


def bilinear_oracle(src, th, tw):
    """Per-pixel evaluation of the pixel-center bilinear formula in plain Python."""
    h, w = len(src), len(src[0])
    out = [[0.0] * tw for _ in range(th)]
    for i in range(th):
        y = min(max((i + 0.5) * h / th - 0.5, 0.0), h - 1)
        y0 = int(y)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(tw):
            x = min(max((j + 0.5) * w / tw - 0.5, 0.0), w - 1)
            x0 = int(x)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            top = src[y0][x0] * (1 - fx) + src[y0][x1] * fx
            bot = src[y1][x0] * (1 - fx) + src[y1][x1] * fx
            out[i][j] = top * (1 - fy) + bot * fy
    return np.array(out)


def test_point_map_rejects_nonfinite_and_is_frozen():
    with pytest.raises(ValueError):
        PointMap(np.full((2, 2, 3), np.nan))
    pm = PointMap(np.zeros((2, 2, 3)), Frame.LOCAL)
    assert pm.frame is Frame.LOCAL
    with pytest.raises(ValueError):
        pm.data[0, 0, 0] = 1.0


def test_confidence_map_rejects_negative():
    with pytest.raises(ValueError):
        ConfidenceMap(np.array([[0.5, -0.1]]))


def test_mask_valid_count_checked():
    m = ValidityMask(np.array([[1, 0, 1]]))
    assert m.valid_count == 2
    with pytest.raises(ValueError):
        ValidityMask(np.array([[1, 0, 1]]), valid_count=3)


def test_viewset_requires_shared_resolution():
    a = View(PointMap(np.zeros((2, 2, 3))), PointMap(np.zeros((2, 2, 3))),
             ConfidenceMap(np.ones((2, 2))), ConfidenceMap(np.ones((2, 2))))
    b = View(PointMap(np.zeros((2, 3, 3))), PointMap(np.zeros((2, 3, 3))),
             ConfidenceMap(np.ones((2, 3))), ConfidenceMap(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ViewSet((a, b))
    with pytest.raises(ValueError):
        ViewSet(())


def test_downsample_constant():
    out = downsample_bilinear(ConfidenceMap(np.full((2, 2), 5.0)), (1, 1))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 5.0


def test_downsample_identity_bit_exact():
    data = np.random.default_rng(0).normal(size=(5, 7, 3)).astype(np.float32)
    out = downsample_bilinear(PointMap(data), (5, 7))
    assert out.data.dtype == np.float32
    assert out.data.tobytes() == data.tobytes()


def test_downsample_two_pixels_to_one():
    src = [[0.0, 1.0]]
    assert bilinear_oracle(src, 1, 1)[0, 0] == 0.5
    out = downsample_bilinear(ConfidenceMap(np.array(src)), (1, 1))
    assert out.data[0, 0] == 0.5


@pytest.mark.parametrize("src_shape,dst_shape", [((6, 9), (3, 4)), ((7, 5), (7, 2)), ((4, 4), (9, 6))])
def test_downsample_matches_oracle(src_shape, dst_shape):
    src = np.random.default_rng(1).uniform(0, 3, size=src_shape)
    out = downsample_bilinear(ConfidenceMap(src), dst_shape)
    np.testing.assert_allclose(out.data, bilinear_oracle(src.tolist(), *dst_shape), rtol=0, atol=1e-12)


def test_downsample_point_map_channels_independent():
    src = np.random.default_rng(2).normal(size=(6, 8, 3))
    out = downsample_bilinear(PointMap(src, Frame.LOCAL), (3, 4))
    assert out.frame is Frame.LOCAL
    for c in range(3):
        np.testing.assert_allclose(out.data[..., c], bilinear_oracle(src[..., c].tolist(), 3, 4), atol=1e-12)


def test_downsample_zero_target():
    with pytest.raises(ValueError):
        downsample_bilinear(ConfidenceMap(np.ones((2, 2))), (0, 1))


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 9), st.integers(1, 9)),
           elements=st.floats(0, 1e3, allow_nan=False)),
    st.integers(1, 9), st.integers(1, 9),
)
@example(np.array([[802.4114890872353, 802.4114890872353]]), 1, 9)
def test_downsample_preserves_envelope(src, th, tw):
    out = downsample_bilinear(ConfidenceMap(src), (th, tw)).data
    assert out.min() >= src.min() and out.max() <= src.max()


def test_threshold_mask_worked_example():
    m = threshold_mask(ConfidenceMap(np.array([[0.2, 0.3, 0.5]])), 0.3)
    assert m.bits.tolist() == [[False, True, True]]
    assert m.valid_count == 2


def test_threshold_edges():
    c = ConfidenceMap(np.random.default_rng(3).uniform(0, 2, size=(4, 5)))
    assert threshold_mask(c, 0.0).valid_count == 20
    m = threshold_mask(ConfidenceMap(np.full((3, 3), 0.299999)), 0.3)
    assert m.valid_count == 0 and m.degenerate


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (4, 6), elements=st.floats(0, 2, allow_nan=False)),
    st.floats(0, 2), st.floats(0, 2),
)
def test_threshold_monotone(c, t1, t2):
    lo, hi = sorted((t1, t2))
    conf = ConfidenceMap(c)
    m_lo, m_hi = threshold_mask(conf, lo).bits, threshold_mask(conf, hi).bits
    assert not np.any(m_hi & ~m_lo)


def test_masked_mean_norm_examples():
    pts = np.array([[[3.0, 0, 0], [0, 1.0, 0]]])
    assert masked_mean_norm(PointMap(pts), ValidityMask(np.ones((1, 2)))) == 2.0
    assert masked_mean_norm(PointMap(np.zeros((2, 2, 3))), ValidityMask(np.ones((2, 2)))) == 0.0
    with pytest.raises(DegenerateSampleError):
        masked_mean_norm(PointMap(pts), ValidityMask(np.zeros((1, 2))))


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e6, 1e6).filter(lambda x: abs(x) > 1e-6), st.integers(0, 2**32 - 1))
def test_masked_mean_norm_homogeneous(lam, seed):
    r = np.random.default_rng(seed)
    pts = r.normal(size=(5, 6, 3))
    mask = r.random((5, 6)) < 0.6
    mask[0, 0] = True
    base = masked_mean_norm(pts, mask)
    assert masked_mean_norm(lam * pts, mask) == pytest.approx(abs(lam) * base, rel=1e-12)
