import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arg_core import tensor as T
from arg_core.errors import ConfigError, DataError, DimensionError
from arg_core.features import (
    FeatureConfig,
    FeatureMap,
    backbone_forward,
    bilinear,
    bilinear_taps,
    build_actor_matrix,
    init_feature_params,
    mask_filter,
    mask_to_grid,
    roi_align,
    roi_align_many,
)
from arg_core.scene import Actor, BinaryMask, BoundingBox, Frame, SceneSample
from arg_core.tensor import Tensor


def fmap(data, scale=1.0):
    return FeatureMap(Tensor(np.asarray(data, dtype=np.float64)), scale)


def sumsq(t):
    return (t * t).sum()


def brute_bilinear(img, x, y):
    """Direct form of the weight formula: sum of (1-|x-xi|)(1-|y-yi|) over in-range neighbours."""
    H, W = img.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    total = 0.0
    for yi in (math.floor(y), math.floor(y) + 1):
        for xi in (math.floor(x), math.floor(x) + 1):
            if 0 <= xi < W and 0 <= yi < H:
                w = max(0.0, 1 - abs(x - xi)) * max(0.0, 1 - abs(y - yi))
                total += w * img[yi, xi]
    return total


def brute_roi(data, box, scale, P, s):
    C = data.shape[0]
    x1, y1, x2, y2 = box.x1 * scale, box.y1 * scale, box.x2 * scale, box.y2 * scale
    bw, bh = (x2 - x1) / P, (y2 - y1) / P
    out = np.zeros((C, P, P))
    for c in range(C):
        for i in range(P):
            for j in range(P):
                acc = 0.0
                for a in range(s):
                    for b in range(s):
                        py = y1 + bh * (i + (a + 0.5) / s)
                        px = x1 + bw * (j + (b + 0.5) / s)
                        acc += brute_bilinear(data[c], px - 0.5, py - 0.5)
                out[c, i, j] = acc / (s * s)
    return out


def exact_average(img, x0, x1, y0, y1):
    """Mean of the interpolated surface over a rectangle (index coordinates).

    The surface is bilinear between integer grid lines, so two-point
    Gauss-Legendre on every cell between kinks is exact.
    """

    def pieces(a, b):
        cuts = [a] + [k for k in range(math.ceil(a), math.floor(b) + 1) if a < k < b] + [b]
        g = 0.5 / math.sqrt(3.0)
        for lo, hi in zip(cuts, cuts[1:]):
            mid, half = (lo + hi) / 2, hi - lo
            yield mid - g * half, half / 2
            yield mid + g * half, half / 2

    total = sum(wx * wy * brute_bilinear(img, x, y) for x, wx in pieces(x0, x1) for y, wy in pieces(y0, y1))
    return total / ((x1 - x0) * (y1 - y0))


def random_box(rng, W, H):
    x1, y1 = rng.uniform(-2, W), rng.uniform(-2, H)
    return BoundingBox(x1, y1, x1 + rng.uniform(0.2, W), y1 + rng.uniform(0.2, H))


class TestBilinear:
    def test_on_center(self):
        m = fmap(np.arange(12.0).reshape(1, 3, 4))
        assert bilinear(m, 0, 2.0, 1.0) == 6.0

    def test_hand_example(self):
        m = fmap(np.array([[[0.0, 2.0], [4.0, 6.0]]]))
        assert bilinear(m, 0, 0.5, 0.5) == pytest.approx(3.0, abs=1e-15)

    def test_clamps_outside(self):
        m = fmap(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert bilinear(m, 0, -5.0, -5.0) == 1.0
        assert bilinear(m, 0, 9.0, 0.0) == 2.0

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-3, 10), st.floats(-3, 10), st.integers(1, 6), st.integers(1, 6))
    def test_partition_of_unity_and_oracle(self, x, y, h, w):
        _, _, weights = bilinear_taps(x, y, h, w)
        assert sum(weights) == pytest.approx(1.0, abs=1e-12)
        assert min(weights) >= 0
        img = np.random.default_rng(h * 7 + w).normal(size=(h, w))
        assert bilinear(fmap(img[None]), 0, x, y) == pytest.approx(brute_bilinear(img, x, y), abs=1e-12)


class TestRoiAlign:
    def test_one_pixel_box(self):
        data = np.random.default_rng(0).normal(size=(3, 4, 5))
        out = roi_align(fmap(data), BoundingBox(2, 1, 3, 2), P=1, s=1).data
        np.testing.assert_array_equal(out[:, 0, 0], data[:, 1, 2])

    @pytest.mark.parametrize("P,s", [(1, 1), (3, 2), (5, 4)])
    def test_constant_map(self, P, s):
        out = roi_align(fmap(np.full((2, 6, 6), 3.25)), BoundingBox(-1, 0.3, 4.2, 7.5), P, s).data
        np.testing.assert_allclose(out, 3.25, atol=1e-14)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            C, H, W = rng.integers(1, 4), rng.integers(1, 8), rng.integers(1, 8)
            data = rng.normal(size=(C, H, W))
            scale = rng.choice([1.0, 0.5, 0.25])
            box = random_box(rng, W / scale, H / scale)
            P, s = rng.integers(1, 5), rng.integers(1, 5)
            got = roi_align(fmap(data, scale), box, P, s).data
            np.testing.assert_allclose(got, brute_roi(data, box, scale, P, s), atol=1e-12, rtol=0)

    def test_many_uses_frame_index(self):
        rng = np.random.default_rng(2)
        data = rng.normal(size=(2, 3, 6, 6))
        boxes = [BoundingBox(0, 0, 3, 3), BoundingBox(1, 2, 5, 6)]
        out = roi_align_many(fmap(data), boxes, [1, 0], P=2, s=2).data
        np.testing.assert_allclose(out[0], brute_roi(data[1], boxes[0], 1.0, 2, 2), atol=1e-12)
        np.testing.assert_allclose(out[1], brute_roi(data[0], boxes[1], 1.0, 2, 2), atol=1e-12)
        with pytest.raises(DimensionError):
            roi_align_many(fmap(data), boxes, [0, 2])

    def test_max_pool(self):
        data = np.random.default_rng(3).normal(size=(1, 4, 4))
        box = BoundingBox(0, 0, 4, 4)
        out = roi_align(fmap(data), box, P=2, s=2, pool="max").data
        np.testing.assert_array_equal(out[0], data[0].reshape(2, 2, 2, 2).max(axis=(1, 3)))

    def test_errors(self):
        m = fmap(np.zeros((1, 4, 4)))
        with pytest.raises(DataError):
            roi_align(m, BoundingBox(1, 1, 1 + 1e-9, 3))
        with pytest.raises(ConfigError):
            roi_align(m, BoundingBox(0, 0, 2, 2), P=0)

    def test_dense_quadrature(self):
        # s=16 against the exact bin integral of the interpolated surface
        rng = np.random.default_rng(4)
        data = rng.uniform(size=(2, 8, 8))
        box = BoundingBox(1.3, 0.7, 6.6, 7.1)
        got = roi_align(fmap(data), box, P=2, s=16).data
        bw, bh = (box.x2 - box.x1) / 2, (box.y2 - box.y1) / 2
        for c in range(2):
            for i in range(2):
                for j in range(2):
                    lo_x = box.x1 + bw * j - 0.5
                    lo_y = box.y1 + bh * i - 0.5
                    q = exact_average(data[c], lo_x, lo_x + bw, lo_y, lo_y + bh)
                    assert abs(got[c, i, j] - q) < 1e-3

    def test_gradient(self):
        data = Tensor(np.random.default_rng(5).normal(size=(2, 5, 5)), requires_grad=True)
        boxes = [BoundingBox(0.2, 0.4, 3.7, 4.9), BoundingBox(-1, 2, 6, 6)]
        for pool in ("avg", "max"):
            rep = T.grad_check(lambda: sumsq(roi_align_many(FeatureMap(data, 1.0), boxes, None, 2, 3, pool)), {"x": data})
            assert rep.passed, rep.max_rel_error

    def test_translation_by_stride(self):
        cfg = FeatureConfig(channels=(4, 6, 6), d=8)
        params = init_feature_params(cfg, np.random.default_rng(6))
        patch = np.random.default_rng(7).uniform(size=(3, 24, 24))
        a = np.zeros((3, 64, 64))
        b = np.zeros((3, 64, 64))
        a[:, 8:32, 8:32] = patch
        b[:, 16:40, 24:48] = patch
        box = BoundingBox(12.3, 10.1, 27.6, 29.0)
        moved = BoundingBox(box.x1 + 16, box.y1 + 8, box.x2 + 16, box.y2 + 8)
        ra = roi_align(backbone_forward(a, params, cfg), box).data
        rb = roi_align(backbone_forward(b, params, cfg), moved).data
        np.testing.assert_allclose(ra, rb, atol=1e-9, rtol=0)


class TestMasks:
    box = BoundingBox(10, 4, 30, 20)

    def test_all_ones_and_zeros(self):
        ones = BinaryMask.from_bits(np.ones((24, 40), dtype=np.uint8))
        zeros = BinaryMask.from_bits(np.zeros((24, 40), dtype=np.uint8))
        np.testing.assert_allclose(mask_to_grid(ones, self.box, 5, 2), 1.0, atol=1e-15)
        np.testing.assert_array_equal(mask_to_grid(zeros, self.box, 5, 2), 0.0)

    def test_half_plane(self):
        bits = np.zeros((24, 40), dtype=np.uint8)
        bits[:, :20] = 1
        grid = mask_to_grid(BinaryMask.from_bits(bits), self.box, P=2, s=16)
        np.testing.assert_allclose(grid[:, 0], 1.0, atol=0.05)
        np.testing.assert_allclose(grid[:, 1], 0.0, atol=0.05)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_grid_in_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        bits = rng.integers(0, 2, size=(12, 12)).astype(np.uint8)
        g = mask_to_grid(BinaryMask.from_bits(bits), random_box(rng, 12, 12), int(rng.integers(1, 5)), 2)
        assert g.min() >= 0 and g.max() <= 1

    def test_filter_examples(self):
        roi = Tensor(np.random.default_rng(8).normal(size=(3, 2, 2)))
        np.testing.assert_array_equal(mask_filter(roi, np.ones((2, 2))).data, roi.data)
        np.testing.assert_array_equal(mask_filter(roi, np.zeros((2, 2))).data, 0.0)
        g = np.ones((2, 2))
        g[1, 0] = 0.5
        out = mask_filter(roi, g).data
        np.testing.assert_array_equal(out[:, 1, 0], roi.data[:, 1, 0] / 2)
        np.testing.assert_array_equal(out[:, 0, :], roi.data[:, 0, :])
        with pytest.raises(DimensionError):
            mask_filter(roi, np.ones((3, 3)))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_filter_shrinks_magnitude(self, seed):
        rng = np.random.default_rng(seed)
        roi = Tensor(rng.normal(size=(2, 3, 3)))
        out = mask_filter(roi, rng.uniform(size=(3, 3))).data
        assert (np.abs(out) <= np.abs(roi.data)).all()


class TestBackbone:
    def test_output_size(self):
        cfg = FeatureConfig()
        params = init_feature_params(cfg, np.random.default_rng(0))
        fm = backbone_forward(np.zeros((3, 64, 64)), params, cfg)
        assert fm.tensor.shape == (16, 8, 8) and fm.spatial_scale == 1 / 8
        np.testing.assert_array_equal(fm.tensor.data, 0.0)

    def test_too_small(self):
        cfg = FeatureConfig()
        with pytest.raises(ConfigError):
            backbone_forward(np.zeros((3, 4, 64)), init_feature_params(cfg, np.random.default_rng(0)), cfg)

    def test_deterministic_init(self):
        cfg = FeatureConfig()
        a = init_feature_params(cfg, np.random.default_rng(3))
        b = init_feature_params(cfg, np.random.default_rng(3))
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)

    def test_gradient(self):
        cfg = FeatureConfig(channels=(2, 3), d=4)
        params = init_feature_params(cfg, np.random.default_rng(1))
        for k in params:
            if k.endswith("bias"):
                params[k].data[:] = np.random.default_rng(2).normal(size=params[k].shape) * 0.1
        img = np.random.default_rng(3).uniform(size=(3, 12, 12))
        rep = T.grad_check(lambda: sumsq(backbone_forward(img, params, cfg).tensor), params, epsilon=1e-6)
        assert rep.passed, rep.max_rel_error


def two_frame_scene(with_masks=True, full_masks=False):
    rng = np.random.default_rng(10)
    frames = []
    for f in range(2):
        actors = []
        for a in range(3):
            box = BoundingBox(2 + 11 * a, 3 + f, 12 + 11 * a, 14 + f)
            mask = None
            if with_masks:
                bits = np.ones((24, 40), dtype=np.uint8) if full_masks else np.zeros((24, 40), dtype=np.uint8)
                if not full_masks:
                    bits[5:12, 3 + 11 * a : 10 + 11 * a] = 1
                mask = BinaryMask.from_bits(bits)
            actors.append(Actor(f"a{a}", box, mask, a % 2))
        frames.append(Frame(rng.integers(0, 256, size=(24, 40, 3), dtype=np.uint8), actors))
    return SceneSample("s", frames, 0)


class TestActorMatrix:
    cfg = FeatureConfig(channels=(4, 8), d=6)
    params = init_feature_params(cfg, np.random.default_rng(11))

    def test_shape_and_order(self):
        feats = build_actor_matrix(two_frame_scene(), self.params, self.cfg)
        assert feats.X.shape == (6, 6)
        assert list(feats.frame_index) == [0, 0, 0, 1, 1, 1]
        assert feats.actor_ids == ["a0", "a1", "a2"] * 2
        np.testing.assert_array_equal(feats.positions[4], [18.0, 9.5])

    def test_masks_off_equals_full_masks(self):
        off = FeatureConfig(channels=(4, 8), d=6, use_masks=False)
        a = build_actor_matrix(two_frame_scene(), self.params, off).X.data
        b = build_actor_matrix(two_frame_scene(full_masks=True), self.params, self.cfg).X.data
        c = build_actor_matrix(two_frame_scene(with_masks=False), self.params, self.cfg).X.data
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(a, c)

    def test_masks_change_features(self):
        a = build_actor_matrix(two_frame_scene(), self.params, self.cfg).X.data
        b = build_actor_matrix(two_frame_scene(with_masks=False), self.params, self.cfg).X.data
        assert not np.allclose(a, b)

    def test_gradient(self):
        scene = two_frame_scene()
        rep = T.grad_check(
            lambda: sumsq(build_actor_matrix(scene, self.params, self.cfg).X),
            self.params,
            epsilon=1e-6,
            max_coords=6,
        )
        assert rep.passed, rep.max_rel_error
