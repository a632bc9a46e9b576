import numpy as np
import pytest

from vpdet import autodiff as ad
from vpdet.backbone import (
    BEVHeatmap,
    BackboneConfig,
    backbone_forward,
    backbone_weight_shapes,
    conv2d,
    gated_fuse,
    late_fuse_1x1,
    score_from_features,
)
from vpdet.fusion import FusedCloud, Point8D
from vpdet.sparse import (
    ConvParams,
    SparseTensor3D,
    VoxelGrid,
    strided_conv,
    submanifold_conv,
    voxelize,
)


def make_point(x, y, z, intensity=0.5):
    return Point8D(x, y, z, intensity, 0.0, 0.0, 0.0, 2)


def cloud_of(positions):
    return FusedCloud.from_points([make_point(*p) for p in positions])


def random_sparse(rng, n_sites, c_in, span=4):
    coords = set()
    while len(coords) < n_sites:
        coords.add(tuple(rng.integers(-span, span, size=3)))
    coords = np.array(sorted(coords), dtype=np.int64)
    feats = rng.normal(size=(len(coords), c_in))
    return SparseTensor3D(coords=coords, feats=feats, stride=1)


def dense_subm_oracle(t, kernel, bias):
    """Embed into a dense grid, correlate with triple loops, mask to input sites."""
    lo = t.coords.min(axis=0) - 1
    hi = t.coords.max(axis=0) + 2
    shape = tuple(hi - lo)
    dense = np.zeros(shape + (t.channels,))
    for c, f in zip(t.coords, t.feats_value):
        dense[tuple(c - lo)] = f
    out = np.zeros((len(t), kernel.shape[4]))
    for row, c in enumerate(t.coords):
        acc = bias.copy()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    pos = c + np.array([di, dj, dk]) - lo
                    if (pos >= 0).all() and (pos < shape).all():
                        acc = acc + dense[tuple(pos)] @ kernel[di + 1, dj + 1, dk + 1]
        out[row] = acc
    return out


def dense_strided_oracle(t, kernel, bias, stride=2):
    site = {tuple(c): f for c, f in zip(t.coords, t.feats_value)}
    parents = np.unique(np.floor_divide(t.coords, stride), axis=0)
    out = np.zeros((len(parents), kernel.shape[4]))
    for row, q in enumerate(parents):
        acc = bias.copy()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                for dk in (-1, 0, 1):
                    c = (q[0] * stride + di, q[1] * stride + dj, q[2] * stride + dk)
                    if c in site:
                        acc = acc + site[c] @ kernel[di + 1, dj + 1, dk + 1]
        out[row] = acc
    return parents, out


class TestVoxelize:
    def test_single_point(self):
        cloud = cloud_of([(0.12, 0.31, -0.2)])
        grid = voxelize(cloud, 0.05, origin=(0, 0, -1), seed=0)
        assert len(grid) == 1
        (cell,) = grid.voxels.values()
        assert cell.representative == cloud.points[0]
        assert cell.count == 1

    def test_two_points_same_cell(self):
        cloud = cloud_of([(0.10, 0.0, 0.0), (0.11, 0.0, 0.0)])
        grid = voxelize(cloud, 0.05, origin=(0, 0, 0), seed=1)
        assert len(grid) == 1
        (cell,) = grid.voxels.values()
        assert cell.count == 2
        assert cell.representative in cloud.points

    def test_voxel_count_matches_hash_set_oracle(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(-2, 2, size=(1000, 3))
        cloud = cloud_of(pts)
        origin = np.array([-2.0, -2.0, -2.0])
        grid = voxelize(cloud, 0.25, origin, seed=2)
        oracle = {tuple(np.floor((p - origin) / 0.25).astype(int)) for p in pts}
        assert len(grid) == len(oracle)
        assert set(grid.voxels) == oracle

    def test_order_independent(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(-1, 1, size=(200, 3))
        a = voxelize(cloud_of(pts), 0.3, (-1, -1, -1), seed=9)
        b = voxelize(cloud_of(pts[::-1]), 0.3, (-1, -1, -1), seed=9)
        assert set(a.voxels) == set(b.voxels)
        for key in a.voxels:
            assert a.voxels[key].representative == b.voxels[key].representative

    def test_representative_inside_cell(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(-1, 1, size=(300, 3))
        grid = voxelize(cloud_of(pts), 0.2, (-1, -1, -1), seed=3)
        for key, cell in grid.voxels.items():
            rel = (cell.representative.position - grid.origin) / 0.2
            assert tuple(np.floor(rel).astype(int)) == key


class TestSubmanifoldConv:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        t = random_sparse(rng, 8, 3)
        kernel = np.zeros((3, 3, 3, 3, 3))
        kernel[1, 1, 1] = np.eye(3)
        out = submanifold_conv(t, ConvParams(kernel, np.zeros(3)))
        assert np.array_equal(out.coords, t.coords)
        assert np.allclose(out.feats_value, t.feats_value)

    def test_single_voxel_center_tap_only(self):
        rng = np.random.default_rng(1)
        kernel = rng.normal(size=(3, 3, 3, 4, 2))
        bias = rng.normal(size=2)
        t = SparseTensor3D(coords=[[5, -3, 2]], feats=rng.normal(size=(1, 4)), stride=1)
        out = submanifold_conv(t, ConvParams(kernel, bias))
        assert np.allclose(out.feats_value[0], t.feats_value[0] @ kernel[1, 1, 1] + bias)

    def test_cluster_matches_dense_oracle(self):
        rng = np.random.default_rng(2)
        t = random_sparse(rng, 5, 3, span=2)
        kernel = rng.normal(size=(3, 3, 3, 3, 4))
        bias = rng.normal(size=4)
        out = submanifold_conv(t, ConvParams(kernel, bias))
        assert np.abs(out.feats_value - dense_subm_oracle(t, kernel, bias)).max() < 1e-5

    def test_active_set_preserved_exactly(self):
        rng = np.random.default_rng(3)
        t = random_sparse(rng, 20, 2)
        out = submanifold_conv(t, ConvParams(rng.normal(size=(3, 3, 3, 2, 2)), rng.normal(size=2)))
        assert np.array_equal(out.coords, t.coords)
        assert out.stride == t.stride

    def test_channel_mismatch_rejected(self):
        rng = np.random.default_rng(4)
        t = random_sparse(rng, 4, 3)
        with pytest.raises(ValueError, match="channels"):
            submanifold_conv(t, ConvParams(rng.normal(size=(3, 3, 3, 5, 2)), np.zeros(2)))

    def test_linear_in_features(self):
        rng = np.random.default_rng(5)
        t = random_sparse(rng, 10, 3)
        kernel = rng.normal(size=(3, 3, 3, 3, 3))
        bias = rng.normal(size=3)
        params = ConvParams(kernel, bias)
        doubled = SparseTensor3D(coords=t.coords, feats=2.0 * t.feats_value, stride=1)
        lhs = submanifold_conv(doubled, params).feats_value
        rhs = 2.0 * submanifold_conv(t, params).feats_value - (2.0 - 1.0) * bias
        assert np.abs(lhs - rhs).max() < 1e-9


class TestStridedConv:
    def test_single_voxel_origin(self):
        rng = np.random.default_rng(6)
        kernel = rng.normal(size=(3, 3, 3, 2, 3))
        bias = rng.normal(size=3)
        t = SparseTensor3D(coords=[[0, 0, 0]], feats=rng.normal(size=(1, 2)), stride=1)
        out = strided_conv(t, ConvParams(kernel, bias))
        assert np.array_equal(out.coords, [[0, 0, 0]])
        assert out.stride == 2
        assert np.allclose(out.feats_value[0], t.feats_value[0] @ kernel[1, 1, 1] + bias)

    def test_two_voxels_same_parent(self):
        rng = np.random.default_rng(7)
        kernel = rng.normal(size=(3, 3, 3, 2, 2))
        bias = rng.normal(size=2)
        t = SparseTensor3D(
            coords=[[0, 0, 0], [1, 0, 0]], feats=rng.normal(size=(2, 2)), stride=1
        )
        out = strided_conv(t, ConvParams(kernel, bias))
        assert np.array_equal(out.coords, [[0, 0, 0]])
        expected = (
            t.feats_value[0] @ kernel[1, 1, 1] + t.feats_value[1] @ kernel[2, 1, 1] + bias
        )
        assert np.allclose(out.feats_value[0], expected)

    def test_random_matches_dense_oracle(self):
        rng = np.random.default_rng(8)
        t = random_sparse(rng, 20, 3)
        kernel = rng.normal(size=(3, 3, 3, 3, 5))
        bias = rng.normal(size=5)
        out = strided_conv(t, ConvParams(kernel, bias))
        coords, expected = dense_strided_oracle(t, kernel, bias)
        assert np.array_equal(out.coords, coords)
        assert np.abs(out.feats_value - expected).max() < 1e-5

    def test_stride_bookkeeping(self):
        rng = np.random.default_rng(9)
        t = random_sparse(rng, 6, 2)
        out = strided_conv(t, ConvParams(rng.normal(size=(3, 3, 3, 2, 2)), np.zeros(2)))
        assert out.stride == 2
        out2 = strided_conv(out, ConvParams(rng.normal(size=(3, 3, 3, 2, 2)), np.zeros(2)))
        assert out2.stride == 4


def tiny_config():
    return BackboneConfig(
        voxel_size=0.25, point_range=(0.0, -4.0, -2.0, 8.0, 4.0, 2.0), channels=(3, 4, 5, 6)
    )


def init_backbone_weights(config, rng):
    weights = {}
    for name, shape in backbone_weight_shapes(config).items():
        fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
        weights[name] = rng.uniform(-1, 1, size=shape) / np.sqrt(fan_in)
    return weights


def small_scene_cloud(rng, n=40):
    pts = rng.uniform([0.5, -3.5, -1.5], [7.5, 3.5, 1.5], size=(n, 3))
    return cloud_of(pts)


class TestBackboneForward:
    def test_empty_grid_zero_scores(self):
        config = tiny_config()
        weights = init_backbone_weights(config, np.random.default_rng(0))
        grid = VoxelGrid(config.voxel_size, config.origin, {})
        out = backbone_forward(grid, weights, config)
        assert len(out.x_conv4) == 0
        assert not out.heat.score_value.any()
        assert not out.heat.data_value.any()

    def test_zero_weights_uniform_sigmoid_bias(self):
        config = tiny_config()
        weights = {
            name: np.zeros(shape) for name, shape in backbone_weight_shapes(config).items()
        }
        weights["bb.score.b"] = np.array([0.7])
        grid = voxelize(small_scene_cloud(np.random.default_rng(1), 5), config.voxel_size, config.origin, seed=0)
        out = backbone_forward(grid, weights, config)
        expected = 1.0 / (1.0 + np.exp(-0.7))
        assert np.abs(out.heat.score_value - expected).max() < 1e-12

    def test_strides_and_cell_size(self):
        config = tiny_config()
        rng = np.random.default_rng(2)
        weights = init_backbone_weights(config, rng)
        grid = voxelize(small_scene_cloud(rng), config.voxel_size, config.origin, seed=1)
        out = backbone_forward(grid, weights, config)
        assert (out.x_conv1.stride, out.x_conv2.stride, out.x_conv3.stride, out.x_conv4.stride) == (1, 2, 4, 8)
        assert out.heat.cell_size == config.voxel_size * 8
        assert np.isfinite(out.heat.data_value).all()
        assert out.heat.data_value.shape[:2] == config.bev_shape

    def test_score_head_gradients_match_finite_differences(self):
        config = tiny_config()
        rng = np.random.default_rng(3)
        weights = init_backbone_weights(config, rng)
        grid = voxelize(small_scene_cloud(rng, 25), config.voxel_size, config.origin, seed=2)
        probe = rng.normal(size=config.bev_shape)

        def build(leaves):
            out = backbone_forward(grid, leaves, config)
            return (ad.as_tensor(out.heat.score) * probe).sum()

        worst = ad.check_gradients(build, weights, max_entries=12, rng=rng)
        assert worst < 1e-4


class TestBEVFusion:
    def make_pair(self, rng, w=4, h=3, c=3):
        real = BEVHeatmap(rng.normal(size=(w, h, c)), np.zeros((w, h)), cell_size=0.4)
        virt = BEVHeatmap(rng.normal(size=(w, h, c)), np.zeros((w, h)), cell_size=0.4)
        return real, virt

    def test_late_fuse_select_first_block(self):
        rng = np.random.default_rng(0)
        real, virt = self.make_pair(rng)
        kernel = np.vstack([np.eye(3), np.zeros((3, 3))])
        fused = late_fuse_1x1(real, virt, ConvParams(kernel, np.zeros(3)))
        assert np.allclose(fused.data_value, real.data_value)

    def test_late_fuse_zero_inputs_bias_everywhere(self):
        rng = np.random.default_rng(1)
        real = BEVHeatmap(np.zeros((4, 3, 3)), np.zeros((4, 3)), cell_size=0.4)
        virt = BEVHeatmap(np.zeros((4, 3, 3)), np.zeros((4, 3)), cell_size=0.4)
        bias = rng.normal(size=2)
        fused = late_fuse_1x1(real, virt, ConvParams(rng.normal(size=(6, 2)), bias))
        assert np.allclose(fused.data_value, bias)

    def test_late_fuse_matches_per_cell_oracle(self):
        rng = np.random.default_rng(2)
        real, virt = self.make_pair(rng)
        kernel = rng.normal(size=(6, 5))
        bias = rng.normal(size=5)
        fused = late_fuse_1x1(real, virt, ConvParams(kernel, bias))
        for u in range(4):
            for v in range(3):
                cell = np.concatenate([real.data_value[u, v], virt.data_value[u, v]])
                assert np.allclose(fused.data_value[u, v], cell @ kernel + bias)

    def test_late_fuse_dim_mismatch(self):
        rng = np.random.default_rng(3)
        real, _ = self.make_pair(rng)
        _, virt = self.make_pair(rng, w=5)
        with pytest.raises(ValueError, match="differ spatially"):
            late_fuse_1x1(real, virt, ConvParams(np.zeros((6, 3)), np.zeros(3)))

    def test_gated_saturated_gate_returns_real(self):
        rng = np.random.default_rng(4)
        real, virt = self.make_pair(rng)
        fused = gated_fuse(real, virt, ConvParams(np.zeros((6, 3)), np.full(3, 80.0)))
        assert np.abs(fused.data_value - real.data_value).max() < 1e-12

    def test_gated_zero_logits_mean(self):
        rng = np.random.default_rng(5)
        real, virt = self.make_pair(rng)
        fused = gated_fuse(real, virt, ConvParams(np.zeros((6, 3)), np.zeros(3)))
        assert np.allclose(fused.data_value, 0.5 * (real.data_value + virt.data_value))

    def test_gated_matches_formula_oracle(self):
        rng = np.random.default_rng(6)
        real, virt = self.make_pair(rng)
        kernel = rng.normal(size=(6, 3))
        bias = rng.normal(size=3)
        fused = gated_fuse(real, virt, ConvParams(kernel, bias))
        for u in range(4):
            for v in range(3):
                cell = np.concatenate([real.data_value[u, v], virt.data_value[u, v]])
                g = 1.0 / (1.0 + np.exp(-(cell @ kernel + bias)))
                expected = g * real.data_value[u, v] + (1 - g) * virt.data_value[u, v]
                assert np.abs(fused.data_value[u, v] - expected).max() < 1e-6


class TestConv2d:
    def test_matches_scipy_oracle(self):
        from scipy.signal import correlate2d

        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 6, 2))
        kernel = rng.normal(size=(3, 3, 2, 3))
        bias = rng.normal(size=3)
        out = ad.value_of(conv2d(x, kernel, bias))
        expected = np.zeros((5, 6, 3))
        for co in range(3):
            acc = np.full((5, 6), bias[co])
            for ci in range(2):
                acc = acc + correlate2d(x[:, :, ci], kernel[:, :, ci, co], mode="same")
            expected[:, :, co] = acc
        assert np.abs(out - expected).max() < 1e-9


class TestHeatmapValidation:
    def test_score_range_enforced(self):
        with pytest.raises(ValueError, match="score"):
            BEVHeatmap(np.zeros((2, 2, 1)), np.full((2, 2), 1.5), cell_size=0.4)

    def test_cell_center(self):
        heat = BEVHeatmap(
            np.zeros((4, 4, 1)), np.zeros((4, 4)), cell_size=0.5, origin=(1.0, -2.0)
        )
        assert np.allclose(heat.cell_center(0, 0), [1.25, -1.75])
        assert np.allclose(heat.cell_center(2, 1), [2.25, -1.25])
