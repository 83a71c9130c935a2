import numpy as np
import pytest

from voxeldet.nn_core import Tensor
from voxeldet.sparse_conv import (
    DEFAULT_BLOCKS,
    Rulebook,
    VfeBlockSpec,
    VfeEncoder,
    build_rulebook,
    densify_grid,
    kernel_offsets,
    sparse_conv_backward,
    sparse_conv_forward,
    sparse_conv_op,
    sparsify_dense,
)
from voxeldet.voxel_grid import make_grid

from helpers import dense_conv3d_oracle, finite_diff_error, projected_loss, random_cotangent


def _coords(rows):
    return np.asarray(rows, dtype=np.int64)


def _batched(indices):
    idx = _coords(indices)
    return np.column_stack([np.zeros(len(idx), dtype=np.int64), idx])


def _sort_batched(coords, shape):
    nx, ny, _ = shape
    keys = ((coords[:, 0] * shape[2] + coords[:, 3]) * ny + coords[:, 2]) * nx + coords[:, 1]
    return coords[np.argsort(keys)]


def _random_sites(rng, shape, max_sites):
    n = rng.integers(1, max_sites + 1)
    all_cells = np.array(
        [(x, y, z) for x in range(shape[0]) for y in range(shape[1]) for z in range(shape[2])]
    )
    pick = rng.choice(len(all_cells), size=min(n, len(all_cells)), replace=False)
    return _sort_batched(_batched(all_cells[pick]), shape)


class TestRulebook:
    def test_single_site_center_pair_only(self):
        coords = _batched([[2, 2, 2]])
        rb, out_coords, _ = build_rulebook(coords, (5, 5, 5), 3, 1, "submanifold")
        assert rb.n_out == 1 and rb.total_pairs == 1
        center = rb.offsets.index((0, 0, 0))
        assert len(rb.pairs[center][0]) == 1
        np.testing.assert_array_equal(out_coords, coords)

    def test_two_adjacent_sites_four_pairs(self):
        coords = _sort_batched(_batched([[0, 0, 0], [1, 0, 0]]), (4, 4, 4))
        rb, _, _ = build_rulebook(coords, (4, 4, 4), 3, 1, "submanifold")
        assert rb.total_pairs == 4
        center = rb.offsets.index((0, 0, 0))
        assert len(rb.pairs[center][0]) == 2

    def test_strided_floor_division(self):
        coords = _sort_batched(_batched([[0, 0, 0], [1, 1, 1]]), (2, 2, 2))
        rb, out_coords, out_shape = build_rulebook(coords, (2, 2, 2), 2, 2, "strided")
        assert out_shape == (1, 1, 1)
        assert rb.n_out == 1
        np.testing.assert_array_equal(out_coords, [[0, 0, 0, 0]])
        assert rb.total_pairs == 2

    def test_submanifold_requires_odd_kernel(self):
        with pytest.raises(ValueError, match="odd"):
            build_rulebook(_batched([[0, 0, 0]]), (2, 2, 2), 2, 1, "submanifold")

    def test_no_duplicate_triples(self):
        rng = np.random.default_rng(0)
        coords = _random_sites(rng, (6, 6, 6), 20)
        rb, _, _ = build_rulebook(coords, (6, 6, 6), 3, 1, "submanifold")
        seen = set()
        for k, (in_idx, out_idx) in enumerate(rb.pairs):
            for i, o in zip(in_idx, out_idx):
                assert (k, i, o) not in seen
                seen.add((k, i, o))

    def test_submanifold_preserves_site_count(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            coords = _random_sites(rng, (5, 5, 5), 15)
            rb, out_coords, _ = build_rulebook(coords, (5, 5, 5), 3, 1, "submanifold")
            assert rb.n_out == rb.n_in == len(coords)
            np.testing.assert_array_equal(out_coords, coords)


class TestSparseForward:
    def test_identity_center_weight(self):
        rng = np.random.default_rng(2)
        coords = _random_sites(rng, (5, 5, 5), 12)
        feats = rng.normal(size=(len(coords), 3))
        rb, _, _ = build_rulebook(coords, (5, 5, 5), 3, 1, "submanifold")
        weights = np.zeros((27, 3, 3))
        weights[rb.offsets.index((0, 0, 0))] = np.eye(3)
        out = sparse_conv_forward(feats, weights, None, rb)
        np.testing.assert_allclose(out, feats)

    def test_empty_grid(self):
        coords = np.empty((0, 4), np.int64)
        rb, out_coords, _ = build_rulebook(coords, (4, 4, 4), 3, 1, "submanifold")
        out = sparse_conv_forward(np.empty((0, 2)), np.zeros((27, 2, 5)), None, rb)
        assert out.shape == (0, 5)
        assert len(out_coords) == 0

    @pytest.mark.parametrize("mode", ["submanifold", "strided"])
    def test_matches_dense_oracle(self, mode):
        rng = np.random.default_rng(3)
        for trial in range(25):
            shape = tuple(rng.integers(2, 7, size=3))
            coords = _random_sites(rng, shape, 10)
            c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            feats = rng.normal(size=(len(coords), c_in))
            if mode == "submanifold":
                kernel, stride = 3, (1, 1, 1)
            else:
                kernel = tuple(int(k) for k in rng.integers(1, 4, size=3))
                stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
            rb, out_coords, out_shape = build_rulebook(coords, shape, kernel, stride, mode)
            weights = rng.normal(size=(len(rb.offsets), c_in, c_out))
            bias = rng.normal(size=c_out)
            out = sparse_conv_forward(feats, weights, bias, rb)

            grid = make_grid(shape, coords[:, 1:], feats)
            dense = densify_grid(grid)
            wmap = {off: weights[k] for k, off in enumerate(rb.offsets)}
            if mode == "submanifold":
                expected = dense_conv3d_oracle(dense, wmap, bias, rb.offsets, shape)
                ref_coords = coords
            else:
                expected = dense_conv3d_oracle(dense, wmap, bias, rb.offsets, out_shape,
                                               stride=stride)
                ref_coords = out_coords
            # compare restricted to the active output sites
            got_dense = expected[ref_coords[:, 1], ref_coords[:, 2], ref_coords[:, 3]]
            np.testing.assert_allclose(out, got_dense, atol=1e-10)


class TestSparseBackward:
    def _setup(self, seed=4, n_feat=3, n_out_feat=2):
        rng = np.random.default_rng(seed)
        coords = _random_sites(rng, (4, 4, 4), 10)
        rb, _, _ = build_rulebook(coords, (4, 4, 4), 3, 1, "submanifold")
        feats = Tensor(rng.normal(size=(len(coords), n_feat)), requires_grad=True)
        weights = Tensor(rng.normal(size=(27, n_feat, n_out_feat)) * 0.4, requires_grad=True)
        bias = Tensor(rng.normal(size=n_out_feat), requires_grad=True)
        return rb, feats, weights, bias

    def test_finite_difference(self):
        rb, feats, weights, bias = self._setup()
        cot = random_cotangent((rb.n_out, 2), seed=5)

        def loss():
            return projected_loss(sparse_conv_op(feats, weights, bias, rb), cot)

        assert finite_diff_error(loss, [feats, weights, bias], max_entries=60) < 1e-5

    def test_zero_upstream(self):
        rb, feats, weights, _ = self._setup()
        d_feat, d_w, d_b = sparse_conv_backward(
            np.zeros((rb.n_out, 2)), rb, feats.data, weights.data
        )
        assert not d_feat.any() and not d_w.any() and not d_b.any()

    def test_single_pair_outer_product(self):
        offsets = tuple(kernel_offsets(1, centered=True))
        rb = Rulebook(offsets, ((np.array([0]), np.array([0])),), n_in=1, n_out=1)
        x = np.array([[1.5, -2.0]])
        w = np.zeros((1, 2, 3))
        up = np.array([[0.5, 1.0, -1.0]])
        _, d_w, _ = sparse_conv_backward(up, rb, x, w)
        np.testing.assert_allclose(d_w[0], np.outer(x[0], up[0]))


class TestVfe:
    def test_default_bev_shape(self):
        enc = VfeEncoder((1408, 1600, 40))
        assert enc.bev_shape == (128, 200, 176)
        rng = np.random.default_rng(6)
        idx = np.column_stack([
            rng.integers(0, 1408, 30), rng.integers(0, 1600, 30), rng.integers(0, 40, 30),
        ])
        idx = np.unique(idx, axis=0)
        grid = make_grid((1408, 1600, 40), idx, rng.normal(size=(len(idx), 4)))
        bev = enc(grid)
        assert bev.shape == (1, 128, 200, 176)

    def test_empty_grid_zero_bev(self):
        enc = VfeEncoder((64, 64, 8))
        grid = make_grid((64, 64, 8), np.empty((0, 3)), np.empty((0, 4)))
        bev = enc(grid)
        # z extent 8 collapses to one level: 64 channels
        assert bev.shape == (1, 64, 8, 8)
        assert not bev.data.any()

    def test_single_site_support(self):
        enc = VfeEncoder((64, 64, 8))
        grid = make_grid((64, 64, 8), [[37, 10, 5]], [[1.0, 2.0, 3.0, 0.5]])
        plan = enc.build_plan(grid)
        # submanifold layers never dilate; the site only moves by floor division
        assert len(plan.final_coords) == 1
        np.testing.assert_array_equal(plan.final_coords[0, 1:3], [37 // 8, 10 // 8])
        bev = enc.forward(plan)
        nonzero = np.nonzero(bev.data.any(axis=(0, 1)))
        assert set(zip(*nonzero)) <= {(10 // 8, 37 // 8)}

    def test_channel_mismatch_rejected(self):
        blocks = (VfeBlockSpec(4, 16, 2, 2), VfeBlockSpec(32, 32, 2, 2))
        with pytest.raises(ValueError, match="channel mismatch"):
            VfeEncoder((16, 16, 8), blocks)

    def test_batch_stacking(self):
        enc = VfeEncoder((32, 32, 8))
        rng = np.random.default_rng(7)
        grids = []
        for _ in range(2):
            idx = np.unique(np.column_stack([
                rng.integers(0, 32, 9), rng.integers(0, 32, 9), rng.integers(0, 8, 9),
            ]), axis=0)
            grids.append(make_grid((32, 32, 8), idx, rng.normal(size=(len(idx), 4))))
        bev = enc(grids)
        assert bev.shape == (2, 64, 4, 4)

    def test_z_schedule_shapes(self):
        enc = VfeEncoder((1408, 1600, 40))
        shapes = [s for _, s in enc._shape_schedule]
        assert shapes == [(704, 800, 20), (352, 400, 10), (176, 200, 5), (176, 200, 2)]

    def test_block_spec_defaults(self):
        assert DEFAULT_BLOCKS[0] == VfeBlockSpec(4, 16, 2, 2)
        assert DEFAULT_BLOCKS[3].stride_xy == 1


class TestDensifyRoundtrip:
    def test_identity_without_zero_sites(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            shape = (4, 3, 5)
            coords = _random_sites(rng, shape, 12)
            feats = rng.normal(size=(len(coords), 3))
            feats[np.abs(feats).max(axis=1) < 1e-12] += 1.0
            grid = make_grid(shape, coords[:, 1:], feats)
            back = sparsify_dense(densify_grid(grid))
            np.testing.assert_array_equal(back.indices, grid.indices)
            np.testing.assert_array_equal(back.features, grid.features)
