import math

import numpy as np
import pytest

from dircp.features import (
    BevFeatureMap,
    SparseFeatureMap,
    densify,
    encode,
    load_bevf,
    pose_embedding,
    positional_channels,
    save_bevf,
    sparsify,
    to_global_frame,
)
from dircp.grid import GridSpec
from dircp.scenario import generate, observe, ScenarioConfig


GRID = GridSpec(16, 16, 1.0)


class TestEncode:
    def test_zero_observation(self):
        zero = np.zeros((16, 16))
        fmap = encode(zero, 8, GRID, (8.0, 8.0), 10.0)
        assert np.all(fmap.values[:, :, 0] == 0.0)
        # Other channels do not depend on evidence.
        one = zero.copy()
        one[3, 4] = 1.0
        fmap2 = encode(one, 8, GRID, (8.0, 8.0), 10.0)
        assert np.array_equal(fmap.values[:, :, 1:], fmap2.values[:, :, 1:])

    def test_single_cell_locality(self):
        obs = np.zeros((16, 16))
        obs[5, 9] = 1.0
        fmap = encode(obs, 4, GRID, (0.0, 0.0), 10.0)
        nz = np.nonzero(fmap.values[:, :, 0])
        assert list(zip(*nz)) == [(5, 9)]

    def test_channel0_sum_matches_observation(self):
        world = generate(ScenarioConfig(seed=7, area_side=16.0, n_collaborators=1,
                                        n_vehicles=3, sensor_range=20.0,
                                        occlusion_enabled=False))
        obs = observe(world, 0)
        fmap = encode(obs, 8, world.grid, (8.0, 8.0), 20.0)
        assert fmap.values[:, :, 0].sum() == obs.sum()

    def test_decay_channel_formula(self):
        fmap = encode(np.zeros((16, 16)), 2, GRID, (3.0, 4.0), 12.0)
        for r, c in [(0, 0), (7, 11), (15, 15)]:
            x, y = GRID.center_of(r, c)
            d = math.hypot(x - 3.0, y - 4.0)
            assert fmap.values[r, c, 1] == pytest.approx(math.exp(-d / 12.0), abs=1e-12)

    def test_positional_channels_pointwise(self):
        pos = positional_channels(GRID, 6)
        for r, c in [(0, 0), (5, 9), (15, 2)]:
            ux, uy = (c + 0.5) / 16.0, (r + 0.5) / 16.0
            assert pos[r, c, 0] == pytest.approx(math.sin(2 * math.pi * ux))
            assert pos[r, c, 1] == pytest.approx(math.sin(2 * math.pi * ux + math.pi / 2))
            assert pos[r, c, 2] == pytest.approx(math.sin(2 * math.pi * uy))
            assert pos[r, c, 3] == pytest.approx(math.sin(2 * math.pi * uy + math.pi / 2))
            assert pos[r, c, 4] == pytest.approx(math.sin(4 * math.pi * ux))

    def test_needs_two_channels(self):
        with pytest.raises(ValueError):
            encode(np.zeros((16, 16)), 1, GRID, (0, 0), 10.0)


class TestGlobalFrame:
    def make_map(self):
        rng = np.random.default_rng(3)
        return BevFeatureMap(GRID, rng.normal(size=(16, 16, 3)))

    def test_identity_pose(self):
        fmap = self.make_map()
        out = to_global_frame(fmap, (0.0, 0.0, 0.0))
        assert np.array_equal(out.values, fmap.values)

    def test_grid_aligned_translation(self):
        fmap = self.make_map()
        out = to_global_frame(fmap, (3.0, -2.0, 0.0))
        # Content shifts by (+3, -2) cells where in bounds, zero elsewhere.
        for r in range(16):
            for c in range(16):
                sr, sc = r + 2, c - 3
                if 0 <= sr < 16 and 0 <= sc < 16:
                    assert np.array_equal(out.values[r, c], fmap.values[sr, sc])
                else:
                    assert np.all(out.values[r, c] == 0.0)

    def test_rotation_of_single_cell(self):
        values = np.zeros((16, 16, 2))
        values[2, 5] = (7.0, -1.0)  # local center (5.5, 2.5)
        fmap = BevFeatureMap(GRID, values)
        out = to_global_frame(fmap, (0.0, 0.0, math.pi / 2))
        # Local (5.5, 2.5) rotates to global (-2.5, 5.5): row 5, col -3 -> clipped.
        # Use a pose that keeps it in-frame: rotate then translate by +16 in x.
        out = to_global_frame(fmap, (16.0, 0.0, math.pi / 2))
        # global = R(90) @ local + (16, 0) = (16 - 2.5, 5.5) -> cell (5, 13)
        assert np.array_equal(out.values[5, 13], (7.0, -1.0))
        assert np.count_nonzero(out.values[:, :, 0]) == 1

    def test_nonzero_count_preserved_for_rigid_motion(self):
        obs = np.zeros((16, 16))
        obs[4:8, 2:5] = 1.0
        fmap = encode(obs, 2, GRID, (0, 0), 10.0)
        out = to_global_frame(fmap, (1.0, 2.0, 0.0))
        assert np.count_nonzero(out.values[:, :, 0]) == np.count_nonzero(obs)


class TestSparse:
    def test_round_trip_is_hadamard(self):
        rng = np.random.default_rng(9)
        fmap = BevFeatureMap(GRID, rng.normal(size=(16, 16, 4)))
        bits = (rng.uniform(size=(16, 16)) < 0.3).astype(np.uint8)
        dense = densify(sparsify(fmap, bits))
        assert np.array_equal(dense, fmap.values * bits[:, :, None])

    def test_duplicate_entries_rejected(self):
        with pytest.raises(ValueError):
            SparseFeatureMap(((0, 0, np.zeros(2)), (0, 0, np.ones(2))), (4, 4, 2))

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            SparseFeatureMap(((5, 0, np.zeros(2)),), (4, 4, 2))


class TestPoseEmbedding:
    def test_peak_at_collaborator_cell(self):
        pe = pose_embedding([(8.5, 3.5, 0.0)], GRID, 16.0)
        assert pe.shape == (16, 16, 1)
        assert pe[3, 8, 0] == 1.0
        assert pe.argmax() == np.ravel_multi_index((3, 8, 0), pe.shape)

    def test_channel_permutation(self):
        a = (2.5, 2.5, 0.0)
        b = (12.5, 9.5, 1.0)
        pe_ab = pose_embedding([a, b], GRID, 16.0)
        pe_ba = pose_embedding([b, a], GRID, 16.0)
        assert np.array_equal(pe_ab[:, :, 0], pe_ba[:, :, 1])
        assert np.array_equal(pe_ab[:, :, 1], pe_ba[:, :, 0])

    def test_pointwise_formula(self):
        pe = pose_embedding([(5.0, 7.0, 0.3)], GRID, 16.0)
        for r, c in [(0, 0), (9, 4), (15, 15)]:
            x, y = GRID.center_of(r, c)
            expected = math.exp(-math.hypot(x - 5.0, y - 7.0) / 16.0)
            assert pe[r, c, 0] == pytest.approx(expected, abs=1e-12)


class TestBevfFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(17)
        fmap = BevFeatureMap(GRID, rng.normal(size=(16, 16, 3)).astype(np.float32))
        path = tmp_path / "f.bevf"
        save_bevf(fmap, path)
        raw = path.read_bytes()
        assert raw[:4] == b"BEVF"
        assert len(raw) == 16 + 16 * 16 * 3 * 4
        loaded = load_bevf(path)
        assert loaded.values.shape == (16, 16, 3)
        assert np.array_equal(loaded.values, fmap.values.astype(np.float32))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bevf"
        path.write_bytes(b"NOPE" + b"\x00" * 12)
        with pytest.raises(ValueError):
            load_bevf(path)

    def test_truncated(self, tmp_path):
        fmap = BevFeatureMap(GridSpec(2, 2, 1.0), np.zeros((2, 2, 2)))
        path = tmp_path / "t.bevf"
        save_bevf(fmap, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ValueError):
            load_bevf(path)
