"""Voxel geometry: quantization, partitioning, FPS, PLY round trips."""

import numpy as np
import pytest

from latentvox.errors import ConfigError
from latentvox.pcloud import (PointCloudV, canonical_order, devoxelize,
                              downsample, fps_resample, merge,
                              occupancy_volume, partition, read_ply,
                              upsample_coords, volume_to_coords, voxelize,
                              write_ply)


def test_voxelize_round_half_up():
    # peak=63 at bit_depth 6; u = (p+1)/2*63, floor(u+0.5)
    pts = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])
    pcv = voxelize(pts, 6)
    expected = np.array([[0, 0, 0], [32, 32, 32], [63, 63, 63]])
    np.testing.assert_array_equal(pcv.coords, canonical_order(expected))


def test_voxelize_dedups_and_orders(rng):
    pts = rng.uniform(-1, 1, size=(500, 3))
    pcv = voxelize(np.concatenate([pts, pts]), 4)
    assert len(np.unique(pcv.coords, axis=0)) == len(pcv.coords)
    np.testing.assert_array_equal(pcv.coords, canonical_order(pcv.coords))


def test_devoxelize_inverse_on_grid_points():
    coords = np.array([[0, 0, 0], [63, 63, 63], [31, 7, 50]], dtype=np.int32)
    pcv = PointCloudV(coords, 6)
    back = voxelize(devoxelize(pcv), 6)
    np.testing.assert_array_equal(back.coords, canonical_order(coords))


def test_partition_merge_identity(rng):
    pts = rng.uniform(-1, 1, size=(2000, 3))
    pcv = voxelize(pts, 6)
    blocks = partition(pcv, 32)
    assert all(np.all((local >= 0) & (local < 32)) for _, local in blocks)
    merged = merge(blocks, 6)
    np.testing.assert_array_equal(merged.coords, pcv.coords)
    assert merged.bit_depth == 6


def test_partition_origins_are_block_aligned(rng):
    pcv = voxelize(rng.uniform(-1, 1, size=(400, 3)), 6)
    for origin, _ in partition(pcv, 16):
        assert all(o % 16 == 0 for o in origin)


def test_partition_empty():
    assert partition(PointCloudV(np.zeros((0, 3), np.int32), 6), 32) == []
    assert len(merge([], 6)) == 0


def test_occupancy_volume_round_trip(rng):
    coords = np.unique(rng.integers(0, 8, size=(30, 3)), axis=0).astype(np.int32)
    vol = occupancy_volume(coords, 8)
    assert vol.sum() == len(coords)
    np.testing.assert_array_equal(volume_to_coords(vol > 0.5),
                                  canonical_order(coords))


def test_down_up_sample(rng):
    pcv = voxelize(rng.uniform(-1, 1, size=(300, 3)), 6)
    down = downsample(pcv, 2)
    assert down.bit_depth == 5
    assert down.coords.max() < 32
    up = upsample_coords(down, 2)
    assert up.bit_depth == 6
    np.testing.assert_array_equal(up.coords, down.coords << 1)
    with pytest.raises(ConfigError):
        downsample(pcv, 3)


def fps_oracle(pts, count):
    """Literal greedy FPS: start 0, take farthest from selected set."""
    n = len(pts)
    chosen = [0]
    while len(chosen) < count:
        best, best_d = -1, -1.0
        for i in range(n):
            d = min(np.sum((pts[i] - pts[j]) ** 2) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return pts[chosen]


def test_fps_matches_greedy_oracle(rng):
    for _ in range(10):
        n = int(rng.integers(10, 60))
        pts = rng.uniform(-1, 1, size=(n, 3))
        count = int(rng.integers(2, n))
        np.testing.assert_array_equal(fps_resample(pts, count),
                                      fps_oracle(pts, count))


def test_fps_exact_count_is_copy(rng):
    pts = rng.uniform(-1, 1, size=(16, 3))
    out = fps_resample(pts, 16)
    np.testing.assert_array_equal(out, pts)
    assert out is not pts


def test_fps_pads_short_clouds_deterministically(rng):
    pts = rng.uniform(-1, 1, size=(5, 3))
    a = fps_resample(pts, 12, np.random.default_rng(7))
    b = fps_resample(pts, 12, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    assert len(a) == 12
    np.testing.assert_array_equal(a[:5], pts)
    with pytest.raises(ConfigError):
        fps_resample(pts, 12)  # padding requires an rng
    with pytest.raises(ConfigError):
        fps_resample(np.zeros((0, 3)), 4, np.random.default_rng(0))


def test_ply_round_trip_float(tmp_path, rng):
    pts = rng.uniform(-1, 1, size=(50, 3))
    path = tmp_path / "cloud.ply"
    write_ply(path, pts)
    back, bd = read_ply(path)
    np.testing.assert_array_equal(back, pts)  # repr round-trips doubles
    assert bd is None


def test_ply_round_trip_int_with_bit_depth(tmp_path, rng):
    coords = rng.integers(0, 64, size=(40, 3)).astype(np.int32)
    path = tmp_path / "cloud.ply"
    write_ply(path, coords, bit_depth=6)
    back, bd = read_ply(path)
    np.testing.assert_array_equal(back, coords)
    assert bd == 6
    assert np.issubdtype(back.dtype, np.integer)


def test_ply_round_trip_empty(tmp_path):
    path = tmp_path / "empty.ply"
    write_ply(path, np.zeros((0, 3), dtype=np.int32), bit_depth=6)
    back, bd = read_ply(path)
    assert back.shape == (0, 3)
    assert bd == 6
