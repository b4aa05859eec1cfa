"""Point-cloud primitives: voxelization, block partitioning, FPS, PLY I/O.

Float clouds live in [-1, 1]^3 as float64 (n, 3); voxelized clouds are unique
int32 coordinates in [0, 2^bit_depth)^3, kept in canonical (lexicographic)
order so every downstream step is order-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError


@dataclass
class PointCloudV:
    """Voxelized cloud: unique int32 coords, canonical order."""

    coords: np.ndarray  # (n, 3) int32
    bit_depth: int

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 3)

    def __len__(self):
        return len(self.coords)


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Sort rows lexicographically (x major), dropping duplicates."""
    coords = np.asarray(coords).reshape(-1, 3)
    if len(coords) == 0:
        return coords
    return np.unique(coords, axis=0)


def voxelize(points: np.ndarray, bit_depth: int) -> PointCloudV:
    """Map [-1, 1]^3 floats onto the 2^bit_depth grid (round half up, dedup)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    peak = (1 << bit_depth) - 1
    u = (points + 1.0) * 0.5 * peak
    v = np.floor(u + 0.5)
    v = np.clip(v, 0, peak).astype(np.int32)
    return PointCloudV(canonical_order(v), bit_depth)


def devoxelize(pcv: PointCloudV) -> np.ndarray:
    peak = (1 << pcv.bit_depth) - 1
    return pcv.coords.astype(np.float64) / peak * 2.0 - 1.0


def downsample(pcv: PointCloudV, sample_factor: int) -> PointCloudV:
    """Integer-divide coordinates by SF (a power of two), dedup."""
    if sample_factor == 1:
        return PointCloudV(pcv.coords.copy(), pcv.bit_depth)
    if sample_factor < 1 or sample_factor & (sample_factor - 1):
        raise ConfigError(f"sample_factor must be a power of two, got {sample_factor}")
    shift = sample_factor.bit_length() - 1
    return PointCloudV(canonical_order(pcv.coords >> shift), pcv.bit_depth - shift)


def upsample_coords(pcv: PointCloudV, sample_factor: int) -> PointCloudV:
    """Approximate inverse of downsample: scale coordinates back up."""
    if sample_factor == 1:
        return PointCloudV(pcv.coords.copy(), pcv.bit_depth)
    shift = sample_factor.bit_length() - 1
    return PointCloudV(pcv.coords << shift, pcv.bit_depth + shift)


def partition(pcv: PointCloudV, block_size: int):
    """Split into (origin, local_coords) blocks, origins lexicographic.

    Local coordinates are canonical within each block; merge() inverts this
    exactly for canonically-ordered inputs.
    """
    if len(pcv) == 0:
        return []
    keys = pcv.coords // block_size
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    blocks = []
    for bi in range(len(uniq)):
        origin = uniq[bi] * block_size
        local = pcv.coords[inverse == bi] - origin
        blocks.append((tuple(int(o) for o in origin), canonical_order(local)))
    return blocks


def merge(blocks, bit_depth: int) -> PointCloudV:
    if not blocks:
        return PointCloudV(np.zeros((0, 3), dtype=np.int32), bit_depth)
    parts = [np.asarray(origin, dtype=np.int32) + local for origin, local in blocks]
    return PointCloudV(canonical_order(np.concatenate(parts)), bit_depth)


def occupancy_volume(local_coords: np.ndarray, block_size: int, dtype=np.float32):
    vol = np.zeros((block_size, block_size, block_size), dtype=dtype)
    if len(local_coords):
        vol[local_coords[:, 0], local_coords[:, 1], local_coords[:, 2]] = 1
    return vol


def volume_to_coords(vol_mask: np.ndarray) -> np.ndarray:
    return np.argwhere(vol_mask).astype(np.int32)


def fps_resample(points: np.ndarray, count: int, rng: np.random.Generator | None = None):
    """Greedy farthest-point sampling to exactly `count` points.

    Starts at index 0, then repeatedly takes the point with maximal squared
    distance to the selected set (ties -> lowest index). Short clouds are
    padded by sampling indices with replacement from the given rng.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        raise ConfigError("cannot resample an empty cloud")
    if n <= count:
        if n == count:
            return pts.copy()
        if rng is None:
            raise ConfigError("padding a short cloud requires an rng")
        pad = rng.integers(0, n, size=count - n)
        return np.concatenate([pts, pts[pad]])
    chosen = np.empty(count, dtype=np.int64)
    chosen[0] = 0
    d2 = np.sum((pts - pts[0]) ** 2, axis=1)
    for i in range(1, count):
        idx = int(np.argmax(d2))  # argmax returns the first (lowest) maximizer
        chosen[i] = idx
        cand = np.sum((pts - pts[idx]) ** 2, axis=1)
        np.minimum(d2, cand, out=d2)
    return pts[chosen]


# ---------------------------------------------------------------------------
# ASCII PLY subset: vertex-only, float or int coordinates

def write_ply(path, points, bit_depth: int | None = None):
    pts = np.asarray(points)
    is_int = np.issubdtype(pts.dtype, np.integer)
    lines = ["ply", "format ascii 1.0"]
    if bit_depth is not None:
        lines.append(f"comment bit_depth {bit_depth}")
    lines.append(f"element vertex {len(pts)}")
    typ = "int" if is_int else "double"
    lines += [f"property {typ} x", f"property {typ} y", f"property {typ} z", "end_header"]
    body = []
    for p in pts:
        if is_int:
            body.append(f"{int(p[0])} {int(p[1])} {int(p[2])}")
        else:
            body.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}")
    with open(path, "w") as f:
        f.write("\n".join(lines + body) + "\n")


def read_ply(path):
    """Read the subset written by write_ply.

    Returns (points, bit_depth or None); int properties give int32 points.
    """
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FormatError(f"{path}: not a ply file")
        n = None
        is_int = False
        bit_depth = None
        for line in f:
            t = line.strip()
            if t.startswith("comment bit_depth"):
                bit_depth = int(t.split()[-1])
            elif t.startswith("element vertex"):
                n = int(t.split()[-1])
            elif t.startswith("property"):
                is_int = t.split()[1] in ("int", "uint", "int32")
            elif t == "end_header":
                break
        else:
            raise FormatError(f"{path}: missing end_header")
        if n is None:
            raise FormatError(f"{path}: missing vertex element")
        dtype = np.int32 if is_int else np.float64
        if n == 0:
            return np.zeros((0, 3), dtype=dtype), bit_depth
        data = np.loadtxt(f, dtype=dtype, max_rows=n, ndmin=2)
        if data.shape != (n, 3):
            raise FormatError(f"{path}: expected {n} vertices, got {data.shape}")
    return data, bit_depth
