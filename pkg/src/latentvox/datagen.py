"""Synthetic labeled point-cloud dataset.

Eight parametric surface families; every cloud gets a random rotation, a
uniform scale in [0.7, 1.0], Gaussian jitter, and a clip to [-1, 1]^3. All
randomness comes from rngs derived per (seed, class, index) so any single
cloud can be regenerated in isolation.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .pcloud import write_ply
from .seeding import derive_rng

FAMILY_NAMES = ("sphere", "cube", "cylinder", "torus", "cone",
                "planes", "helix", "pyramid")


def _sphere(n, rng):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return 0.8 * d


def _cube(n, rng):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.8, 0.8, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 0.8, -0.8)
    for a in range(3):
        m = axis == a
        pts[m, a] = sign[m]
        others = [i for i in range(3) if i != a]
        pts[np.ix_(m, others)] = uv[m]
    return pts


def _cylinder(n, rng):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    z = rng.uniform(-0.8, 0.8, size=n)
    return np.stack([0.55 * np.cos(theta), 0.55 * np.sin(theta), z], axis=1)


def _torus(n, rng):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    phi = rng.uniform(0, 2 * np.pi, size=n)
    r_maj, r_min = 0.6, 0.25
    w = r_maj + r_min * np.cos(phi)
    return np.stack([w * np.cos(theta), w * np.sin(theta), r_min * np.sin(phi)], axis=1)


def _cone(n, rng):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    t = np.sqrt(rng.uniform(0, 1, size=n))  # area-uniform along the slant
    r = 0.7 * t
    return np.stack([r * np.cos(theta), r * np.sin(theta), 0.8 - 1.6 * t], axis=1)


def _planes(n, rng):
    which = rng.integers(0, 2, size=n)
    uv = rng.uniform(-0.8, 0.8, size=(n, 2))
    pts = np.zeros((n, 3))
    a = which == 0
    pts[a, 1], pts[a, 2] = uv[a, 0], uv[a, 1]
    b = ~a
    pts[b, 0], pts[b, 2] = uv[b, 0], uv[b, 1]
    return pts


def _helix(n, rng):
    t = rng.uniform(0, 1, size=n)
    theta = 4 * np.pi * t
    center = np.stack([0.6 * np.cos(theta), 0.6 * np.sin(theta), 1.6 * t - 0.8], axis=1)
    # tube offset: random direction projected orthogonal to the curve tangent
    tang = np.stack([-np.sin(theta), np.cos(theta), np.full_like(theta, 1.6 / (4 * np.pi) / 0.6)],
                    axis=1)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    d = rng.normal(size=(n, 3))
    d -= np.sum(d * tang, axis=1, keepdims=True) * tang
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return center + 0.12 * d


def _pyramid(n, rng):
    apex = np.array([0.0, 0.0, 0.7])
    half = 0.6
    base = np.array([[-half, -half, -0.6], [half, -half, -0.6],
                     [half, half, -0.6], [-half, half, -0.6]])
    # 4 side triangles + 2 base triangles
    tris = [(base[0], base[1], apex), (base[1], base[2], apex),
            (base[2], base[3], apex), (base[3], base[0], apex),
            (base[0], base[1], base[2]), (base[0], base[2], base[3])]
    which = rng.integers(0, len(tris), size=n)
    u = rng.uniform(0, 1, size=(n, 2))
    flip = u.sum(axis=1) > 1
    u[flip] = 1 - u[flip]
    pts = np.empty((n, 3))
    for ti, (a, b, c) in enumerate(tris):
        m = which == ti
        pts[m] = a + u[m, :1] * (b - a) + u[m, 1:] * (c - a)
    return pts


FAMILIES = (_sphere, _cube, _cylinder, _torus, _cone, _planes, _helix, _pyramid)


def random_rotation(rng):
    """Uniform rotation matrix from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def make_cloud(family: int, n_points: int, rng, jitter=0.01, scale_range=(0.7, 1.0)):
    pts = FAMILIES[family](n_points, rng)
    pts = pts @ random_rotation(rng).T
    pts *= rng.uniform(*scale_range)
    pts += rng.normal(scale=jitter, size=pts.shape)
    return np.clip(pts, -1.0, 1.0)


@dataclass
class Dataset:
    points: list          # list of (n, 3) float64 arrays
    labels: np.ndarray    # (N,) int64
    split: np.ndarray     # (N,) of "train" | "val" | "test"
    class_names: tuple

    def indices(self, split):
        return np.flatnonzero(self.split == split)


def generate_dataset(num_classes, clouds_per_class, points_per_cloud, seed,
                     jitter=0.01, scale_range=(0.7, 1.0)) -> Dataset:
    if num_classes > len(FAMILIES):
        raise ConfigError(f"at most {len(FAMILIES)} classes available")
    n_train = int(clouds_per_class * 0.7)
    n_val = int(clouds_per_class * 0.15)
    n_test = clouds_per_class - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError(f"clouds_per_class={clouds_per_class} leaves an "
                          "empty split under the 70/15/15 ratio")
    points, labels, split = [], [], []
    for c in range(num_classes):
        for j in range(clouds_per_class):
            rng = derive_rng(seed, "dataset", c, j)
            points.append(make_cloud(c, points_per_cloud, rng, jitter, scale_range))
            labels.append(c)
            split.append("train" if j < n_train else
                         "val" if j < n_train + n_val else "test")
    return Dataset(points, np.array(labels, dtype=np.int64),
                   np.array(split, dtype=object), FAMILY_NAMES[:num_classes])


def save_dataset(ds: Dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, pts in enumerate(ds.points):
        name = f"cloud_{i:05d}.ply"
        write_ply(os.path.join(out_dir, name), pts)
        entries.append({"file": name, "label": int(ds.labels[i]),
                        "class": ds.class_names[ds.labels[i]], "split": str(ds.split[i])})
    manifest = {"classes": list(ds.class_names), "clouds": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_dataset(out_dir) -> Dataset:
    from .pcloud import read_ply
    with open(os.path.join(out_dir, "manifest.json")) as f:
        manifest = json.load(f)
    points, labels, split = [], [], []
    for e in manifest["clouds"]:
        pts, _ = read_ply(os.path.join(out_dir, e["file"]))
        points.append(np.asarray(pts, dtype=np.float64))
        labels.append(e["label"])
        split.append(e["split"])
    return Dataset(points, np.array(labels, dtype=np.int64),
                   np.array(split, dtype=object), tuple(manifest["classes"]))
