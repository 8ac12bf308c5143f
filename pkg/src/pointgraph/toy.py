"""Synthetic sphere / cube / torus dataset for desk-scale experiments."""

from __future__ import annotations

import numpy as np

from .geometry import DatasetSplit, PointCloud, TriangleMesh, normalize, sample_surface

CLASS_NAMES = ["sphere", "cube", "torus"]


def uv_sphere(n_lat: int = 12, n_lon: int = 24) -> TriangleMesh:
    theta = np.linspace(0, np.pi, n_lat + 1)
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    t, p = np.meshgrid(theta, phi, indexing="ij")
    verts = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], -1).reshape(-1, 3)
    faces = []
    for i in range(n_lat):
        for j in range(n_lon):
            a, b = i * n_lon + j, i * n_lon + (j + 1) % n_lon
            c, d = a + n_lon, b + n_lon
            faces += [(a, c, b), (b, c, d)]
    return TriangleMesh(verts, faces)


def cube() -> TriangleMesh:
    verts = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    faces = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
             (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return TriangleMesh(verts, faces)


def torus(major: float = 1.0, minor: float = 0.35, n_u: int = 24, n_v: int = 12) -> TriangleMesh:
    u = np.linspace(0, 2 * np.pi, n_u, endpoint=False)
    v = np.linspace(0, 2 * np.pi, n_v, endpoint=False)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    r = major + minor * np.cos(vv)
    verts = np.stack([r * np.cos(uu), r * np.sin(uu), minor * np.sin(vv)], -1).reshape(-1, 3)
    faces = []
    for i in range(n_u):
        for j in range(n_v):
            a = i * n_v + j
            b = ((i + 1) % n_u) * n_v + j
            c = i * n_v + (j + 1) % n_v
            d = ((i + 1) % n_u) * n_v + (j + 1) % n_v
            faces += [(a, b, d), (a, d, c)]
    return TriangleMesh(verts, faces)


def make_toy_dataset(n_points: int = 64, per_class: int = 100, seed: int = 0,
                     val_fraction: float = 0.2, test_fraction: float = 0.2, jitter: float = 0.15,
                     rotate: bool = False) -> DatasetSplit:
    """Per class: ``per_class`` clouds split into train / validation / test by the given fractions.

    Each cloud is sampled from its mesh after a random per-axis scaling of
    +-``jitter`` (and a random rotation with ``rotate``), then normalized.
    """
    rng = np.random.default_rng(seed)
    meshes = [uv_sphere(), cube(), torus()]
    n_val = int(round(val_fraction * per_class))
    n_test = int(round(test_fraction * per_class))
    n_train = per_class - n_val - n_test
    if n_train < 1 or n_test < 1:
        raise ValueError("fractions leave no training or test clouds")
    train, val, test = [], [], []
    for label, mesh in enumerate(meshes):
        for i in range(per_class):
            scale = 1 + rng.uniform(-jitter, jitter, size=3)
            verts = mesh.vertices * scale
            if rotate:
                q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
                verts = verts @ q.T
            m = TriangleMesh(verts, mesh.faces)
            cloud = normalize(sample_surface(m, n_points, int(rng.integers(2**31))))
            cloud = PointCloud(cloud.points, label)
            (train if i < n_train else val if i < n_train + n_val else test).append(cloud)
    return DatasetSplit(train, val, test, list(CLASS_NAMES))
