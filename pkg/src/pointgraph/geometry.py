"""Mesh and pointcloud I/O: OFF parsing, surface sampling, normalization, dataset caches."""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CACHE_MAGIC = b"PGCLOUD\0"
CACHE_VERSION = 1


class OffParseError(ValueError):
    """Base class for OFF parse failures; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class MalformedHeaderError(OffParseError):
    pass


class CountMismatchError(OffParseError):
    pass


class NonTriangleFaceError(OffParseError):
    pass


class FaceIndexError(OffParseError):
    pass


class ZeroAreaError(ValueError):
    pass


class DegenerateCloudError(ValueError):
    pass


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (nv, 3)
    faces: np.ndarray  # (nf, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise FaceIndexError("face index out of range")


@dataclass
class PointCloud:
    points: np.ndarray  # (N, 3)
    label: int = -1
    extra_features: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {self.points.shape}")
        if len(self.points) < 2:
            raise ValueError("a pointcloud needs at least 2 points")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("pointcloud contains non-finite coordinates")

    @property
    def features(self) -> np.ndarray:
        """Initial node features: xyz followed by any extra per-point features."""
        if self.extra_features is None:
            return self.points
        return np.concatenate([self.points, self.extra_features], axis=1)


@dataclass
class DatasetSplit:
    train: list[PointCloud]
    validation: list[PointCloud]
    test: list[PointCloud]
    class_names: list[str]
    skipped: list[str] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def _content_lines(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_off(data: bytes | str) -> TriangleMesh:
    """Parse an ASCII OFF mesh. Accepts the fused ``OFFnv nf ne`` header seen in ModelNet40."""
    text = data.decode("ascii", errors="strict") if isinstance(data, bytes) else data
    lines = _content_lines(text)
    try:
        lineno, first = next(lines)
    except StopIteration:
        raise MalformedHeaderError("empty file", 1) from None
    if not first.startswith("OFF"):
        raise MalformedHeaderError(f"expected 'OFF' header, got {first[:20]!r}", lineno)
    rest = first[3:].strip()
    if not rest:
        try:
            lineno, rest = next(lines)
        except StopIteration:
            raise MalformedHeaderError("missing counts line", lineno + 1) from None
    tokens = rest.split()
    if len(tokens) not in (2, 3):
        raise MalformedHeaderError(f"expected 'nv nf ne', got {rest!r}", lineno)
    try:
        nv, nf = int(tokens[0]), int(tokens[1])
    except ValueError:
        raise MalformedHeaderError(f"non-integer counts {rest!r}", lineno) from None
    if nv < 0 or nf < 0:
        raise MalformedHeaderError("negative counts", lineno)

    vertices = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise CountMismatchError(f"expected {nv} vertices, found {i}", lineno + 1) from None
        parts = line.split()
        if len(parts) < 3:
            raise CountMismatchError(f"vertex line needs 3 coordinates, got {line!r}", lineno)
        try:
            vertices[i] = [float(p) for p in parts[:3]]
        except ValueError:
            raise CountMismatchError(f"bad vertex {line!r}", lineno) from None

    faces = np.empty((nf, 3), dtype=np.int64)
    for i in range(nf):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise CountMismatchError(f"expected {nf} faces, found {i}", lineno + 1) from None
        parts = line.split()
        try:
            ints = [int(p) for p in parts]
        except ValueError:
            raise CountMismatchError(f"bad face {line!r}", lineno) from None
        if not ints or ints[0] != 3 or len(ints) < 4:
            raise NonTriangleFaceError(f"only triangle faces are supported, got {line!r}", lineno)
        tri = ints[1:4]
        if min(tri) < 0 or max(tri) >= nv:
            raise FaceIndexError(f"face index out of range [0, {nv}) in {line!r}", lineno)
        faces[i] = tri

    extra = next(lines, None)
    if extra is not None:
        raise CountMismatchError(f"unexpected trailing content {extra[1]!r}", extra[0])
    return TriangleMesh(vertices, faces)


def serialize_off(mesh: TriangleMesh) -> str:
    out = io.StringIO()
    out.write(f"OFF\n{len(mesh.vertices)} {len(mesh.faces)} 0\n")
    for v in mesh.vertices:
        out.write(" ".join(repr(float(c)) for c in v) + "\n")
    for f in mesh.faces:
        out.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    return out.getvalue()


def read_off(path: str | os.PathLike) -> TriangleMesh:
    return parse_off(Path(path).read_bytes())


def face_areas(mesh: TriangleMesh) -> np.ndarray:
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def sample_surface(mesh: TriangleMesh, n: int, seed: int, return_faces: bool = False):
    """Draw ``n`` points uniformly over the mesh surface.

    Faces are picked with probability proportional to area, then a point is
    placed with the square-root barycentric trick. With ``return_faces`` the
    source face index of each point is returned as well.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    areas = face_areas(mesh)
    total = areas.sum()
    if not total > 0:
        raise ZeroAreaError("mesh has zero total surface area")
    rng = np.random.default_rng(seed)
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (mesh.vertices[mesh.faces[face_idx, i]] for i in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    cloud = PointCloud(pts)
    return (cloud, face_idx) if return_faces else cloud


def normalize(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point has unit norm."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    scale = np.linalg.norm(centered, axis=1).max()
    if not scale > 0:
        raise DegenerateCloudError("all points are identical")
    return PointCloud(centered / scale, cloud.label, cloud.extra_features)


def read_cloud_csv(path: str | os.PathLike) -> PointCloud:
    """Read ``x,y,z`` lines (extra columns become per-point features); a header line is optional."""
    arr = read_matrix_csv(path)
    if arr.ndim != 2 or arr.shape[1] < 3:
        raise ValueError(f"{path}: expected at least 3 columns per row")
    extra = arr[:, 3:] if arr.shape[1] > 3 else None
    return PointCloud(arr[:, :3], extra_features=extra)


def read_matrix_csv(path: str | os.PathLike) -> np.ndarray:
    """Read an arbitrary-width numeric CSV (optional header)."""
    rows = []
    with open(path) as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(p) for p in line.split(",")])
            except ValueError:
                if i == 0 and not rows:
                    continue
                raise ValueError(f"{path}: line {i + 1}: cannot parse {line!r}") from None
    return np.asarray(rows, dtype=np.float64)


def write_cloud_csv(cloud: PointCloud, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write("x,y,z\n")
        for p in cloud.points:
            fh.write(",".join(repr(float(c)) for c in p) + "\n")


# --- dataset cache -------------------------------------------------------

def write_cache(clouds: list[PointCloud], path: str | os.PathLike) -> None:
    """One split per file: magic, version, count, n_points, then float32 blocks and int32 labels."""
    n_points = len(clouds[0].points) if clouds else 0
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<III", CACHE_VERSION, len(clouds), n_points))
        for c in clouds:
            if len(c.points) != n_points:
                raise ValueError("all cached clouds must share one point count")
            fh.write(np.ascontiguousarray(c.points, dtype="<f4").tobytes())
        fh.write(np.asarray([c.label for c in clouds], dtype="<i4").tobytes())


def read_cache(path: str | os.PathLike) -> list[PointCloud]:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a pointgraph cache file")
    version, count, n_points = struct.unpack_from("<III", raw, 8)
    if version != CACHE_VERSION:
        raise ValueError(f"{path}: unsupported cache version {version}")
    off = 20
    block = n_points * 3 * 4
    pts = np.frombuffer(raw, dtype="<f4", count=count * n_points * 3, offset=off)
    pts = pts.reshape(count, n_points, 3)
    labels = np.frombuffer(raw, dtype="<i4", count=count, offset=off + count * block)
    return [PointCloud(pts[i].astype(np.float32), int(labels[i])) for i in range(count)]


def _load_one(path: Path, label: int, n_points: int, seed: int) -> PointCloud:
    cloud = normalize(sample_surface(read_off(path), n_points, seed))
    # float32 storage so that the cache round-trip is exact
    return PointCloud(cloud.points.astype(np.float32), label)


def _file_seed(seed: int, rel: str) -> int:
    # stable across processes (no use of hash())
    h = 1469598103934665603
    for ch in rel.encode():
        h = ((h ^ ch) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return (h ^ seed) & 0x7FFFFFFF


def load_dataset(root: str | os.PathLike, n_points: int = 1024, val_fraction: float = 0.1,
                 seed: int = 0, cache_dir: str | os.PathLike | None = None,
                 max_skip_fraction: float = 0.01) -> DatasetSplit:
    """Load a ModelNet-style tree ``root/<class>/{train,test}/*.off``.

    Validation is a stratified, seeded ``val_fraction`` slice of each class's
    train files. When ``cache_dir`` holds caches for the same parameters they
    are read instead of the OFF files; otherwise they are written there.
    """
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    root = Path(root)
    tag = f"n{n_points}_v{val_fraction:g}_s{seed}"
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        names_file = cache_dir / f"classes_{tag}.txt"
        files = {s: cache_dir / f"{s}_{tag}.bin" for s in ("train", "validation", "test")}
        if names_file.exists() and all(f.exists() for f in files.values()):
            return DatasetSplit(read_cache(files["train"]), read_cache(files["validation"]),
                                read_cache(files["test"]), names_file.read_text().split("\n"))
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise FileNotFoundError(f"no class directories under {root}")

    rng = np.random.default_rng(seed)
    train, validation, test, skipped = [], [], [], []
    attempted = 0
    for label, name in enumerate(class_names):
        for split in ("train", "test"):
            if not (root / name / split).is_dir():
                raise FileNotFoundError(f"missing directory {root / name / split}")
        train_files = sorted((root / name / "train").glob("*.off"))
        test_files = sorted((root / name / "test").glob("*.off"))
        n_val = int(round(val_fraction * len(train_files)))
        val_idx = set(rng.permutation(len(train_files))[:n_val].tolist())
        for i, path in enumerate(train_files + test_files):
            attempted += 1
            rel = str(path.relative_to(root))
            try:
                cloud = _load_one(path, label, n_points, _file_seed(seed, rel))
            except (OffParseError, ZeroAreaError, DegenerateCloudError, UnicodeDecodeError, OSError) as exc:
                log.warning("skipping %s: %s", rel, exc)
                skipped.append(rel)
                continue
            if i >= len(train_files):
                test.append(cloud)
            elif i in val_idx:
                validation.append(cloud)
            else:
                train.append(cloud)
    if attempted and len(skipped) / attempted > max_skip_fraction:
        raise RuntimeError(f"{len(skipped)} of {attempted} files unreadable (> {max_skip_fraction:.0%})")

    ds = DatasetSplit(train, validation, test, class_names, skipped)
    if cache_dir is not None:
        cache_dir.mkdir(parents=True, exist_ok=True)
        for s in ("train", "validation", "test"):
            write_cache(getattr(ds, s), files[s])
        names_file.write_text("\n".join(class_names))
    return ds
