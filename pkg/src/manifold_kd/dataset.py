"""Synthetic labelled shapes, point-cloud text I/O and corrupted views.

Surface samplers (all area-uniform, canonical pose, before scaling):

* sphere: unit sphere, normalised Gaussian directions.
* cube: surface of [-1, 1]^3; a face is chosen uniformly, then a uniform
  point on it.
* cylinder: radius 1, z in [-1, 1]; lateral surface (area 4 pi) vs the two
  caps (2 pi) chosen by area, caps sampled with r = sqrt(u).
* torus: major radius 1, minor radius 0.35 around z; tube angle accepted
  with probability (R + r cos t) / (R + r) so the inner ring is not
  oversampled.
* cone: base radius 1 at z = -1, apex at z = 1; lateral (pi sqrt 5) vs base
  (pi) by area, lateral height fraction from the apex is sqrt(u).

Each cloud then gets an independent per-axis scale from ``scale_range`` and
Gaussian jitter clipped to three sigma, and is normalised to the unit sphere.
Every cloud draws from its own Philox stream keyed by (seed, split, class,
index).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import BadProtocol, BadSpec, ParseError
from .geomcore import (
    PointCloud,
    add_gaussian_noise,
    apply_transform,
    inject_outliers,
    make_rng,
    normalize_to_unit_sphere,
    random_rotation,
)

SHAPES = ("sphere", "cube", "cylinder", "torus", "cone")
PROTOCOLS = ("rotation", "noise", "outlier")
TORUS_R, TORUS_TUBE = 1.0, 0.35
JITTER_CLIP = 3.0


@dataclass
class SyntheticSpec:
    classes: tuple = ("sphere", "cube", "cylinder", "torus")
    points_per_cloud: int = 256
    train_per_class: int = 200
    test_per_class: int = 100
    jitter: float = 0.01
    scale_range: tuple = (0.7, 1.3)
    seed: int = 0

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise BadSpec("need at least 2 classes")
        unknown = [c for c in self.classes if c not in SHAPES]
        if unknown:
            raise BadSpec(f"unknown shape classes {unknown}; choose from {SHAPES}")
        if len(set(self.classes)) != len(self.classes):
            raise BadSpec("duplicate classes")
        if self.points_per_cloud < 32:
            raise BadSpec("points_per_cloud must be >= 32")
        if self.train_per_class < 0 or self.test_per_class < 0:
            raise BadSpec("per-class counts must be non-negative")
        if self.jitter < 0:
            raise BadSpec("jitter must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise BadSpec("scale_range must satisfy 0 < min <= max")


@dataclass
class CloudSet:
    """An indexable collection of labelled clouds."""

    clouds: list
    class_names: tuple = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.clouds)

    def __getitem__(self, i: int) -> PointCloud:
        return self.clouds[i]

    def __iter__(self) -> Iterator[PointCloud]:
        return iter(self.clouds)

    @property
    def n_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return max(c.label for c in self.clouds) + 1

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)

    def stack(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self)) if indices is None else indices
        return np.stack([self[i].points for i in idx])


def _sphere(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _cube(n, rng):
    face = rng.integers(6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    out = np.empty((n, 3))
    for a in range(3):
        others = [b for b in range(3) if b != a]
        sel = axis == a
        out[sel, a] = sign[sel]
        out[np.ix_(sel, others)] = uv[sel]
    return out


def _cylinder(n, rng):
    lateral = rng.uniform(size=n) < 4.0 / 6.0
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    rad = np.sqrt(rng.uniform(size=n))
    cap = np.where(rng.uniform(size=n) < 0.5, 1.0, -1.0)
    r = np.where(lateral, 1.0, rad)
    return np.stack([r * np.cos(theta), r * np.sin(theta), np.where(lateral, z, cap)], axis=1)


def _torus(n, rng):
    out = np.empty((0, 3))
    while out.shape[0] < n:
        m = 2 * (n - out.shape[0]) + 8
        t = rng.uniform(0.0, 2 * np.pi, size=m)
        p = rng.uniform(0.0, 2 * np.pi, size=m)
        keep = rng.uniform(size=m) < (TORUS_R + TORUS_TUBE * np.cos(t)) / (TORUS_R + TORUS_TUBE)
        t, p = t[keep], p[keep]
        ring = TORUS_R + TORUS_TUBE * np.cos(t)
        pts = np.stack([ring * np.cos(p), ring * np.sin(p), TORUS_TUBE * np.sin(t)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _cone(n, rng):
    slant = np.sqrt(5.0)
    lateral = rng.uniform(size=n) < slant / (slant + 1.0)
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    frac = np.sqrt(rng.uniform(size=n))  # distance fraction from the apex
    rad_base = np.sqrt(rng.uniform(size=n))
    r = np.where(lateral, frac, rad_base)
    z = np.where(lateral, 1.0 - 2.0 * frac, -1.0)
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


_SAMPLERS = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder, "torus": _torus, "cone": _cone}


def sample_surface(shape: str, n: int, rng: np.random.Generator) -> np.ndarray:
    try:
        return _SAMPLERS[shape](n, rng)
    except KeyError:
        raise BadSpec(f"unknown shape {shape!r}") from None


def _make_cloud(spec: SyntheticSpec, split: int, label: int, index: int) -> PointCloud:
    rng = make_rng(spec.seed, split, label, index)
    pts = sample_surface(spec.classes[label], spec.points_per_cloud, rng)
    pts = pts * rng.uniform(spec.scale_range[0], spec.scale_range[1], size=3)
    if spec.jitter > 0:
        pts = pts + np.clip(rng.normal(0.0, spec.jitter, size=pts.shape),
                            -JITTER_CLIP * spec.jitter, JITTER_CLIP * spec.jitter)
    return normalize_to_unit_sphere(PointCloud(pts, label))


def generate(spec: SyntheticSpec) -> tuple[CloudSet, CloudSet]:
    """Train and test sets, class-major order, canonical pose."""
    spec.validate()
    names = tuple(spec.classes)
    train = [_make_cloud(spec, 0, c, i) for c in range(len(names)) for i in range(spec.train_per_class)]
    test = [_make_cloud(spec, 1, c, i) for c in range(len(names)) for i in range(spec.test_per_class)]
    return CloudSet(train, names), CloudSet(test, names)


# text I/O --------------------------------------------------------------------

MAGIC = "pcd/1"


def format_cloud(cloud: PointCloud) -> str:
    n, d = cloud.points.shape
    label = -1 if cloud.label is None else int(cloud.label)
    lines = [MAGIC, f"n {n} d {d} label {label}"]
    lines.extend(" ".join(f"{v:.9g}" for v in row) for row in cloud.points)
    return "\n".join(lines) + "\n"


def save_cloud(cloud: PointCloud, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(format_cloud(cloud))


def parse_cloud(text: str, path=None) -> PointCloud:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].strip() != MAGIC:
        raise ParseError(f"expected header {MAGIC!r}", 1, path)
    if len(lines) < 2:
        raise ParseError("missing size line", 2, path)
    head = lines[1].split()
    if len(head) != 6 or head[0] != "n" or head[2] != "d" or head[4] != "label":
        raise ParseError("expected 'n <N> d <D> label <L>'", 2, path)
    try:
        n, d, label = int(head[1]), int(head[3]), int(head[5])
    except ValueError:
        raise ParseError("non-integer field in size line", 2, path) from None
    if n < 1 or d < 1 or label < -1:
        raise ParseError("invalid size line values", 2, path)
    body = lines[2:]
    if len(body) != n:
        raise ParseError(f"header declares {n} points, found {len(body)}", 2 + min(len(body), n) + (len(body) < n), path)
    pts = np.empty((n, d))
    for i, line in enumerate(body):
        parts = line.split()
        if len(parts) != d:
            raise ParseError(f"expected {d} values, found {len(parts)}", i + 3, path)
        try:
            pts[i] = [float(v) for v in parts]
        except ValueError:
            raise ParseError("malformed number", i + 3, path) from None
    if not np.all(np.isfinite(pts)):
        raise ParseError("non-finite coordinate", None, path)
    return PointCloud(pts, None if label == -1 else label)


def load_cloud(path) -> PointCloud:
    with open(path, encoding="ascii") as fh:
        return parse_cloud(fh.read(), os.fspath(path))


def write_split(cset: CloudSet, root, split: str) -> Path:
    """Write ``root/split/NNNNNN.pcd`` files and the ``root/split.txt`` manifest."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, cloud in enumerate(cset):
        rel = f"{split}/{i:06d}.pcd"
        save_cloud(cloud, root / rel)
        lines.append(f"{rel} {cloud.label}")
    manifest = root / f"{split}.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    if cset.class_names:
        (root / "classes.txt").write_text("\n".join(cset.class_names) + "\n", encoding="ascii")
    return manifest


def read_split(root, split: str) -> CloudSet:
    root = Path(root)
    manifest = root / f"{split}.txt"
    clouds = []
    for lineno, line in enumerate(manifest.read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError("expected '<path> <label>'", lineno, manifest)
        try:
            label = int(parts[1])
        except ValueError:
            raise ParseError("non-integer label", lineno, manifest) from None
        cloud = load_cloud(root / parts[0])
        clouds.append(PointCloud(cloud.points, label))
    names_file = root / "classes.txt"
    names = tuple(names_file.read_text(encoding="ascii").split()) if names_file.exists() else ()
    return CloudSet(clouds, names)


# corruption ------------------------------------------------------------------

class CorruptedView:
    """Lazily corrupted view over a :class:`CloudSet`.

    Cloud ``i`` is corrupted with a generator keyed by ``(seed, i)``; the
    underlying set is never modified.  ``level`` is the maximum rotation
    angle in degrees, the noise sigma, or the outlier fraction.
    """

    def __init__(self, base: CloudSet, protocol: str, level: float, seed: int, outlier_sigma: float = 0.1):
        if protocol not in PROTOCOLS:
            raise BadProtocol(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
        self.base = base
        self.protocol = protocol
        self.level = float(level)
        self.seed = int(seed)
        self.outlier_sigma = outlier_sigma
        self.class_names = base.class_names

    def __len__(self):
        return len(self.base)

    @property
    def n_classes(self):
        return self.base.n_classes

    def labels(self):
        return self.base.labels()

    def transform_for(self, i: int):
        """The rigid transform used for cloud ``i`` (rotation protocol only)."""
        return random_rotation(self.level, make_rng(self.seed, i))

    def __getitem__(self, i: int) -> PointCloud:
        cloud = self.base[i]
        if self.level == 0:
            return cloud
        rng = make_rng(self.seed, i)
        if self.protocol == "rotation":
            return apply_transform(cloud, random_rotation(self.level, rng))
        if self.protocol == "noise":
            return add_gaussian_noise(cloud, self.level, rng)
        return inject_outliers(cloud, self.level, self.outlier_sigma, rng)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def stack(self, indices=None):
        idx = range(len(self)) if indices is None else indices
        return np.stack([self[i].points for i in idx])


def corrupted_view(cset, protocol: str, level: float, seed: int, outlier_sigma: float = 0.1) -> CorruptedView:
    return CorruptedView(cset, protocol, level, seed, outlier_sigma)
