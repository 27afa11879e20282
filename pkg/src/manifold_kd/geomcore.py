"""Point cloud containers, sampling, neighbourhood queries and perturbations.

All randomness goes through :func:`make_rng`, which builds a numpy
``Generator`` on the Philox-4x64 counter-based bit generator.  Philox has
fixed round constants and numpy guarantees its stream for a given key, so a
seed reproduces bit-identical draws on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import (
    BadAngle,
    BadCount,
    BadFraction,
    DegenerateCloud,
    NegativeSigma,
    NonOrthonormal,
)

# |dot| below this leaves the LRA orientation to round-off.
LRA_SIGN_TOL = 1e-6
# relative eigen-gap below which the smallest eigenvector is not well defined
LRA_GAP_TOL = 1e-6
# second eigenvalue below this fraction of the largest => collinear
LRA_FLAT_TOL = 1e-12


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and optional sub-stream keys."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class PointCloud:
    points: np.ndarray
    label: Optional[int] = None
    per_point_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise DegenerateCloud(f"expected an (n, d) array with n >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise DegenerateCloud("point coordinates must be finite")
        self.points = pts
        if self.per_point_labels is not None:
            ppl = np.asarray(self.per_point_labels, dtype=np.int64)
            if ppl.shape != (pts.shape[0],):
                raise DegenerateCloud("per_point_labels must have one entry per point")
            self.per_point_labels = ppl

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.label, self.per_point_labels)


@dataclass
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def validate(self, tol: float = 1e-9) -> None:
        r = self.rotation
        if r.shape != (3, 3) or self.translation.shape != (3,):
            raise NonOrthonormal("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), rtol=0.0, atol=tol):
            raise NonOrthonormal("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > tol:
            raise NonOrthonormal("rotation has det != 1")

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    @property
    def angle_deg(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))


@dataclass(frozen=True)
class Patch:
    center_index: int
    neighbor_indices: tuple
    level: int = 0

    @property
    def k(self) -> int:
        return len(self.neighbor_indices)


class LRA(NamedTuple):
    axis: np.ndarray
    degenerate: bool
    ambiguous: bool


def _as_points(cloud) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64)


def normalize_to_unit_sphere(cloud: PointCloud) -> PointCloud:
    pts = cloud.points
    centered = pts - pts.mean(axis=0)
    scale = np.sqrt((centered**2).sum(axis=1).max())
    if not scale > 0:
        raise DegenerateCloud("all points coincide; cannot normalize")
    return cloud.with_points(centered / scale)


def farthest_point_sample(cloud, m: int, rng: np.random.Generator | None = None,
                          start: int | None = None) -> list[int]:
    """Greedy max-min subsampling.

    The first index is ``start`` when given, otherwise drawn from ``rng``.
    Ties are resolved towards the smallest index.
    """
    pts = _as_points(cloud)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise BadCount(f"cannot sample m={m} of n={n} points")
    if start is None:
        if rng is None:
            raise ValueError("either rng or start is required")
        start = int(rng.integers(n))
    return fps_batch(pts[None], m, np.array([start]))[0].tolist()


def fps_batch(points: np.ndarray, m: int, starts: np.ndarray) -> np.ndarray:
    """Vectorised FPS over a batch ``(B, n, d)``; returns ``(B, m)`` indices."""
    b, n, _ = points.shape
    if not 1 <= m <= n:
        raise BadCount(f"cannot sample m={m} of n={n} points")
    out = np.empty((b, m), dtype=np.int64)
    rows = np.arange(b)
    cur = np.asarray(starts, dtype=np.int64)
    mind = np.full((b, n), np.inf)
    for i in range(m):
        out[:, i] = cur
        d = ((points - points[rows, cur][:, None, :]) ** 2).sum(-1)
        np.minimum(mind, d, out=mind)
        cur = mind.argmax(axis=1)
    return out


def sq_dists(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Pairwise squared distances, ``(..., q, d) x (..., n, d) -> (..., q, n)``."""
    diff = queries[..., :, None, :] - points[..., None, :, :]
    return np.einsum("...d,...d->...", diff, diff)


def knn(points, queries, k: int) -> np.ndarray:
    """Exact k nearest neighbours, ascending distance, ties to the smaller index."""
    pts = np.asarray(points, dtype=np.float64)
    qs = np.asarray(queries, dtype=np.float64)
    if qs.ndim == 1:
        qs = qs[None]
    return knn_batch(pts[None], qs[None], k)[0]


def knn_batch(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    n = points.shape[-2]
    if not 1 <= k <= n:
        raise BadCount(f"k={k} neighbours requested from {n} points")
    d = sq_dists(queries, points)
    return np.argsort(d, axis=-1, kind="stable")[..., :k]


def ball_query(points, center, radius: float, max_k: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64).reshape(1, 1, -1)
    return ball_query_batch(pts[None], c, radius, max_k)[0, 0]


def ball_query_batch(points: np.ndarray, centers: np.ndarray, radius: float, max_k: int) -> np.ndarray:
    """Up to ``max_k`` in-ball indices per center, nearest first.

    Short balls are padded by repeating their nearest member; an empty ball
    yields the globally nearest point repeated ``max_k`` times.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if max_k < 1:
        raise BadCount("max_k must be >= 1")
    d = sq_dists(centers, points)
    order = np.argsort(d, axis=-1, kind="stable")
    take = min(max_k, points.shape[-2])
    idx = order[..., :take]
    dsel = np.take_along_axis(d, idx, axis=-1)
    inside = dsel <= radius * radius
    # nearest point is always kept so empty balls fall back to it
    inside[..., 0] = True
    first = idx[..., :1]
    idx = np.where(inside, idx, first)
    if take < max_k:
        pad = np.broadcast_to(first, idx.shape[:-1] + (max_k - take,))
        idx = np.concatenate([idx, pad], axis=-1)
    return idx


def _lra_from_cov(cov: np.ndarray, toward: np.ndarray):
    """Smallest-eigenvalue axes for stacked 3x3 covariances, sign-fixed.

    Returns ``(axes, degenerate, ambiguous)``.
    """
    w, v = np.linalg.eigh(cov)
    axes = v[..., :, 0].copy()
    top = np.maximum(w[..., 2], 0.0)
    degenerate = (top <= 1e-300) | (w[..., 1] <= LRA_FLAT_TOL * top)
    gap_small = (w[..., 1] - w[..., 0]) <= LRA_GAP_TOL * np.maximum(top, 1e-300)

    s = np.einsum("...d,...d->...", axes, toward)
    # lexicographic fallback for an exactly orthogonal orientation vector
    nz = axes != 0
    first_nz = np.take_along_axis(axes, nz.argmax(axis=-1)[..., None], axis=-1)[..., 0]
    flip = (s < 0) | ((s == 0) & (first_nz < 0))
    axes[flip] *= -1
    ambiguous = (np.abs(s) < LRA_SIGN_TOL) | gap_small

    zplus = np.array([0.0, 0.0, 1.0])
    axes[degenerate] = zplus
    ambiguous = ambiguous & ~degenerate
    return axes, degenerate, ambiguous


def compute_lra(points, neighbor_indices: Sequence[int], center_index: int) -> LRA:
    """Local reference axis: the normal of the neighbourhood's best-fit plane.

    The axis points from the neighbour barycenter towards the center point.
    Collinear or coincident neighbourhoods fall back to ``+z`` with the
    degenerate flag set.
    """
    pts = _as_points(points)
    nb = pts[np.asarray(neighbor_indices, dtype=np.int64)]
    axes, deg, amb = lra_batch(nb[None], pts[center_index][None])
    return LRA(axes[0], bool(deg[0]), bool(amb[0]))


def lra_batch(neighbors: np.ndarray, centers: np.ndarray):
    """LRAs for stacked neighbourhoods ``(..., k, 3)`` with centers ``(..., 3)``."""
    bary = neighbors.mean(axis=-2)
    rel = neighbors - bary[..., None, :]
    cov = np.einsum("...ki,...kj->...ij", rel, rel) / neighbors.shape[-2]
    return _lra_from_cov(cov, centers - bary)


def rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    kx = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def random_rotation(max_angle_deg: float, rng: np.random.Generator) -> RigidTransform:
    """Rotation about a sphere-uniform axis by an angle uniform in [0, max]."""
    if not 0.0 <= max_angle_deg <= 180.0:
        raise BadAngle(f"max_angle_deg must lie in [0, 180], got {max_angle_deg}")
    axis = rng.standard_normal(3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.standard_normal(3)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    return RigidTransform(rotation_matrix(axis, angle), np.zeros(3))


def apply_transform(cloud: PointCloud, t: RigidTransform) -> PointCloud:
    t.validate()
    return cloud.with_points(cloud.points @ t.rotation.T + t.translation)


def add_gaussian_noise(cloud: PointCloud, sigma: float, rng: np.random.Generator) -> PointCloud:
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return cloud.with_points(cloud.points.copy())
    return cloud.with_points(cloud.points + rng.normal(0.0, sigma, size=cloud.points.shape))


def inject_outliers(cloud: PointCloud, fraction: float, sigma: float,
                    rng: np.random.Generator) -> PointCloud:
    """Displace ``round(fraction * n)`` distinct points by Gaussian noise."""
    if not 0.0 <= fraction <= 1.0:
        raise BadFraction(f"fraction must lie in [0, 1], got {fraction}")
    if sigma < 0:
        raise NegativeSigma(f"sigma must be >= 0, got {sigma}")
    pts = cloud.points.copy()
    count = int(round(fraction * cloud.n))
    if count:
        chosen = rng.choice(cloud.n, size=count, replace=False)
        pts[chosen] += rng.normal(0.0, sigma, size=(count, pts.shape[1]))
    return cloud.with_points(pts)
