"""Network building blocks for the teacher and student encoders.

Tensors carry a leading batch axis throughout: point coordinates are
``(B, n, 3)`` arrays, features ``(B, n, C)`` :class:`Tensor` objects.  Index
selection (FPS, k-NN, ball queries) is geometry only and never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import BadCount, ShapeMismatch
from .geomcore import ball_query_batch, fps_batch, knn_batch
from .teacherfeat import N_COORDS, _gather, invariant_coords_batch, order_neighbors_batch, point_lras


@dataclass
class LevelConfig:
    m: int
    k: int
    radius: float
    channels: int


@dataclass
class EncoderConfig:
    levels: list[LevelConfig] = field(default_factory=lambda: [
        LevelConfig(128, 16, 0.2, 64),
        LevelConfig(64, 16, 0.4, 128),
        LevelConfig(16, 16, 0.8, 256),
    ])
    n_radii: int = 2
    r_fraction: float = 0.25
    head_hidden: int = 128
    use_norm: bool = True
    align_k: int = 0  # 0: use the level's k

    def radii(self, level: int) -> list[float]:
        base = self.levels[level].radius
        return [base * (i + 1) for i in range(self.n_radii)]

    def rank(self, level: int) -> int:
        return int(np.floor(self.r_fraction * self.levels[level].channels))

    def align_k_for(self, level: int) -> int:
        k = self.align_k or self.levels[level].k
        return min(k, self.levels[level].m)

    def validate(self, n_points: int) -> None:
        prev = n_points
        if not self.levels:
            raise ValueError("encoder needs at least one level")
        if self.n_radii < 1:
            raise ValueError("n_radii must be >= 1")
        for i, lv in enumerate(self.levels):
            if not 1 <= lv.m <= prev:
                raise BadCount(f"level {i}: m={lv.m} exceeds the {prev} points available")
            if not 1 <= lv.k <= prev:
                raise BadCount(f"level {i}: k={lv.k} exceeds the {prev} points available")
            if lv.channels % self.n_radii:
                raise ValueError(f"level {i}: channels {lv.channels} not divisible by n_radii={self.n_radii}")
            if not lv.radius > 0:
                raise ValueError(f"level {i}: radius must be positive")
            r = self.rank(i)
            if not (1 <= r and 2 * r < lv.channels):
                raise ValueError(f"level {i}: rank {r} must satisfy 1 <= r < C/2 (C={lv.channels})")
            prev = lv.m


@dataclass
class FeatureMap:
    level: int
    centers: np.ndarray  # (B, m, 3)
    features: Tensor  # (B, m, C)

    @property
    def C(self) -> int:
        return self.features.shape[-1]


class MLP:
    """Shared per-row MLP: linear, optional layer norm, ReLU for every layer."""

    def __init__(self, name: str, widths: list[int], rng: np.random.Generator, norm: bool = True):
        self.name = name
        self.widths = list(widths)
        self.norm = norm
        self.layers = []
        for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
            layer = {
                "W": Tensor(rng.normal(0.0, np.sqrt(2.0 / fi), size=(fi, fo)), True),
                "b": Tensor(np.zeros(fo), True),
            }
            if norm:
                layer["g"] = Tensor(np.ones(fo), True)
                layer["beta"] = Tensor(np.zeros(fo), True)
            self.layers.append(layer)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.items()}

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.widths[0]:
            raise ShapeMismatch(f"{self.name}: expected {self.widths[0]} input channels, got {x.shape[-1]}")
        for layer in self.layers:
            x = dc.bias_add(dc.matmul(x, layer["W"]), layer["b"])
            if self.norm:
                x = dc.layer_norm(x, layer["g"], layer["beta"])
            x = dc.relu(x)
        return x


class Linear:
    def __init__(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.name = name
        self.W = Tensor(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out)), True)
        self.b = Tensor(np.zeros(fan_out), True)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.W": self.W, f"{self.name}.b": self.b}

    def __call__(self, x: Tensor) -> Tensor:
        return dc.bias_add(dc.matmul(x, self.W), self.b)


def graph_rep(center, neighbors) -> Tensor:
    """Rows ``center (+) (neighbor_i - center)`` for ``(..., d)`` / ``(..., k, d)``."""
    center, neighbors = dc.as_tensor(center), dc.as_tensor(neighbors)
    if center.shape != neighbors.shape[:-2] + neighbors.shape[-1:]:
        raise ShapeMismatch(f"graph_rep: center {center.shape} vs neighbours {neighbors.shape}")
    c = dc.expand(center, -2, neighbors.shape[-2])
    return dc.concat([c, dc.sub(neighbors, c)], axis=-1)


def pointnet_map(rows, mlp: MLP) -> Tensor:
    """Shared MLP on each row of ``(..., k, d)`` then max over the k rows."""
    return dc.max_reduce(mlp(dc.as_tensor(rows)), axis=-2)


def feature_space_patch(features: Tensor, k: int, mlp: MLP):
    """k-NN patches in feature space around every point, mapped by ``mlp``.

    Returns ``(neighbour indices (B, n, k), new features (B, n, C'))``.
    """
    n = features.shape[-2]
    if not 1 <= k <= n:
        raise BadCount(f"feature-space k={k} exceeds {n} points")
    idx = knn_batch(features.value, features.value, k)
    rows = graph_rep(features, dc.gather(features, idx))
    return idx, pointnet_map(rows, mlp)


def gsm_block(centers: np.ndarray, points: np.ndarray, sf_features: Tensor,
              ball_idx: list[np.ndarray], mlps: list[MLP]) -> Tensor:
    """Multi-radius grouping with one mapping per radius, outputs concatenated.

    ``ball_idx[i]`` holds ``(B, m, k)`` ball-query indices into ``points`` for
    radius ``i``.  Each row is the background graph row (6 values) followed by
    the neighbour's feature-space row.
    """
    if len(ball_idx) != len(mlps) or not mlps:
        raise ShapeMismatch("need one MLP per radius")
    outs = []
    c = dc.constant(centers)
    for idx, mlp in zip(ball_idx, mlps):
        nb = dc.constant(_gather(points, idx))
        rows = dc.concat([graph_rep(c, nb), dc.gather(sf_features, idx)], axis=-1)
        outs.append(pointnet_map(rows, mlp))
    return outs[0] if len(outs) == 1 else dc.concat(outs, axis=-1)


def idw_upsample(coarse_centers: np.ndarray, coarse_features: np.ndarray, fine_centers: np.ndarray,
                 p: float = 2.0, k: int = 3, eps: float = 1e-8) -> np.ndarray:
    """Inverse-distance-weighted interpolation onto ``fine_centers``.

    Works on single clouds ``(m, 3)`` or batches ``(B, m, 3)``.  A fine
    center that coincides with a coarse one copies its feature exactly.
    """
    single = coarse_centers.ndim == 2
    if single:
        coarse_centers, coarse_features, fine_centers = coarse_centers[None], coarse_features[None], fine_centers[None]
    m = coarse_centers.shape[-2]
    if not 1 <= k <= m:
        raise BadCount(f"k={k} exceeds {m} coarse centers")
    if not p > 0:
        raise ValueError("power must be positive")
    idx = knn_batch(coarse_centers, fine_centers, k)
    nb = _gather(coarse_centers, idx)
    d = np.linalg.norm(nb - fine_centers[..., None, :], axis=-1)
    w = 1.0 / (d**p + eps)
    w = w / w.sum(axis=-1, keepdims=True)
    exact = d[..., 0] == 0.0
    w[exact] = 0.0
    w[exact, 0] = 1.0
    out = np.einsum("...k,...kc->...c", w, _gather(coarse_features, idx))
    return out[0] if single else out


def idw_weights(coarse_centers: np.ndarray, fine_centers: np.ndarray, p: float = 2.0, k: int = 3,
                eps: float = 1e-8) -> np.ndarray:
    idx = knn_batch(coarse_centers[None], fine_centers[None], k)[0]
    d = np.linalg.norm(coarse_centers[idx] - fine_centers[:, None, :], axis=-1)
    w = 1.0 / (d**p + eps)
    return w / w.sum(axis=-1, keepdims=True)


@dataclass
class LevelGeometry:
    """Index sets shared by both branches at one encoder level."""

    center_idx: np.ndarray  # (B, m) into the previous level's points
    centers: np.ndarray  # (B, m, 3)
    ball_idx: list  # per radius, (B, m, k)
    teacher_idx: np.ndarray  # (B, m, k) canonically ordered
    teacher_coords: np.ndarray  # (B, m, k, 8)
    teacher_flag: np.ndarray  # (B, m) degenerate / ambiguous
    align_idx: np.ndarray  # (B, m, ka) patches over this level's centers


def build_geometry(points: np.ndarray, cfg: EncoderConfig, starts: np.ndarray,
                   teacher: bool = True) -> list[LevelGeometry]:
    """FPS centers, ball queries, teacher patches and alignment patches.

    ``starts`` gives the first FPS index per cloud at level 0; deeper levels
    run FPS over the previous level's centers starting from their first one.
    """
    b = points.shape[0]
    prev = points
    out = []
    for li, lv in enumerate(cfg.levels):
        st = starts if li == 0 else np.zeros(b, dtype=np.int64)
        cidx = fps_batch(prev, lv.m, st)
        centers = _gather(prev, cidx[..., None])[..., 0, :]
        balls = [ball_query_batch(prev, centers, r, lv.k) for r in cfg.radii(li)]
        if teacher:
            t_idx, coords, flag = _teacher_patches(prev, cidx, centers, lv.k)
        else:
            t_idx = coords = flag = None
        align_idx = knn_batch(centers, centers, cfg.align_k_for(li))
        out.append(LevelGeometry(cidx, centers, balls, t_idx, coords, flag, align_idx))
        prev = centers
    return out


def _teacher_patches(points: np.ndarray, cidx: np.ndarray, centers: np.ndarray, k: int):
    axes, deg, amb = point_lras(points, k)
    bad_pt = deg | amb
    nidx = knn_batch(points, centers, k)
    nbrs = _gather(points, nidx)
    lra_c = _gather(axes, cidx[..., None])[..., 0, :]
    perm, oamb, empty = order_neighbors_batch(nbrs - centers[..., None, :], lra_c, nidx)
    nidx = np.take_along_axis(nidx, perm, axis=-1)
    nbrs = _gather(points, nidx)
    coords, camb = invariant_coords_batch(centers, nbrs, lra_c, _gather(axes, nidx))
    rows = np.arange(points.shape[0])[:, None]
    nb_bad = _gather(bad_pt[..., None], nidx)[..., 0].any(axis=-1)
    flag = oamb | empty | camb | bad_pt[rows, cidx] | nb_bad
    return nidx, coords, flag


def student_level(prev: FeatureMap, geo: LevelGeometry, sf_mlp: MLP, gsm_mlps: list[MLP], k: int,
                  level: int) -> FeatureMap:
    """Feature-space patches over all previous points, then GSM at shared centers."""
    _, sf = feature_space_patch(prev.features, k, sf_mlp)
    feats = gsm_block(geo.centers, prev.centers, sf, geo.ball_idx, gsm_mlps)
    return FeatureMap(level, geo.centers, feats)


def teacher_level(prev_features: Tensor | None, geo: LevelGeometry, mlp: MLP, level: int) -> FeatureMap:
    """Invariant patch coordinates (plus previous features from level 1 on), PointNet-mapped."""
    rows = dc.constant(geo.teacher_coords)
    if prev_features is not None:
        rows = dc.concat([rows, dc.gather(prev_features, geo.teacher_idx)], axis=-1)
    return FeatureMap(level, geo.centers, pointnet_map(rows, mlp))


def classify_head(global_feature: Tensor, hidden: Linear, out: Linear) -> Tensor:
    return out(dc.relu(hidden(global_feature)))


def global_feature(fm: FeatureMap) -> Tensor:
    return dc.max_reduce(fm.features, axis=-2)


TEACHER_IN = N_COORDS
