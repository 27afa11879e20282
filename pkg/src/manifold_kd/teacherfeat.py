"""Rotation-invariant patch coordinates for the teacher branch.

Each neighbour ``a_i`` of a patch centred at ``a`` gets an 8-vector built
from one distance and seven angles between edge vectors and local reference
axes (LRAs).  Neighbours are first put in a canonical azimuthal order around
the center's LRA so the "next neighbour" terms do not depend on list order.

Column layout (``L[.]`` is an LRA, ``u -> v`` the vector from u to v)::

    0  |a_i - a|
    1  angle(L[a_i], a_i -> a)
    2  angle(L[a],   a_i -> a)
    3  s_i * angle(L[a_i], a_i -> a)
    4  angle(a_{i+1} -> a, a_i -> a_{i+1})
    5  angle(L[a_i],     a_i -> a_{i+1})
    6  angle(L[a_{i+1}], a_i -> a_{i+1})
    7  s'_i * angle(L[a_i], L[a_{i+1}])

with ``s_i = sign(det[L[a], a_i -> a, L[a_i]])`` and
``s'_i = sign(det[L[a_i], a_i -> a_{i+1}, L[a_{i+1}]])`` (zero, up to round-off, counts as +).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneratePatch
from .geomcore import Patch, knn_batch, lra_batch

N_COORDS = 8
# projections shorter than this (relative to patch radius) have no azimuth
_PROJ_TOL = 1e-12
# azimuth gaps / triple products below these are left to round-off
_AZ_TOL = 1e-9
_TRIPLE_TOL = 1e-10
_TRIPLE_BAND = 1e-13


@dataclass
class InvariantPatchCoords:
    values: np.ndarray
    degenerate_flag: bool = False


def angle_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Unsigned angle via atan2(|u x v|, u . v); zero-length inputs give 0."""
    cr = np.linalg.norm(np.cross(u, v), axis=-1)
    dt = np.einsum("...d,...d->...", u, v)
    return np.arctan2(cr, dt)


def _triple(a, b, c):
    return np.einsum("...d,...d->...", np.cross(a, b), c)


def order_neighbors_batch(rel: np.ndarray, normal: np.ndarray, index: np.ndarray | None = None):
    """Canonical azimuthal permutation for stacked patches.

    ``rel`` holds neighbour offsets from the center, ``(..., k, 3)``;
    ``normal`` the center LRA, ``(..., 3)``.  Returns ``(perm, ambiguous,
    empty)`` where ``perm`` indexes the k axis.  ``index`` (point ids) breaks
    exact distance ties so the result never depends on list position.
    """
    k = rel.shape[-2]
    if index is None:
        index = np.broadcast_to(np.arange(k), rel.shape[:-1])
    dist = np.linalg.norm(rel, axis=-1)
    scale = np.maximum(dist.max(axis=-1, keepdims=True), 1e-300)
    proj = rel - np.einsum("...kd,...d->...k", rel, normal)[..., None] * normal[..., None, :]
    pnorm = np.linalg.norm(proj, axis=-1)
    has_dir = pnorm > _PROJ_TOL * scale
    empty = ~has_dir.any(axis=-1)

    # reference: nearest neighbour (then smallest id) with a usable projection
    big = np.where(has_dir, dist, np.inf)
    ref_key = np.lexsort((index, big), axis=-1)[..., 0]
    ref = np.take_along_axis(proj, ref_key[..., None, None], axis=-2)[..., 0, :]
    ref = ref / np.maximum(np.linalg.norm(ref, axis=-1, keepdims=True), 1e-300)

    cosv = np.einsum("...kd,...d->...k", proj, ref)
    sinv = np.einsum("...kd,...d->...k", np.cross(ref[..., None, :], proj), normal)
    az = np.mod(np.arctan2(sinv, cosv), 2 * np.pi)
    np.put_along_axis(az, ref_key[..., None], 0.0, axis=-1)
    az = np.where(has_dir, az, -1.0)

    perm = np.lexsort((index, dist, az), axis=-1)
    az_sorted = np.take_along_axis(az, perm, axis=-1)
    valid = az_sorted >= 0
    gaps = np.diff(az_sorted, axis=-1)
    close = (gaps < _AZ_TOL) & valid[..., 1:]
    wrap = valid & (az_sorted > 2 * np.pi - _AZ_TOL)
    ambiguous = close.any(axis=-1) | wrap.any(axis=-1)
    # nearest-distance ties make the reference choice fragile
    if k > 1:
        dsorted = np.sort(big, axis=-1)
        fin = np.isfinite(dsorted[..., 1])
        gap = np.where(fin, dsorted[..., 1], 0.0) - np.where(fin, dsorted[..., 0], 0.0)
        ambiguous |= fin & (gap < _AZ_TOL * scale[..., 0])
    return perm, ambiguous, empty


def invariant_coords_batch(center, nbrs, lra_center, lra_nbrs):
    """The 8 invariant columns for already-ordered neighbours.

    Shapes: center ``(..., 3)``, nbrs ``(..., k, 3)``, lra_center ``(..., 3)``,
    lra_nbrs ``(..., k, 3)``.  Returns ``(values (..., k, 8), ambiguous (...))``.
    """
    c = center[..., None, :]
    lc = np.broadcast_to(lra_center[..., None, :], nbrs.shape)
    nxt = np.roll(nbrs, -1, axis=-2)
    lnxt = np.roll(lra_nbrs, -1, axis=-2)
    to_c = c - nbrs
    edge = nxt - nbrs
    nxt_to_c = c - nxt

    s1_t = _triple(lc, to_c, lra_nbrs)
    s2_t = _triple(lra_nbrs, edge, lnxt)
    n1 = np.linalg.norm(to_c, axis=-1)
    n2 = np.linalg.norm(edge, axis=-1)
    # neighbours sharing a k-NN set get identical (or opposite) LRAs, making the
    # triple products exactly zero up to round-off; snap those to +
    z1 = np.abs(s1_t) <= _TRIPLE_TOL * n1
    z2 = np.abs(s2_t) <= _TRIPLE_TOL * n2
    s1 = np.where(z1 | (s1_t > 0), 1.0, -1.0)
    s2 = np.where(z2 | (s2_t > 0), 1.0, -1.0)

    a1 = angle_between(lra_nbrs, to_c)
    out = np.stack([
        np.linalg.norm(to_c, axis=-1),
        a1,
        angle_between(lc, to_c),
        s1 * a1,
        angle_between(nxt_to_c, edge),
        angle_between(lra_nbrs, edge),
        angle_between(lnxt, edge),
        s2 * angle_between(lra_nbrs, lnxt),
    ], axis=-1)

    # only values near the snapping threshold can flip under round-off
    band = (np.abs(np.abs(s1_t) - _TRIPLE_TOL * n1) < _TRIPLE_BAND * n1) | (
        np.abs(np.abs(s2_t) - _TRIPLE_TOL * n2) < _TRIPLE_BAND * n2)
    return out, band.any(axis=-1)


def point_lras(points: np.ndarray, k: int):
    """LRA of every point from its own k-NN (self included).

    ``points`` may carry leading batch axes, ``(..., n, 3)``.  Returns
    ``(axes, degenerate, ambiguous)``.
    """
    k = min(k, points.shape[-2])
    idx = knn_batch(points, points, k)
    nb = _gather(points, idx)
    return lra_batch(nb, points)


def _gather(points: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``points (..., n, d)`` indexed by ``idx (..., m, k)`` -> ``(..., m, k, d)``."""
    lead = points.shape[:-2]
    flat_pts = points.reshape((-1,) + points.shape[-2:])
    flat_idx = idx.reshape((flat_pts.shape[0],) + idx.shape[len(lead):])
    rows = np.arange(flat_pts.shape[0]).reshape((-1,) + (1,) * (flat_idx.ndim - 1))
    out = flat_pts[rows, flat_idx]
    return out.reshape(idx.shape + points.shape[-1:])


def order_neighbors(points, patch: Patch, lra_center: np.ndarray) -> Patch:
    """Return ``patch`` with neighbours in canonical azimuthal order."""
    pts = np.asarray(points, dtype=np.float64)
    nb = np.asarray(patch.neighbor_indices, dtype=np.int64)
    if nb.size < 1:
        raise DegeneratePatch("patch has no neighbours")
    rel = pts[nb] - pts[patch.center_index]
    perm, _, empty = order_neighbors_batch(rel[None], np.asarray(lra_center, dtype=np.float64)[None], nb[None])
    if empty[0]:
        raise DegeneratePatch("all neighbours project onto the center axis")
    return Patch(patch.center_index, tuple(int(i) for i in nb[perm[0]]), patch.level)


def invariant_coords(points, patch: Patch, lra_k: int | None = None) -> InvariantPatchCoords:
    """Invariant coordinates of one patch.

    LRAs for the center and each neighbour come from each point's own
    ``lra_k`` nearest neighbours in ``points`` (default: the patch size).
    The neighbour order is canonicalised here, so callers may pass any order.
    """
    pts = np.asarray(points, dtype=np.float64)
    nb = np.asarray(patch.neighbor_indices, dtype=np.int64)
    k = min(lra_k or max(len(nb), 3), len(pts))
    # LRAs only for the points involved: row 0 is the center, then the neighbours
    involved = np.concatenate([[patch.center_index], nb])
    own = _gather(pts, knn_batch(pts, pts[involved], k))
    axes, deg, amb = lra_batch(own, pts[involved])
    rel = pts[nb] - pts[patch.center_index]
    perm, oamb, empty = order_neighbors_batch(rel[None], axes[0][None], nb[None])
    flag = bool(oamb[0] or empty[0])
    nb = nb[perm[0]]
    vals, camb = invariant_coords_batch(pts[patch.center_index], pts[nb], axes[0], axes[1:][perm[0]])
    flag = flag or bool(camb) or bool(deg.any() or amb.any())
    return InvariantPatchCoords(vals, flag)
