"""Low-rank feature split, patch attention maps and the distillation losses.

A :class:`LowRankHead` splits features ``X`` (rows are points, columns
channels) into a rank-``r`` part ``X_l = X D^T U^T`` and the residual
``X_h = X - X_l``.  The low part is compared across branches through patch
Gram matrices; the residual is discouraged from sharing information with
``X`` through a soft-histogram NMI estimate.  At inference the whole
split/transform/recombine path folds into one ``C x C`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import BadBins, BadCount, BadTemperature, ShapeMismatch

ENTROPY_FLOOR = 1e-9
SPAN_FLOOR = 1e-9


def rank_for(channels: int, fraction: float = 0.25) -> int:
    return int(np.floor(fraction * channels))


@dataclass
class LowRankHead:
    D: Tensor  # r x C, down-projection
    U: Tensor  # C x r, up-projection
    Q: Tensor  # C x C, query (= key) matrix

    def __post_init__(self):
        r, c = self.D.shape
        if self.U.shape != (c, r) or self.Q.shape != (c, c):
            raise ShapeMismatch(f"inconsistent head shapes D{self.D.shape} U{self.U.shape} Q{self.Q.shape}")
        if not (1 <= r and 2 * r < c):
            raise ValueError(f"rank {r} must satisfy 1 <= r < C/2 for C={c}")

    @property
    def rank(self) -> int:
        return self.D.shape[0]

    @property
    def channels(self) -> int:
        return self.D.shape[1]

    @classmethod
    def init(cls, channels: int, rank: int, rng: np.random.Generator) -> "LowRankHead":
        """``D`` Gaussian with variance 1/C, ``U`` zero, ``Q`` identity."""
        d = rng.normal(0.0, 1.0 / np.sqrt(channels), size=(rank, channels))
        return cls(Tensor(d, True), Tensor(np.zeros((channels, rank)), True), Tensor(np.eye(channels), True))

    def parameters(self) -> dict[str, Tensor]:
        return {"D": self.D, "U": self.U, "Q": self.Q}


def _check_channels(x: Tensor, head: LowRankHead):
    if x.shape[-1] != head.channels:
        raise ShapeMismatch(f"features have {x.shape[-1]} channels, head expects {head.channels}")


def lowrank_split(X, head: LowRankHead) -> tuple[Tensor, Tensor]:
    X = dc.as_tensor(X)
    _check_channels(X, head)
    low = dc.matmul(dc.matmul(X, dc.swapaxes(head.D)), dc.swapaxes(head.U))
    return low, dc.sub(X, low)


def attention_map(X_l, Q) -> Tensor:
    """Patch Gram matrix ``(X_l Q^T)(X_l Q^T)^T``, shape ``(..., k, k)``."""
    X_l, Q = dc.as_tensor(X_l), dc.as_tensor(Q)
    if Q.shape != (X_l.shape[-1], X_l.shape[-1]):
        raise ShapeMismatch(f"query matrix {Q.shape} does not match {X_l.shape[-1]} channels")
    y = dc.matmul(X_l, dc.swapaxes(Q))
    return dc.matmul(y, dc.swapaxes(y))


def sample_rows(rng: np.random.Generator, batch_shape: tuple, k: int, m: int) -> np.ndarray:
    """``m`` distinct row indices in ``[0, k)`` per patch, ``batch_shape + (m,)``."""
    if not 1 <= m <= k:
        raise BadCount(f"cannot sample {m} of {k} rows")
    keys = rng.random(tuple(batch_shape) + (k,))
    return np.argsort(keys, axis=-1, kind="stable")[..., :m]


def kl_alignment_loss(A_T, A_S, temperature: float = 4.0, lam1: float = 0.5, lam2: float = 0.5,
                      sample_m: int = 8, rng: np.random.Generator | None = None,
                      channels: int | None = None, rows: np.ndarray | None = None) -> Tensor:
    """Temperature-scaled two-way KL between sampled attention rows.

    ``A_T``/``A_S`` are ``(..., k, k)`` maps for the same patches.  The same
    ``sample_m`` rows are drawn per patch for both maps and both directions
    (or passed in as ``rows``).  Each row becomes a distribution by softmax
    at ``temperature``; the loss is ``T^2/C * (lam1 KL(T||S) + lam2 KL(S||T))``
    summed over sampled rows, divided by ``sample_m`` and averaged over
    patches.
    """
    A_T, A_S = dc.as_tensor(A_T), dc.as_tensor(A_S)
    if A_T.shape != A_S.shape or A_T.ndim < 2 or A_T.shape[-1] != A_T.shape[-2]:
        raise ShapeMismatch(f"attention maps must be equal square shapes, got {A_T.shape}, {A_S.shape}")
    if not temperature > 0:
        raise BadTemperature(f"temperature must be positive, got {temperature}")
    k = A_T.shape[-1]
    if not 1 <= sample_m <= k:
        raise BadCount(f"sample_m={sample_m} outside [1, {k}]")
    c = channels if channels is not None else k
    if A_T.ndim == 2:
        A_T = dc.reshape(A_T, (1, k, k))
        A_S = dc.reshape(A_S, (1, k, k))
    batch = A_T.shape[:-2]
    if rows is None:
        if rng is None:
            raise ValueError("rng is required unless rows are given")
        rows = sample_rows(rng, batch, k, sample_m)
    rt = dc.gather(A_T, rows)
    rs = dc.gather(A_S, rows)
    per_row = None
    if lam1:
        per_row = dc.scalar_mul(dc.softmax_kl_rows(rt, rs, temperature), lam1)
    if lam2:
        term = dc.scalar_mul(dc.softmax_kl_rows(rs, rt, temperature), lam2)
        per_row = term if per_row is None else dc.add(per_row, term)
    if per_row is None:
        return dc.scalar_mul(dc.sum_reduce(rt), 0.0)
    n_patches = int(np.prod(batch, dtype=np.int64))
    total = dc.sum_reduce(per_row)
    return dc.scalar_mul(total, temperature**2 / c / sample_m / n_patches)


def default_bandwidth(bins: int) -> float:
    # sharp enough that NMI(x, x) stays within 0.02 of 1 for 16 bins
    return 1.0 / (32.0 * bins)


def _soft_assign(u: Tensor, bins: int, bandwidth: float) -> Tensor:
    return dc.soft_bins(u, (np.arange(bins) + 0.5) / bins, bandwidth)


def _minmax(x: Tensor) -> Tensor:
    """Rescale each channel of ``(..., k, C)`` to [0, 1] over the k axis.

    The span gets a small additive floor so the map stays continuous as a
    channel becomes constant (constant channels land in the first bin and
    the entropy guard then drops them).
    """
    k = x.shape[-2]
    hi = dc.max_reduce(x, -2)
    lo = dc.scalar_mul(dc.max_reduce(dc.scalar_mul(x, -1.0), -2), -1.0)
    span = dc.add_scalar(dc.sub(hi, lo), SPAN_FLOOR)
    return dc.div(dc.sub(x, dc.expand(lo, -2, k)), dc.expand(span, -2, k))


def _entropy(p: Tensor, axes: int) -> Tensor:
    h = dc.xlogx(p)
    for _ in range(axes):
        h = dc.sum_reduce(h, -1)
    return dc.scalar_mul(h, -1.0)


def nmi_per_channel(X_h, X, bins: int = 16, bandwidth: float | None = None) -> Tensor:
    """Soft-histogram NMI for every channel, shape ``(..., C)``."""
    X_h, X = dc.as_tensor(X_h), dc.as_tensor(X)
    if X_h.shape != X.shape or X.ndim < 2:
        raise ShapeMismatch(f"NMI inputs must share a (..., k, C) shape, got {X_h.shape}, {X.shape}")
    if bins < 2:
        raise BadBins(f"need at least 2 bins, got {bins}")
    h = default_bandwidth(bins) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    k = X.shape[-2]
    a_h = _soft_assign(_minmax(X_h), bins, h)  # (..., k, C, bins)
    a_x = _soft_assign(_minmax(X), bins, h)
    a_h = dc.swapaxes(a_h, -3, -2)  # (..., C, k, bins)
    a_x = dc.swapaxes(a_x, -3, -2)
    joint = dc.scalar_mul(dc.matmul(dc.swapaxes(a_h), a_x), 1.0 / k)  # (..., C, bins, bins)
    p_h = dc.sum_reduce(joint, -1)
    p_x = dc.sum_reduce(joint, -2)
    H_h = _entropy(p_h, 1)
    H_x = _entropy(p_x, 1)
    H_j = _entropy(joint, 2)
    mi = dc.sub(dc.add(H_h, H_x), H_j)
    keep = ((H_h.value >= ENTROPY_FLOOR) & (H_x.value >= ENTROPY_FLOOR)).astype(np.float64)
    prod = dc.add(dc.mul(dc.mul(H_h, H_x), dc.constant(keep)), dc.constant(1.0 - keep))
    return dc.div(dc.mul(mi, dc.constant(keep)), dc.sqrt(prod))


def nmi_loss(X_h, X, bins: int = 16, bandwidth: float | None = None) -> Tensor:
    """Mean over channels (and leading patch axes) of the per-channel NMI."""
    return dc.mean_reduce(nmi_per_channel(X_h, X, bins, bandwidth))


def reparameterize(head: LowRankHead) -> np.ndarray:
    """Fused inference matrix ``W = I - U D + Q U D`` (use as ``X @ W.T``)."""
    ud = head.U.value @ head.D.value
    return np.eye(head.channels) - ud + head.Q.value @ ud


@dataclass
class SplitOutputs:
    out: Tensor
    low: Tensor
    high: Tensor
    query: Tensor  # low part mapped through Q, the attention input


def split_forward(X, head: LowRankHead) -> SplitOutputs:
    low, high = lowrank_split(X, head)
    q = dc.matmul(low, dc.swapaxes(head.Q))
    return SplitOutputs(dc.add(high, q), low, high, q)


def aligned_forward(X, head: LowRankHead, mode: str = "train") -> Tensor:
    """Apply the head's trainable coordinate map.

    ``train`` goes through the explicit split; ``infer`` uses the fused
    matrix from :func:`reparameterize`.  Both agree to rounding.
    """
    if mode == "train":
        return split_forward(X, head).out
    if mode == "infer":
        X = dc.as_tensor(X)
        _check_channels(X, head)
        return dc.matmul(X, dc.constant(reparameterize(head).T))
    raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
