"""Loss assembly, the joint teacher-student training loop and evaluation.

Training modes:

* ``full``: both branches, attention-map KL plus NMI on the residuals.
* ``no_distill``: student alone with cross-entropy.
* ``naive_align``: both branches, the student's level features pulled toward
  the teacher's by a mean squared difference (no attention, no NMI).

The student always sees canonical poses unless ``augment`` is set, in which
case every training cloud gets a random rotation up to
``rotation_max_deg``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from . import diffcore as dc
from .align import kl_alignment_loss, nmi_loss
from .dataset import PROTOCOLS, corrupted_view
from .diffcore import Tape, Tensor
from .errors import BadGrid, BadProtocol, EmptyTestSet, LabelOutOfRange, NonFinite
from .geomcore import make_rng, rotation_matrix
from .model import BranchOutputs, DistillNet
from .netblocks import EncoderConfig, LevelGeometry, build_geometry

log = logging.getLogger(__name__)

MODES = ("full", "no_distill", "naive_align")
METRICS_HEADER = "epoch,loss_total,loss_kl,loss_nmi_t,loss_nmi_s,ce_t,ce_s,acc_student,acc_teacher,wall_seconds"
SWEEP_HEADER = "protocol,level,accuracy,seed"
DEFAULT_GRIDS = {
    "rotation": [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
    "noise": [0.0, 0.02, 0.04, 0.06, 0.08, 0.1],
    "outlier": [round(0.01 * i, 2) for i in range(11)],
}


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 32
    micro_batch: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    temperature: float = 4.0
    lambda1: float = 0.5
    lambda2: float = 0.5
    sample_m: int = 8
    align_patches: int = 16  # patches per cloud and level fed to the KL / NMI terms
    nmi_patches: int = 4  # leading subset of the alignment patches used by the NMI terms
    nmi_bins: int = 16
    nmi_bandwidth: float = 0.0  # 0 selects the default for the bin count
    mode: str = "full"
    augment: bool = False
    teacher_kl_grad: bool = True
    vote_count: int = 3
    rotation_max_deg: float = 30.0
    outlier_sigma: float = 0.1
    eval_batch: int = 64
    log_wall_time: bool = False
    cache_geometry: bool = True  # fixed per-cloud FPS start, geometry built once (ignored with augment)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ValueError("batch_size and micro_batch must be >= 1")
        if self.vote_count < 1:
            raise ValueError("vote_count must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.align_patches < 1 or self.sample_m < 1 or self.nmi_patches < 1:
            raise ValueError("align_patches, nmi_patches and sample_m must be >= 1")

    @property
    def bandwidth(self) -> float | None:
        return self.nmi_bandwidth or None


@dataclass
class MetricsRecord:
    epoch: int
    loss_total: float
    loss_kl: float
    loss_nmi_t: float
    loss_nmi_s: float
    ce_t: float
    ce_s: float
    acc_student: float
    acc_teacher: float
    wall_seconds: float

    def csv_row(self) -> str:
        vals = [str(self.epoch)] + [f"{getattr(self, f.name):.9g}" for f in fields(self)[1:]]
        return ",".join(vals)


COMPONENTS = ("loss_kl", "loss_nmi_t", "loss_nmi_s", "ce_t", "ce_s")


@dataclass
class StepRecord:
    epoch: int
    step: int
    loss_total: float
    loss_kl: float
    loss_nmi_t: float
    loss_nmi_s: float
    ce_t: float
    ce_s: float

    def component_sum(self) -> float:
        return sum(getattr(self, c) for c in COMPONENTS)


@dataclass
class PairedOutputs:
    geos: list
    student: BranchOutputs
    teacher: BranchOutputs | None


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class under softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"need {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelOutOfRange(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = dc.mul(dc.log_softmax_rows(logits), dc.constant(onehot))
    return dc.scalar_mul(dc.sum_reduce(picked), -1.0 / b)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels)) if len(labels) else 0.0


def shared_center_forward(points: np.ndarray, net: DistillNet, starts: np.ndarray,
                          with_teacher: bool = True, geos: list | None = None) -> PairedOutputs:
    """Run both branches on one set of centers and patches.

    FPS centers, ball queries and teacher neighbourhoods are computed once
    per level from the input coordinates; the student and the teacher both
    consume them, so level-``l`` patch ``j`` is the same center in both.
    """
    if geos is None:
        geos = build_geometry(points, net.cfg, starts, teacher=with_teacher)
    student = net.forward_student(points, geos, "train")
    teacher = net.forward_teacher(geos, "train") if with_teacher else None
    return PairedOutputs(geos, student, teacher)


def _choose_patches(rng: np.random.Generator, b: int, m: int, p: int) -> np.ndarray:
    p = min(p, m)
    return np.argsort(rng.random((b, m)), axis=-1, kind="stable")[:, :p]


def total_loss(out: PairedOutputs, labels: np.ndarray, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[Tensor, dict[str, Tensor]]:
    """Sum of the five loss components (absent ones are exact zeros).

    KL and NMI terms are averaged over levels; the KL and NMI terms use the
    same randomly chosen alignment patches per level.
    """
    zero = dc.constant(0.0)
    parts = {"ce_s": cross_entropy(out.student.logits, labels)}
    if out.teacher is None or cfg.mode == "no_distill":
        parts.update(loss_kl=zero, loss_nmi_t=zero, loss_nmi_s=zero, ce_t=zero)
    else:
        parts["ce_t"] = cross_entropy(out.teacher.logits, labels)
        n_lv = len(out.geos)
        if cfg.mode == "naive_align":
            terms = [dc.mean_reduce(dc.square(dc.sub(s, t)))
                     for s, t in zip(out.student.features, out.teacher.features)]
            parts["loss_kl"] = dc.scalar_mul(_sum(terms), 1.0 / n_lv)
            parts["loss_nmi_t"] = parts["loss_nmi_s"] = zero
        else:
            kl, nt, ns = [], [], []
            for li, geo in enumerate(out.geos):
                b, m, ka = geo.align_idx.shape
                sel = _choose_patches(rng, b, m, cfg.align_patches)
                pidx = np.take_along_axis(geo.align_idx, sel[..., None], axis=1)  # (B, P, ka)
                s_lv, t_lv = out.student.levels[li], out.teacher.levels[li]
                ys = dc.gather(s_lv.query, pidx)
                yt = dc.gather(t_lv.query, pidx)
                if not cfg.teacher_kl_grad:
                    yt = dc.constant(yt.value)
                a_s = dc.matmul(ys, dc.swapaxes(ys))
                a_t = dc.matmul(yt, dc.swapaxes(yt))
                c = s_lv.query.shape[-1]
                kl.append(kl_alignment_loss(a_t, a_s, cfg.temperature, cfg.lambda1, cfg.lambda2,
                                            min(cfg.sample_m, ka), rng, channels=c))
                nidx = pidx[:, :cfg.nmi_patches]
                nt.append(nmi_loss(dc.gather(t_lv.high, nidx), dc.gather(out.teacher.features[li], nidx),
                                   cfg.nmi_bins, cfg.bandwidth))
                ns.append(nmi_loss(dc.gather(s_lv.high, nidx), dc.gather(out.student.features[li], nidx),
                                   cfg.nmi_bins, cfg.bandwidth))
            parts["loss_kl"] = dc.scalar_mul(_sum(kl), 1.0 / n_lv)
            parts["loss_nmi_t"] = dc.scalar_mul(_sum(nt), 1.0 / n_lv)
            parts["loss_nmi_s"] = dc.scalar_mul(_sum(ns), 1.0 / n_lv)
    total = _sum([parts[c] for c in COMPONENTS])
    return total, parts


def _sum(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for t in terms[1:]:
        acc = dc.add(acc, t)
    return acc


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def trainable_parameters(net: DistillNet, mode: str) -> dict[str, Tensor]:
    if mode == "no_distill":
        return net.student_parameters()
    if mode == "naive_align":
        p = net.student_parameters()
        p.update(net.teacher_parameters())
        return p
    return net.parameters()


def index_geometry(geos: list[LevelGeometry], sel) -> list[LevelGeometry]:
    """Select clouds (a slice or an index array) from batched geometry."""
    def cut(a):
        return None if a is None else a[sel]

    return [LevelGeometry(cut(g.center_idx), cut(g.centers), [b[sel] for b in g.ball_idx], cut(g.teacher_idx),
                          cut(g.teacher_coords), cut(g.teacher_flag), cut(g.align_idx)) for g in geos]


def concat_geometry(parts: list[list[LevelGeometry]]) -> list[LevelGeometry]:
    def cat(arrs):
        return None if arrs[0] is None else np.concatenate(arrs)

    out = []
    for lv in zip(*parts):
        out.append(LevelGeometry(
            cat([g.center_idx for g in lv]), cat([g.centers for g in lv]),
            [np.concatenate(bs) for bs in zip(*[g.ball_idx for g in lv])],
            cat([g.teacher_idx for g in lv]), cat([g.teacher_coords for g in lv]),
            cat([g.teacher_flag for g in lv]), cat([g.align_idx for g in lv])))
    return out


def batched_geometry(points: np.ndarray, cfg: EncoderConfig, starts: np.ndarray, teacher: bool = True,
                     chunk: int = 64) -> list[LevelGeometry]:
    return concat_geometry([build_geometry(points[lo:lo + chunk], cfg, starts[lo:lo + chunk], teacher)
                            for lo in range(0, points.shape[0], chunk)])


def _rotate_batch(points: np.ndarray, max_deg: float, rng: np.random.Generator) -> np.ndarray:
    out = np.empty_like(points)
    for i in range(points.shape[0]):
        axis = rng.standard_normal(3)
        angle = np.radians(rng.uniform(0.0, max_deg))
        out[i] = points[i] @ rotation_matrix(axis, angle).T
    return out


@dataclass
class FitResult:
    net: DistillNet
    metrics: list
    steps: list


def fit(train_set, val_set, cfg: TrainConfig, net: DistillNet | None = None,
        on_epoch: Callable[[MetricsRecord], None] | None = None) -> FitResult:
    """Train jointly with Adam; one :class:`MetricsRecord` per epoch.

    ``train_set`` needs ``stack()``, ``labels()`` and ``n_classes``.  When
    ``val_set`` is given the student's voting accuracy on it is logged after
    each epoch (not recorded in the metrics).
    """
    cfg.validate()
    points_all = train_set.stack()
    labels_all = train_set.labels()
    n, n_pts = points_all.shape[:2]
    cfg.encoder.validate(n_pts)
    if net is None:
        net = DistillNet(cfg.encoder, train_set.n_classes, make_rng(cfg.seed, 0))
    rng = make_rng(cfg.seed, 1)
    opt = Adam(trainable_parameters(net, cfg.mode), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    with_teacher = cfg.mode != "no_distill"
    cached = None
    if cfg.cache_geometry and not cfg.augment:
        fixed_starts = make_rng(cfg.seed, 2).integers(n_pts, size=n)
        cached = batched_geometry(points_all, cfg.encoder, fixed_starts, with_teacher)
    metrics, steps = [], []
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        sums = dict.fromkeys(("loss_total",) + COMPONENTS, 0.0)
        correct_s = correct_t = 0
        for step, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = order[lo:lo + cfg.batch_size]
            b = len(idx)
            pts = points_all[idx]
            if cfg.augment:
                pts = _rotate_batch(pts, cfg.rotation_max_deg, rng)
            labels = labels_all[idx]
            if cached is None:
                starts = rng.integers(n_pts, size=b)
                geos = build_geometry(pts, cfg.encoder, starts, teacher=with_teacher)
            else:
                starts = fixed_starts[idx]
                geos = index_geometry(cached, idx)
            opt.zero_grad()
            rec = dict.fromkeys(("loss_total",) + COMPONENTS, 0.0)
            try:
                for mlo in range(0, b, cfg.micro_batch):
                    sl = slice(mlo, mlo + cfg.micro_batch)
                    w = (min(b, mlo + cfg.micro_batch) - mlo) / b
                    with Tape() as tape:
                        out = shared_center_forward(pts[sl], net, starts[sl], with_teacher, index_geometry(geos, sl))
                        total, parts = total_loss(out, labels[sl], cfg, rng)
                        tape.backward(dc.scalar_mul(total, w))
                    rec["loss_total"] += w * total.item()
                    for c in COMPONENTS:
                        rec[c] += w * parts[c].item()
                    correct_s += int(np.sum(np.argmax(out.student.logits.value, -1) == labels[sl]))
                    if out.teacher is not None:
                        correct_t += int(np.sum(np.argmax(out.teacher.logits.value, -1) == labels[sl]))
                opt.step()
            except NonFinite as exc:
                raise NonFinite(f"epoch {epoch} step {step}: {exc}") from exc
            bad = [k for k, p in opt.params.items() if not np.all(np.isfinite(p.value))]
            if bad:
                raise NonFinite(f"epoch {epoch} step {step}: non-finite parameters {bad[:3]}")
            steps.append(StepRecord(epoch, step, **rec))
            for k in sums:
                sums[k] += rec[k] * b
        wall = time.perf_counter() - t0 if cfg.log_wall_time else 0.0
        mr = MetricsRecord(epoch, *(sums[k] / n for k in ("loss_total",) + COMPONENTS),
                           correct_s / n, correct_t / n if with_teacher else 0.0, wall)
        metrics.append(mr)
        log.info("epoch %d loss %.4f acc_s %.3f acc_t %.3f", epoch, mr.loss_total, mr.acc_student, mr.acc_teacher)
        if val_set is not None and len(val_set):
            log.info("epoch %d val acc %.4f", epoch, evaluate_voting(net, val_set, cfg, cfg.seed).accuracy)
        if on_epoch is not None:
            on_epoch(mr)
    return FitResult(net, metrics, steps)


@dataclass
class EvalResult:
    accuracy: float
    per_class: list
    logits: np.ndarray


def predict_logits(net: DistillNet, points: np.ndarray, starts: np.ndarray, branch: str = "student",
                   chunk: int = 64) -> np.ndarray:
    """Inference-mode logits (fused heads), no tape."""
    out = []
    for lo in range(0, points.shape[0], chunk):
        p, s = points[lo:lo + chunk], starts[lo:lo + chunk]
        geos = build_geometry(p, net.cfg, s, teacher=branch == "teacher")
        if branch == "student":
            out.append(net.forward_student(p, geos, "infer").logits.value)
        else:
            out.append(net.forward_teacher(geos, "infer").logits.value)
    return np.concatenate(out)


def evaluate_voting(net: DistillNet, test_set, cfg: TrainConfig, base_seed: int,
                    branch: str = "student") -> EvalResult:
    """Average logits over ``vote_count`` passes; pass ``i`` seeds FPS with ``base_seed + i``."""
    if len(test_set) == 0:
        raise EmptyTestSet("test set is empty")
    points = test_set.stack()
    labels = test_set.labels()
    acc = np.zeros((len(labels), net.n_classes))
    for i in range(cfg.vote_count):
        starts = make_rng(base_seed + i).integers(points.shape[1], size=len(labels))
        acc += predict_logits(net, points, starts, branch, cfg.eval_batch)
    logits = acc / cfg.vote_count
    pred = np.argmax(logits, axis=-1)
    per_class = []
    for c in range(net.n_classes):
        sel = labels == c
        per_class.append(float(np.mean(pred[sel] == c)) if sel.any() else float("nan"))
    return EvalResult(float(np.mean(pred == labels)), per_class, logits)


@dataclass
class SweepRow:
    protocol: str
    level: float
    accuracy: float
    seed: int

    def csv_row(self) -> str:
        return f"{self.protocol},{self.level:.9g},{self.accuracy:.9g},{self.seed}"


def perturbation_sweep(net: DistillNet, test_set, protocol: str, grid=None, cfg: TrainConfig | None = None,
                       seed: int = 0) -> list[SweepRow]:
    """Voting accuracy at each corruption level, corruption seeded by ``seed``."""
    if protocol not in PROTOCOLS:
        raise BadProtocol(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    cfg = cfg or TrainConfig()
    grid = DEFAULT_GRIDS[protocol] if grid is None else list(grid)
    if not grid:
        raise BadGrid("empty grid")
    hi = 180.0 if protocol == "rotation" else (1.0 if protocol == "outlier" else np.inf)
    for g in grid:
        if not (np.isfinite(g) and 0 <= g <= hi):
            raise BadGrid(f"grid level {g} outside [0, {hi}] for {protocol}")
    rows = []
    for level in grid:
        view = corrupted_view(test_set, protocol, level, seed, cfg.outlier_sigma)
        rows.append(SweepRow(protocol, float(level), evaluate_voting(net, view, cfg, seed).accuracy, seed))
    return rows


def format_metrics(records: list[MetricsRecord]) -> str:
    return "\n".join([METRICS_HEADER] + [r.csv_row() for r in records]) + "\n"


def format_sweep(rows: list[SweepRow]) -> str:
    return "\n".join([SWEEP_HEADER] + [r.csv_row() for r in rows]) + "\n"


def write_text(path, text: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)
