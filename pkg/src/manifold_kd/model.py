"""The teacher-student network: two hierarchical encoders plus alignment heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .align import LowRankHead, SplitOutputs, aligned_forward, split_forward
from .diffcore import Tensor
from .errors import SchemaMismatch
from .netblocks import (
    MLP,
    TEACHER_IN,
    EncoderConfig,
    FeatureMap,
    LevelGeometry,
    Linear,
    classify_head,
    global_feature,
    student_level,
    teacher_level,
)


@dataclass
class BranchOutputs:
    logits: Tensor
    levels: list  # SplitOutputs per level (train) or raw level Tensors (infer)
    features: list  # encoder output before the head, per level


class DistillNet:
    def __init__(self, cfg: EncoderConfig, n_classes: int, rng: np.random.Generator, in_channels: int = 3):
        self.cfg = cfg
        self.n_classes = n_classes
        norm = cfg.use_norm
        self.s_sf, self.s_gsm, self.t_mlp = [], [], []
        self.s_heads, self.t_heads = [], []
        prev_s, prev_t = in_channels, 0
        for i, lv in enumerate(cfg.levels):
            c = lv.channels
            c_sf = c // 2
            per_r = c // cfg.n_radii
            self.s_sf.append(MLP(f"student.l{i}.sf", [2 * prev_s, c_sf, c_sf], rng, norm))
            self.s_gsm.append([MLP(f"student.l{i}.gsm{j}", [6 + c_sf, per_r, per_r], rng, norm)
                               for j in range(cfg.n_radii)])
            self.t_mlp.append(MLP(f"teacher.l{i}", [TEACHER_IN + prev_t, c // 2, c], rng, norm))
            r = cfg.rank(i)
            self.s_heads.append(LowRankHead.init(c, r, rng))
            self.t_heads.append(LowRankHead.init(c, r, rng))
            prev_s = prev_t = c
        self.s_hidden = Linear("student.cls.hidden", prev_s, cfg.head_hidden, rng)
        self.s_out = Linear("student.cls.out", cfg.head_hidden, n_classes, rng)
        self.t_hidden = Linear("teacher.cls.hidden", prev_t, cfg.head_hidden, rng)
        self.t_out = Linear("teacher.cls.out", cfg.head_hidden, n_classes, rng)

    # parameter bookkeeping -------------------------------------------------
    def student_parameters(self) -> dict[str, Tensor]:
        p = {}
        for i in range(len(self.cfg.levels)):
            p.update(self.s_sf[i].parameters())
            for mlp in self.s_gsm[i]:
                p.update(mlp.parameters())
        p.update(self.s_hidden.parameters())
        p.update(self.s_out.parameters())
        return p

    def teacher_parameters(self) -> dict[str, Tensor]:
        p = {}
        for mlp in self.t_mlp:
            p.update(mlp.parameters())
        p.update(self.t_hidden.parameters())
        p.update(self.t_out.parameters())
        return p

    def head_parameters(self, branch: str) -> dict[str, Tensor]:
        heads = self.s_heads if branch == "student" else self.t_heads
        return {f"{branch}.l{i}.head.{k}": v for i, h in enumerate(heads) for k, v in h.parameters().items()}

    def parameters(self) -> dict[str, Tensor]:
        p = self.student_parameters()
        p.update(self.head_parameters("student"))
        p.update(self.teacher_parameters())
        p.update(self.head_parameters("teacher"))
        return p

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))[:3]
            extra = sorted(set(state) - set(params))[:3]
            raise SchemaMismatch(f"checkpoint tensors differ from the model (missing {missing}, unexpected {extra})")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise SchemaMismatch(f"{name}: checkpoint shape {arr.shape}, model shape {t.shape}")
            t.value = arr.copy()

    # forward passes --------------------------------------------------------
    def forward_student(self, points: np.ndarray, geos: list[LevelGeometry], mode: str = "train") -> BranchOutputs:
        fm = FeatureMap(-1, points, dc.constant(points))
        levels, raw = [], []
        for i, (lv, geo) in enumerate(zip(self.cfg.levels, geos)):
            fm = student_level(fm, geo, self.s_sf[i], self.s_gsm[i], lv.k, i)
            raw.append(fm.features)
            if mode == "train":
                sp = split_forward(fm.features, self.s_heads[i])
                levels.append(sp)
                fm = FeatureMap(i, fm.centers, sp.out)
            else:
                out = aligned_forward(fm.features, self.s_heads[i], "infer")
                levels.append(out)
                fm = FeatureMap(i, fm.centers, out)
        logits = classify_head(global_feature(fm), self.s_hidden, self.s_out)
        return BranchOutputs(logits, levels, raw)

    def forward_teacher(self, geos: list[LevelGeometry], mode: str = "train") -> BranchOutputs:
        prev = None
        levels, raw = [], []
        fm = None
        for i, geo in enumerate(geos):
            fm = teacher_level(prev, geo, self.t_mlp[i], i)
            raw.append(fm.features)
            if mode == "train":
                sp = split_forward(fm.features, self.t_heads[i])
                levels.append(sp)
                prev = sp.out
            else:
                prev = aligned_forward(fm.features, self.t_heads[i], "infer")
                levels.append(prev)
        logits = classify_head(dc.max_reduce(prev, axis=-2), self.t_hidden, self.t_out)
        return BranchOutputs(logits, levels, raw)


def split_outputs(levels) -> list[SplitOutputs]:
    return [lv for lv in levels if isinstance(lv, SplitOutputs)]
