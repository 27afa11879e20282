"""Flat ``key = value`` run configuration.

One file covers training, the encoder and synthetic data.  Lines are
``key = value``; ``#`` starts a comment; blank lines are ignored.  Lists are
comma separated.  Unknown or repeated keys are errors.  Per-level encoder
settings are parallel lists (``enc.m = 64,16`` and so on).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

from .dataset import SyntheticSpec
from .errors import ConfigError
from .netblocks import EncoderConfig, LevelConfig
from .trainer import TrainConfig


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _list(conv):
    def parse(s: str):
        items = [p.strip() for p in s.split(",") if p.strip()]
        if not items:
            raise ValueError("empty list")
        return [conv(p) for p in items]
    return parse


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)


_CONVERTERS = {int: int, float: float, bool: _bool, str: str}
_TRAIN_HELP = {
    "epochs": "training epochs",
    "batch_size": "clouds per optimizer step",
    "micro_batch": "clouds per forward/backward chunk (gradients accumulate)",
    "learning_rate": "Adam step size",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "adam_eps": "Adam denominator epsilon",
    "seed": "training seed (init, shuffling, sampling)",
    "temperature": "softmax temperature of the attention KL",
    "lambda1": "weight of KL(teacher || student)",
    "lambda2": "weight of KL(student || teacher)",
    "sample_m": "attention rows sampled per patch",
    "align_patches": "alignment patches per cloud and level",
    "nmi_patches": "alignment patches per cloud and level used for NMI",
    "nmi_bins": "soft-histogram bins",
    "nmi_bandwidth": "soft-histogram Gaussian width (0 = default for the bin count)",
    "mode": "full | no_distill | naive_align",
    "augment": "rotate training clouds randomly up to rotation_max_deg",
    "teacher_kl_grad": "let the KL term update the teacher branch",
    "vote_count": "evaluation passes averaged per prediction",
    "rotation_max_deg": "max angle for augmentation",
    "outlier_sigma": "displacement sigma of the outlier protocol",
    "eval_batch": "clouds per inference chunk",
    "log_wall_time": "record elapsed seconds in the metrics (breaks byte-identical reruns)",
    "cache_geometry": "build sampling geometry once per cloud",
}
_DATA_HELP = {
    "classes": "shape classes (sphere, cube, cylinder, torus, cone)",
    "points_per_cloud": "points per generated cloud",
    "train_per_class": "training clouds per class",
    "test_per_class": "test clouds per class",
    "jitter": "Gaussian jitter sigma before normalisation",
    "scale_min": "lower per-axis scale",
    "scale_max": "upper per-axis scale",
    "seed": "generation seed",
}


def _schema() -> dict:
    """``key -> (parse, default, help, setter)`` for every accepted key."""
    t0, d0 = TrainConfig(), SyntheticSpec()
    enc0 = t0.encoder
    sch = {}
    for f in fields(TrainConfig):
        if f.name == "encoder":
            continue
        typ = type(getattr(t0, f.name))
        sch[f.name] = (_CONVERTERS[typ], getattr(t0, f.name), _TRAIN_HELP[f.name], ("train", f.name))
    for name, attr in (("m", "m"), ("k", "k"), ("radius", "radius"), ("channels", "channels")):
        conv = float if attr == "radius" else int
        sch[f"enc.{name}"] = (_list(conv), [getattr(lv, attr) for lv in enc0.levels],
                              f"per-level {name}", ("levels", attr))
    for name, h in (("n_radii", "ball-query radii per level (multiples of the base radius)"),
                    ("r_fraction", "low-rank size as a fraction of channels"),
                    ("head_hidden", "classifier hidden width"),
                    ("use_norm", "layer norm inside the shared MLPs"),
                    ("align_k", "alignment patch size (0 = the level's k)")):
        v = getattr(enc0, name)
        sch[f"enc.{name}"] = (_CONVERTERS[type(v)], v, h, ("enc", name))
    for name, h in _DATA_HELP.items():
        if name == "classes":
            sch["data.classes"] = (_list(str), list(d0.classes), h, ("data", "classes"))
        elif name in ("scale_min", "scale_max"):
            v = d0.scale_range[0 if name == "scale_min" else 1]
            sch[f"data.{name}"] = (float, v, h, ("data", name))
        else:
            v = getattr(d0, name)
            sch[f"data.{name}"] = (_CONVERTERS[type(v)], v, h, ("data", name))
    return sch


SCHEMA = _schema()


def help_text() -> str:
    width = max(len(k) for k in SCHEMA)
    lines = ["config keys (key = default  description):"]
    for key, (_, default, h, _) in SCHEMA.items():
        lines.append(f"  {key.ljust(width)} = {_fmt(default):<22} {h}")
    return "\n".join(lines)


def parse_config(text: str, path=None) -> RunConfig:
    where = f"{path}: " if path else ""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{where}line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}line {lineno}: duplicate key {key!r}")
        try:
            values[key] = SCHEMA[key][0](val)
        except ValueError as exc:
            raise ConfigError(f"{where}line {lineno}: bad value for {key}: {exc}") from None
    return build_config(values, where)


def build_config(values: dict, where: str = "") -> RunConfig:
    merged = {k: v[1] for k, v in SCHEMA.items()}
    merged.update(values)
    train_kw, enc_kw, data_kw, levels = {}, {}, {}, {}
    for key, val in merged.items():
        group, name = SCHEMA[key][3]
        {"train": train_kw, "enc": enc_kw, "data": data_kw, "levels": levels}[group][name] = val
    n_lv = {len(v) for v in levels.values()}
    if len(n_lv) != 1:
        raise ConfigError(f"{where}enc.m, enc.k, enc.radius and enc.channels must have equal lengths")
    lvls = [LevelConfig(int(m), int(k), float(r), int(c))
            for m, k, r, c in zip(levels["m"], levels["k"], levels["radius"], levels["channels"])]
    enc = EncoderConfig(levels=lvls, **enc_kw)
    lo, hi = data_kw.pop("scale_min"), data_kw.pop("scale_max")
    data = SyntheticSpec(classes=tuple(data_kw.pop("classes")), scale_range=(lo, hi), **data_kw)
    train = TrainConfig(encoder=enc, **train_kw)
    try:
        train.validate()
        enc.validate(data.points_per_cloud)
        data.validate()
    except ValueError as exc:
        raise ConfigError(f"{where}{exc}") from None
    return RunConfig(train, data)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {os.fspath(path)}: {exc.strerror or exc}") from None
    return parse_config(text, os.fspath(path))


def format_config(run: RunConfig) -> str:
    """Every key with its current value, parseable by :func:`parse_config`."""
    t, d = run.train, run.data
    lines = []
    for key, (_, _, _, (group, name)) in SCHEMA.items():
        if group == "train":
            v = getattr(t, name)
        elif group == "levels":
            v = [getattr(lv, name) for lv in t.encoder.levels]
        elif group == "enc":
            v = getattr(t.encoder, name)
        elif name == "scale_min":
            v = d.scale_range[0]
        elif name == "scale_max":
            v = d.scale_range[1]
        else:
            v = getattr(d, name)
        lines.append(f"{key} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
