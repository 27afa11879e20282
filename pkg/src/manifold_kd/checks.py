"""Finite-difference checks for every primitive and for the full training loss.

Inputs are drawn away from the kinks of the piecewise-smooth primitives
(relu at 0, ties in max) so central differences with step 1e-5 are valid.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .diffcore import GradCheckReport, Tensor, grad_check
from .geomcore import make_rng
from .netblocks import EncoderConfig, LevelConfig


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    """Values with well separated ties along every axis."""
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(0, 0.01, size=shape))


def _w(rng, shape):
    """Random weights for contracting an output to a scalar."""
    return dc.constant(rng.standard_normal(shape))


def _scalarize(out: Tensor, w: Tensor) -> Tensor:
    return dc.sum_reduce(dc.mul(out, w))


def primitive_cases(seed: int = 0) -> dict:
    """``name -> (fn, inputs)`` for every differentiable primitive."""
    rng = make_rng(seed, 7)
    T = lambda a: Tensor(np.asarray(a, dtype=np.float64))  # noqa: E731
    n = rng.standard_normal
    cases = {}

    def add_case(name, fn, *inputs):
        out = fn(*inputs)
        w = _w(rng, out.shape)
        cases[name] = (lambda *xs, fn=fn, w=w: _scalarize(fn(*xs), w), list(inputs))

    add_case("add", dc.add, T(n((3, 4))), T(n((3, 4))))
    add_case("sub", dc.sub, T(n((3, 4))), T(n((3, 4))))
    add_case("mul", dc.mul, T(n((3, 4))), T(n((3, 4))))
    add_case("div", dc.div, T(n((3, 4))), T(_away_from_zero(rng, (3, 4), 0.5)))
    add_case("scalar_mul", lambda x: dc.scalar_mul(x, -1.7), T(n((3, 4))))
    add_case("add_scalar", lambda x: dc.add_scalar(x, 0.3), T(n((3, 4))))
    add_case("matmul", dc.matmul, T(n((2, 3, 4))), T(n((4, 5))))
    add_case("matmul_batched", dc.matmul, T(n((2, 3, 4))), T(n((2, 4, 2))))
    add_case("bias_add", dc.bias_add, T(n((2, 3, 4))), T(n(4)))
    add_case("concat", lambda a, b: dc.concat([a, b], -1), T(n((2, 3))), T(n((2, 2))))
    add_case("relu", dc.relu, T(_away_from_zero(rng, (3, 5))))
    add_case("max_reduce", lambda x: dc.max_reduce(x, -2), T(_distinct(rng, (2, 4, 3))))
    add_case("sum_reduce", lambda x: dc.sum_reduce(x, 1), T(n((2, 3, 4))))
    add_case("mean_reduce", lambda x: dc.mean_reduce(x, 0), T(n((2, 3, 4))))
    add_case("softmax_rows", lambda x: dc.softmax_rows(x, 2.0), T(n((3, 5))))
    add_case("log_softmax_rows", lambda x: dc.log_softmax_rows(x, 0.5), T(n((3, 5))))
    add_case("log", dc.log, T(rng.uniform(0.5, 2.0, (3, 4))))
    add_case("exp", dc.exp, T(n((3, 4))))
    add_case("square", dc.square, T(n((3, 4))))
    add_case("sqrt", dc.sqrt, T(rng.uniform(0.5, 2.0, (3, 4))))
    add_case("xlogx", dc.xlogx, T(rng.uniform(0.1, 1.0, (3, 4))))
    add_case("soft_bins", lambda x: dc.soft_bins(x, np.linspace(0.05, 0.95, 6), 0.15),
             T(rng.uniform(0.0, 1.0, (3, 4))))
    gidx = rng.integers(0, 5, size=(2, 3, 4))
    add_case("gather", lambda x: dc.gather(x, gidx), T(n((2, 5, 3))))
    tidx = np.array([2, 0, 2, 1])
    add_case("take", lambda x: dc.take(x, tidx, 1), T(n((2, 3, 4))))
    add_case("reshape", lambda x: dc.reshape(x, (4, 3)), T(n((2, 6))))
    add_case("swapaxes", lambda x: dc.swapaxes(x, 0, 2), T(n((2, 3, 4))))
    add_case("expand", lambda x: dc.expand(x, 1, 3), T(n((2, 4))))
    add_case("layer_norm", dc.layer_norm, T(n((2, 3, 5))), T(n(5)), T(n(5)))
    add_case("softmax_kl_rows", lambda a, b: dc.softmax_kl_rows(a, b, 3.0), T(n((3, 5))), T(n((3, 5))))
    return cases


def run_primitive_suite(seed: int = 0, tol: float = 1e-4, step: float = 1e-5) -> dict[str, GradCheckReport]:
    return {name: grad_check(fn, inputs, tol, step) for name, (fn, inputs) in primitive_cases(seed).items()}


def tiny_encoder(use_norm: bool = False) -> EncoderConfig:
    """Two levels, k = 4, m = (16, 8), C = (8, 16).

    Layer norm is off by default: over 4-channel rows it makes the loss so
    curved at random init that step-1e-5 central differences carry
    truncation errors above 1e-4 even though the tape gradient is exact.
    """
    return EncoderConfig(levels=[LevelConfig(16, 4, 0.3, 8), LevelConfig(8, 4, 0.6, 16)],
                         n_radii=2, r_fraction=0.25, head_hidden=8, use_norm=use_norm)


def end_to_end_case(seed: int = 0, mode: str = "full", use_norm: bool = False):
    """``(loss_fn, params)`` for the whole training loss on two tiny clouds.

    Every parameter gets a random offset: zero-initialised biases and norm
    shifts would put rows with all-zero inputs exactly on a ReLU kink, and a
    zero ``U`` would leave the attention path without gradient.  Sampled
    rows and patches are fixed across evaluations.
    """
    from .dataset import SyntheticSpec, generate
    from .model import DistillNet
    from .netblocks import build_geometry
    from .trainer import TrainConfig, shared_center_forward, total_loss

    spec = SyntheticSpec(classes=("sphere", "cube"), points_per_cloud=32, train_per_class=1, test_per_class=0,
                         seed=seed)
    train, _ = generate(spec)
    pts = train.stack()
    labels = train.labels()
    enc = tiny_encoder(use_norm)
    cfg = TrainConfig(mode=mode, encoder=enc, sample_m=3, align_patches=3, nmi_patches=2, nmi_bins=4,
                      nmi_bandwidth=0.2)
    rng = make_rng(seed, 3)
    net = DistillNet(enc, 2, rng)
    for t in net.parameters().values():
        t.value = t.value + rng.normal(0.0, 0.1, size=t.shape)
    for head in net.s_heads + net.t_heads:
        head.U.value = rng.normal(0.0, 0.3, size=head.U.shape)
    starts = np.zeros(len(pts), dtype=np.int64)
    geos = build_geometry(pts, enc, starts, teacher=mode != "no_distill")
    params = list(net.parameters().values())

    def loss_fn(*_):
        out = shared_center_forward(pts, net, starts, mode != "no_distill", geos)
        total, _ = total_loss(out, labels, cfg, make_rng(seed, 4))
        return total

    return loss_fn, params


def run_end_to_end(seed: int = 0, tol: float = 1e-4, step: float = 1e-5, max_elems: int | None = 12,
                   mode: str = "full", use_norm: bool = False) -> GradCheckReport:
    fn, params = end_to_end_case(seed, mode, use_norm)
    return grad_check(fn, params, tol, step, max_elems=max_elems, seed=seed)
