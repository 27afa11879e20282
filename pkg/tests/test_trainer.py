import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_kd.checks import tiny_encoder
from manifold_kd.dataset import CloudSet, SyntheticSpec, corrupted_view, generate
from manifold_kd.diffcore import Tensor
from manifold_kd.errors import BadGrid, BadProtocol, EmptyTestSet, LabelOutOfRange, NonFinite
from manifold_kd.geomcore import make_rng
from manifold_kd.model import DistillNet
from manifold_kd.netblocks import EncoderConfig, LevelConfig
from manifold_kd.trainer import (
    SWEEP_HEADER,
    TrainConfig,
    cross_entropy,
    evaluate_voting,
    fit,
    format_metrics,
    format_sweep,
    perturbation_sweep,
    shared_center_forward,
    trainable_parameters,
)

SPEC = SyntheticSpec(classes=("sphere", "cube"), points_per_cloud=64, train_per_class=4, test_per_class=3, seed=1)


def tiny_cfg(**kw):
    base = dict(epochs=2, batch_size=4, micro_batch=2, sample_m=3, align_patches=3, nmi_patches=2, nmi_bins=4,
                encoder=tiny_encoder(), eval_batch=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate(SPEC)


@pytest.fixture(scope="module")
def trained(data):
    return fit(data[0], None, tiny_cfg())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50.0, 50.0))
def test_cross_entropy_shift_invariant(seed, shift):
    z = make_rng(seed).normal(size=(5, 4))
    y = make_rng(seed, 1).integers(0, 4, size=5)
    a = cross_entropy(Tensor(z), y).item()
    b = cross_entropy(Tensor(z + shift), y).item()
    assert abs(a - b) < 1e-12 * max(1.0, abs(a))
    assert a >= 0.0


def test_cross_entropy_label_range():
    z = Tensor(np.zeros((2, 3)))
    assert np.isclose(cross_entropy(z, np.array([0, 2])).item(), np.log(3))
    with pytest.raises(LabelOutOfRange):
        cross_entropy(z, np.array([0, 3]))
    with pytest.raises(LabelOutOfRange):
        cross_entropy(z, np.array([-1, 0]))


def test_components_sum_to_total_every_step(trained):
    assert len(trained.steps) == 2 * 2
    for s in trained.steps:
        assert abs(s.loss_total - s.component_sum()) <= 1e-9


@pytest.mark.parametrize("mode", ["no_distill", "naive_align"])
def test_components_sum_other_modes(data, mode):
    res = fit(data[0], None, tiny_cfg(epochs=1, mode=mode))
    for s in res.steps:
        assert abs(s.loss_total - s.component_sum()) <= 1e-9
    if mode == "no_distill":
        assert all(s.loss_kl == 0 and s.ce_t == 0 and s.loss_nmi_t == 0 for s in res.steps)
        assert res.metrics[0].acc_teacher == 0.0


def test_metrics_csv_layout(trained):
    text = format_metrics(trained.metrics)
    lines = text.splitlines()
    assert lines[0] == "epoch,loss_total,loss_kl,loss_nmi_t,loss_nmi_s,ce_t,ce_s,acc_student,acc_teacher,wall_seconds"
    assert len(lines) == 3
    assert lines[1].startswith("1,") and lines[1].endswith(",0")


def test_fit_deterministic(data, trained):
    again = fit(data[0], None, tiny_cfg())
    assert format_metrics(again.metrics) == format_metrics(trained.metrics)
    a, b = trained.net.state_dict(), again.net.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_zero_learning_rate_keeps_parameters(data):
    net = DistillNet(tiny_encoder(), 2, make_rng(0, 0))
    before = {k: v.copy() for k, v in net.state_dict().items()}
    fit(data[0], None, tiny_cfg(epochs=1, learning_rate=0.0), net=net)
    after = net.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_no_distill_trains_only_student(data):
    net = DistillNet(tiny_encoder(), 2, make_rng(0, 0))
    before = net.state_dict()
    before = {k: v.copy() for k, v in before.items()}
    fit(data[0], None, tiny_cfg(epochs=1, mode="no_distill"), net=net)
    after = net.state_dict()
    changed = {k for k in before if not np.array_equal(before[k], after[k])}
    assert changed == set(trainable_parameters(net, "no_distill"))
    assert not any(k.startswith("teacher") or ".head." in k for k in changed)


def test_single_sample_memorised():
    one = CloudSet(generate(SPEC)[0].clouds[:1], SPEC.classes)
    cfg = tiny_cfg(epochs=200, batch_size=1, micro_batch=1, learning_rate=1e-2, mode="no_distill")
    res = fit(one, None, cfg)
    assert res.metrics[-1].ce_s < 0.01


def test_shared_centers_identical_across_branches(data):
    net = DistillNet(tiny_encoder(), 2, make_rng(0, 0))
    pts = data[0].stack([0, 5])
    out = shared_center_forward(pts, net, np.array([3, 7]))
    for geo in out.geos:
        assert geo.teacher_coords.shape[:2] == geo.center_idx.shape
    # both branches see the same number of per-level rows, taken at the same centers
    for s, t in zip(out.student.features, out.teacher.features):
        assert s.shape == t.shape


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_nonfinite_aborts_with_context(data):
    with pytest.raises(NonFinite, match=r"epoch 1 step \d"):
        fit(data[0], None, tiny_cfg(epochs=1, learning_rate=1e300))


def test_voting_single_pass_and_empty(data, trained):
    cfg = tiny_cfg(vote_count=1)
    res = evaluate_voting(trained.net, data[1], cfg, 4)
    assert res.logits.shape == (6, 2)
    assert len(res.per_class) == 2
    assert np.isclose(np.mean(res.per_class), res.accuracy)
    assert 0.0 <= res.accuracy <= 1.0
    with pytest.raises(EmptyTestSet):
        evaluate_voting(trained.net, CloudSet([], SPEC.classes), cfg, 0)


def test_voting_deterministic(data, trained):
    a = evaluate_voting(trained.net, data[1], tiny_cfg(), 9)
    b = evaluate_voting(trained.net, data[1], tiny_cfg(), 9)
    assert np.array_equal(a.logits, b.logits)


def test_teacher_logits_rotation_invariant(data, trained):
    cfg = tiny_cfg(vote_count=1)
    clean = evaluate_voting(trained.net, data[1], cfg, 2, branch="teacher")
    rot = evaluate_voting(trained.net, corrupted_view(data[1], "rotation", 180.0, 5), cfg, 2, branch="teacher")
    assert np.allclose(clean.logits, rot.logits, rtol=1e-6, atol=1e-8)


def test_sweep_rows_and_zero_level(data, trained):
    cfg = tiny_cfg()
    rows = perturbation_sweep(trained.net, data[1], "noise", [0.0, 0.05, 0.1], cfg, seed=3)
    assert [r.level for r in rows] == [0.0, 0.05, 0.1]
    clean = evaluate_voting(trained.net, data[1], cfg, 3).accuracy
    assert rows[0].accuracy == clean
    text = format_sweep(rows)
    assert text.splitlines()[0] == SWEEP_HEADER
    assert text == format_sweep(perturbation_sweep(trained.net, data[1], "noise", [0.0, 0.05, 0.1], cfg, seed=3))


@pytest.mark.parametrize("protocol,grid", [
    ("noise", []),
    ("noise", [0.0, float("nan")]),
    ("noise", [-0.1]),
    ("outlier", [1.5]),
])
def test_sweep_bad_grid(data, trained, protocol, grid):
    with pytest.raises(BadGrid):
        perturbation_sweep(trained.net, data[1], protocol, grid, tiny_cfg())


def test_sweep_bad_protocol(data, trained):
    with pytest.raises(BadProtocol):
        perturbation_sweep(trained.net, data[1], "shear", [0.0], tiny_cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="teacher_only").validate()
    with pytest.raises(ValueError):
        TrainConfig(temperature=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(vote_count=0).validate()


def test_larger_encoder_shapes(data):
    enc = EncoderConfig(levels=[LevelConfig(16, 4, 0.3, 8)], head_hidden=4)
    net = DistillNet(enc, 2, make_rng(1))
    out = shared_center_forward(data[0].stack([0]), net, np.array([0]))
    assert out.student.logits.shape == (1, 2) and out.teacher.logits.shape == (1, 2)
