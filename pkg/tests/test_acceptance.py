"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The training criteria (5, 6, 7, 10) share three runs on the 4-class synthetic
benchmark: no distillation, the full pipeline and naive feature alignment.
They are trained once per session by the ``runs`` fixture.
"""

import time

import numpy as np
import pytest

from manifold_kd import diffcore as dc
from manifold_kd.align import LowRankHead, aligned_forward, kl_alignment_loss, nmi_per_channel, rank_for
from manifold_kd.checks import run_end_to_end, run_primitive_suite
from manifold_kd.cli import main
from manifold_kd.dataset import SHAPES, SyntheticSpec, corrupted_view, generate
from manifold_kd.diffcore import Tape, Tensor
from manifold_kd.geomcore import Patch, knn, make_rng, random_rotation
from manifold_kd.model import DistillNet
from manifold_kd.netblocks import MLP, EncoderConfig, LevelConfig, build_geometry, gsm_block, pointnet_map
from manifold_kd.teacherfeat import invariant_coords
from manifold_kd.trainer import TrainConfig, evaluate_voting, fit, format_sweep, perturbation_sweep

BENCH = SyntheticSpec(classes=("sphere", "cube", "cylinder", "torus"), points_per_cloud=256, train_per_class=200,
                      test_per_class=100, seed=0)
DESK_ENCODER = EncoderConfig(levels=[LevelConfig(64, 12, 0.2, 32), LevelConfig(16, 8, 0.4, 64)], head_hidden=64)
DESK_EPOCHS = 30
# a wider NMI kernel than the estimator default: alignment patches hold about 12 samples
DESK_NMI_BANDWIDTH = 0.015
ROTATE_DEG = 30.0
EVAL_SEED = 0


def desk_config(mode: str) -> TrainConfig:
    return TrainConfig(epochs=DESK_EPOCHS, mode=mode, encoder=DESK_ENCODER, micro_batch=32, align_patches=8,
                       nmi_patches=2, nmi_bandwidth=DESK_NMI_BANDWIDTH, seed=0)


# 1 -------------------------------------------------------------------------
def test_criterion_01_teacher_rotation_invariance(report):
    t0 = time.perf_counter()
    spec = SyntheticSpec(classes=SHAPES, points_per_cloud=256, train_per_class=4, test_per_class=1, seed=3)
    clouds = generate(spec)[0].clouds
    rng = make_rng(101)
    worst, skipped = 0.0, 0
    for _ in range(100):
        pts = clouds[int(rng.integers(len(clouds)))].points
        c = int(rng.integers(len(pts)))
        nb = knn(pts, pts[c], 17)[0][1:]
        patch = Patch(c, tuple(int(i) for i in nb))
        base = invariant_coords(pts, patch)
        for _ in range(20):
            r = random_rotation(180.0, rng).rotation
            rot = invariant_coords(pts @ r.T, patch)
            if base.degenerate_flag or rot.degenerate_flag:
                skipped += 1
                continue
            worst = max(worst, float(np.max(np.abs(base.values - rot.values))))

    # end to end: teacher global feature at identical FPS starts
    net = DistillNet(DESK_ENCODER, 4, make_rng(7))
    pts = np.stack([c.points for c in clouds[:10]])
    starts = make_rng(8).integers(256, size=10)

    def global_teacher(p):
        geos = build_geometry(p, DESK_ENCODER, starts)
        return net.forward_teacher(geos, "infer").levels[-1].value.max(axis=-2)

    g0 = global_teacher(pts)
    rel = 0.0
    for _ in range(20):
        r = random_rotation(180.0, rng).rotation
        g = global_teacher(pts @ r.T)
        rel = max(rel, float(np.max(np.linalg.norm(g - g0, axis=-1) / np.linalg.norm(g0, axis=-1))))
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and rel < 1e-3 and secs < 30 and skipped < 2000
    report(1, "teacher rotation invariance", ok,
           f"max coord change {worst:.2e} ({skipped}/2000 flagged pairs skipped), "
           f"global feature rel change {rel:.2e}, {secs:.1f}s")
    assert ok


# 2 -------------------------------------------------------------------------
def test_criterion_02_reparameterization_exact(report):
    t0 = time.perf_counter()
    rng = make_rng(202)
    worst = 0.0
    for i in range(1000):
        c = (8, 32, 64)[i % 3]
        r = rank_for(c)
        head = LowRankHead(Tensor(rng.normal(size=(r, c))), Tensor(rng.normal(size=(c, r))),
                           Tensor(rng.normal(size=(c, c))))
        x = rng.normal(size=(16, c))
        a = aligned_forward(x, head, "train").value
        b = aligned_forward(x, head, "infer").value
        worst = max(worst, float(np.max(np.abs(a - b)) / np.max(np.abs(a))))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-12 and secs < 10
    report(2, "reparameterization exactness", ok, f"max relative difference {worst:.2e}, {secs:.1f}s")
    assert ok


# 3 -------------------------------------------------------------------------
def test_criterion_03_gradient_oracle(report):
    t0 = time.perf_counter()
    reports = run_primitive_suite(seed=0, tol=1e-4, step=1e-5)
    prim = max(r.max_rel_error for r in reports.values())
    bad = [k for k, r in reports.items() if not r.passed]
    e2e = run_end_to_end(seed=0, tol=1e-4, step=1e-5, max_elems=None)
    secs = time.perf_counter() - t0
    ok = not bad and e2e.passed and secs < 120
    report(3, "gradient oracle", ok,
           f"{len(reports)} primitives max rel error {prim:.2e}{' failing ' + ','.join(bad) if bad else ''}, "
           f"end-to-end {e2e.max_rel_error:.2e}, {secs:.1f}s")
    assert ok


# 4 -------------------------------------------------------------------------
def test_criterion_04_permutation_invariance(report):
    t0 = time.perf_counter()
    spec = SyntheticSpec(classes=SHAPES, points_per_cloud=256, train_per_class=2, test_per_class=1, seed=4)
    clouds = generate(spec)[0].clouds
    rng = make_rng(404)
    mlp = MLP("pn", [8, 32, 32], rng)
    gsm_mlps = [MLP(f"g{j}", [6 + 4, 16, 16], rng) for j in range(2)]
    pn_diff = gsm_diff = coord_mismatch = 0
    for _ in range(100):
        pts = clouds[int(rng.integers(len(clouds)))].points
        c = int(rng.integers(len(pts)))
        nb = knn(pts, pts[c], 17)[0][1:]
        perm = rng.permutation(16)

        rows = rng.normal(size=(1, 1, 16, 8))
        pn_diff += int(not np.array_equal(pointnet_map(rows, mlp).value, pointnet_map(rows[:, :, perm], mlp).value))

        feats = dc.constant(rng.normal(size=(1, 256, 4)))
        idx = [nb[None, None, :], knn(pts, pts[c], 16)[0][None, None, :]]
        base = gsm_block(pts[None, c:c + 1], pts[None], feats, idx, gsm_mlps).value
        shuf = gsm_block(pts[None, c:c + 1], pts[None], feats, [i[..., perm] for i in idx], gsm_mlps).value
        gsm_diff += int(not np.array_equal(base, shuf))

        a = invariant_coords(pts, Patch(c, tuple(int(i) for i in nb)))
        b = invariant_coords(pts, Patch(c, tuple(int(nb[i]) for i in perm)))
        coord_mismatch += int(not np.array_equal(a.values, b.values))
    secs = time.perf_counter() - t0
    ok = pn_diff == 0 and gsm_diff == 0 and coord_mismatch == 0 and secs < 30
    report(4, "permutation invariance", ok,
           f"non-identical outputs: pointnet {pn_diff}, gsm {gsm_diff}, teacher coords {coord_mismatch} "
           f"of 100, {secs:.1f}s")
    assert ok


# shared training runs for 5, 6, 7, 10 --------------------------------------
@pytest.fixture(scope="module")
def bench():
    return generate(BENCH)


@pytest.fixture(scope="module")
def runs(bench):
    train, test = bench
    rotated = corrupted_view(test, "rotation", ROTATE_DEG, EVAL_SEED)
    out = {}
    for mode in ("no_distill", "full", "naive_align"):
        cfg = desk_config(mode)
        t0 = time.perf_counter()
        res = fit(train, None, cfg)
        train_s = time.perf_counter() - t0
        clean = evaluate_voting(res.net, test, cfg, EVAL_SEED).accuracy
        rot = evaluate_voting(res.net, rotated, cfg, EVAL_SEED).accuracy
        out[mode] = dict(result=res, cfg=cfg, clean=clean, rot=rot, seconds=time.perf_counter() - t0,
                         train_seconds=train_s)
        print(f"{mode}: clean {clean:.4f} rotated {rot:.4f} ({out[mode]['seconds']:.0f}s)")
    return out


@pytest.mark.slow
def test_criterion_05_distillation_benefit(runs, report):
    nd, full = runs["no_distill"], runs["full"]
    drop_nd, drop_full = nd["clean"] - nd["rot"], full["clean"] - full["rot"]
    secs = nd["seconds"] + full["seconds"]
    ok = drop_full <= 0.5 * drop_nd and full["rot"] > nd["rot"] and secs < 30 * 60
    report(5, "distillation benefit", ok,
           f"no-distill clean {nd['clean']:.4f} rot {nd['rot']:.4f} drop {drop_nd:.4f}; "
           f"full clean {full['clean']:.4f} rot {full['rot']:.4f} drop {drop_full:.4f} "
           f"(needs drop <= {0.5 * drop_nd:.4f} and rot > {nd['rot']:.4f}); {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_06_ablation_direction(runs, report):
    naive, nd, full = runs["naive_align"]["rot"], runs["no_distill"]["rot"], runs["full"]["rot"]
    band = 0.01
    secs = sum(r["seconds"] for r in runs.values())
    ok = naive <= nd + band and nd <= full + band and full - naive >= 0.03 and secs < 45 * 60
    report(6, "ablation direction", ok,
           f"rotated accuracy naive {naive:.4f} <= no-distill {nd:.4f} <= full {full:.4f} (1-point band), "
           f"full - naive {full - naive:+.4f} (needs >= 0.03); {secs / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_07_loss_bookkeeping(runs, report):
    worst, n = 0.0, 0
    for r in runs.values():
        for s in r["result"].steps:
            worst = max(worst, abs(s.loss_total - s.component_sum()))
            n += 1
    ok = worst <= 1e-9 and n > 0
    report(7, "loss bookkeeping", ok, f"{n} steps across three arms, max |total - sum| {worst:.2e}")
    assert ok


# 8 -------------------------------------------------------------------------
def test_criterion_08_kl_contract(report):
    rng = make_rng(808)
    a = rng.normal(size=(4, 8, 8))
    t, s = Tensor(a, True), Tensor(a.copy(), True)
    with Tape() as tape:
        loss = kl_alignment_loss(t, s, 4.0, 0.5, 0.5, 8, make_rng(1), channels=32)
    tape.backward(loss)
    zero_ok = loss.item() == 0.0 and not np.any(t.grad) and not np.any(s.grad)
    worst = np.inf
    for i in range(10_000):
        k = int(rng.integers(2, 9))
        scale = float(rng.choice([0.1, 1.0, 10.0]))
        x, y = rng.normal(scale=scale, size=(2, 1, k, k))
        lam = float(rng.uniform())
        val = kl_alignment_loss(x, y, float(rng.uniform(0.5, 8.0)), lam, 1.0 - lam, int(rng.integers(1, k + 1)),
                                rng, channels=int(rng.integers(1, 65))).item()
        worst = min(worst, val)
    ok = zero_ok and worst >= 0.0
    report(8, "KL loss contract", ok,
           f"identical maps loss {loss.item()} with zero gradients: {zero_ok}; min loss over 10^4 pairs {worst:.3e}")
    assert ok


# 9 -------------------------------------------------------------------------
def _hard_nmi(a, b, bins=16):
    def q(v):
        u = (v - v.min()) / (v.max() - v.min())
        return np.minimum((u * bins).astype(int), bins - 1)

    joint = np.zeros((bins, bins))
    np.add.at(joint, (q(a), q(b)), 1.0)
    joint /= joint.sum()

    def h(p):
        p = p[p > 0]
        return -np.sum(p * np.log(p))

    ha, hb = h(joint.sum(1)), h(joint.sum(0))
    return (ha + hb - h(joint.ravel())) / np.sqrt(ha * hb)


def test_criterion_09_nmi_estimator(report):
    t0 = time.perf_counter()
    rng = make_rng(909)
    x = rng.normal(size=4096)
    y = rng.normal(size=4096)
    same = float(nmi_per_channel(x[:, None], x[:, None]).value[0])
    indep = float(nmi_per_channel(x[:, None], y[:, None]).value[0])
    pairs = {"identity": (x, x), "independent": (x, y), "noisy": (x, x + 0.5 * y), "square": (x, x**2),
             "uniform": (rng.uniform(size=4096),) * 2}
    gap = 0.0
    for a, b in pairs.values():
        soft = float(nmi_per_channel(a[:, None], b[:, None]).value[0])
        gap = max(gap, abs(soft - _hard_nmi(a, b)))
    secs = time.perf_counter() - t0
    ok = 0.98 <= same <= 1.02 and indep < 0.1 and gap <= 0.05 and secs < 20
    report(9, "NMI estimator", ok,
           f"NMI(x,x) {same:.4f}, NMI(x,indep) {indep:.4f}, max gap to hard-histogram oracle {gap:.4f}, {secs:.1f}s")
    assert ok


# 10 ------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_10_perturbation_sweeps(runs, bench, report):
    _, test = bench
    full = runs["full"]
    net, cfg = full["result"].net, full["cfg"]
    noise = perturbation_sweep(net, test, "noise", None, cfg, seed=EVAL_SEED)
    again = perturbation_sweep(net, test, "noise", None, cfg, seed=EVAL_SEED)
    outl = perturbation_sweep(net, test, "outlier", [0.0, 0.01, 0.05, 0.1], cfg, seed=EVAL_SEED)
    clean = evaluate_voting(net, test, cfg, EVAL_SEED).accuracy
    by_level = {r.level: r.accuracy for r in noise}
    deterministic = format_sweep(noise) == format_sweep(again)
    zero_rows = by_level[0.0] == clean and outl[0].accuracy == clean
    ok = deterministic and zero_rows and by_level[0.1] < by_level[0.0]
    report(10, "perturbation sweeps", ok,
           f"deterministic {deterministic}, zero-level rows equal clean {zero_rows}, "
           f"noise accuracy {by_level[0.0]:.4f} at 0 vs {by_level[0.1]:.4f} at 0.1")
    assert ok


# 11 ------------------------------------------------------------------------
def test_criterion_11_determinism(tmp_path, report):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 2\nbatch_size = 8\nmicro_batch = 4\nalign_patches = 4\nnmi_patches = 2\n"
                   "enc.m = 32,8\nenc.k = 8,4\nenc.radius = 0.3,0.6\nenc.channels = 16,32\nenc.head_hidden = 16\n"
                   "data.points_per_cloud = 128\ndata.train_per_class = 4\ndata.test_per_class = 2\n")
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / name)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.csv", "model.ckpt")}
    ok = all(same.values())
    report(11, "determinism", ok, ", ".join(f"{k} byte-identical {v}" for k, v in same.items()))
    assert ok
