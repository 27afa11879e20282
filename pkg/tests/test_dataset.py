import numpy as np
import pytest

from manifold_kd.dataset import (
    TORUS_R,
    TORUS_TUBE,
    SyntheticSpec,
    corrupted_view,
    format_cloud,
    generate,
    load_cloud,
    parse_cloud,
    read_split,
    sample_surface,
    save_cloud,
    write_split,
)
from manifold_kd.errors import BadProtocol, BadSpec, ParseError
from manifold_kd.geomcore import PointCloud, make_rng

SMALL = SyntheticSpec(classes=("sphere", "cube", "torus"), points_per_cloud=64, train_per_class=3,
                      test_per_class=2, seed=5)


def test_sphere_on_unit_sphere():
    pts = sample_surface("sphere", 500, make_rng(0))
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)


def test_cube_on_surface():
    pts = sample_surface("cube", 600, make_rng(1))
    assert np.allclose(np.abs(pts).max(axis=1), 1.0)
    # faces chosen uniformly: each of the six gets about 1/6
    face = np.argmax(np.abs(pts), axis=1) + 3 * (pts[np.arange(600), np.argmax(np.abs(pts), axis=1)] < 0)
    counts = np.bincount(face, minlength=6)
    assert counts.min() > 60


def test_cylinder_surface_and_area_split():
    pts = sample_surface("cylinder", 6000, make_rng(2))
    r = np.linalg.norm(pts[:, :2], axis=1)
    lateral = np.isclose(r, 1.0)
    caps = np.isclose(np.abs(pts[:, 2]), 1.0)
    assert np.all(lateral | caps)
    # lateral area 4 pi of total 6 pi
    assert abs(lateral.mean() - 2 / 3) < 0.03


def test_torus_surface_and_area_weighting():
    pts = sample_surface("torus", 20000, make_rng(3))
    ring = np.linalg.norm(pts[:, :2], axis=1) - TORUS_R
    assert np.allclose(ring**2 + pts[:, 2] ** 2, TORUS_TUBE**2)
    # fraction on the outer half is 1/2 + r / (pi R) for the area measure
    outer = (ring > 0).mean()
    assert abs(outer - (0.5 + TORUS_TUBE / (np.pi * TORUS_R))) < 0.015


def test_cone_surface():
    pts = sample_surface("cone", 3000, make_rng(4))
    r = np.linalg.norm(pts[:, :2], axis=1)
    base = np.isclose(pts[:, 2], -1.0)
    assert np.allclose(r[~base], (1.0 - pts[~base, 2]) / 2.0)
    assert np.all(r[base] <= 1.0 + 1e-12)


def test_generate_counts_and_normalisation():
    train, test = generate(SMALL)
    assert len(train) == 9 and len(test) == 6
    assert np.bincount(train.labels()).tolist() == [3, 3, 3]
    for c in list(train) + list(test):
        assert c.points.shape == (64, 3)
        assert np.allclose(c.points.mean(axis=0), 0.0, atol=1e-12)
        assert np.isclose(np.linalg.norm(c.points, axis=1).max(), 1.0)


def test_generate_deterministic_and_disjoint():
    a_train, a_test = generate(SMALL)
    b_train, _ = generate(SMALL)
    for x, y in zip(a_train, b_train):
        assert np.array_equal(x.points, y.points)
    train_keys = {c.points.tobytes() for c in a_train}
    assert not train_keys & {c.points.tobytes() for c in a_test}


@pytest.mark.parametrize("kw", [
    {"classes": ("sphere",)},
    {"classes": ("sphere", "blob")},
    {"points_per_cloud": 16},
    {"jitter": -1.0},
    {"scale_range": (0.0, 1.0)},
])
def test_bad_spec(kw):
    with pytest.raises(BadSpec):
        generate(SyntheticSpec(**kw))


def test_cloud_round_trip(tmp_path):
    cloud = PointCloud(make_rng(6).normal(size=(20, 3)), 2)
    path = tmp_path / "c.pcd"
    save_cloud(cloud, path)
    back = load_cloud(path)
    assert back.label == 2
    assert np.allclose(back.points, cloud.points, rtol=1e-8, atol=1e-8)
    assert format_cloud(back) == format_cloud(cloud)


def test_parse_errors_name_lines():
    with pytest.raises(ParseError, match="line 1"):
        parse_cloud("pcd/2\nn 1 d 3 label 0\n0 0 0\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_cloud("pcd/1\nn one d 3 label 0\n0 0 0\n")
    with pytest.raises(ParseError, match="declares 3 points"):
        parse_cloud("pcd/1\nn 3 d 3 label 0\n0 0 0\n1 1 1\n")
    with pytest.raises(ParseError, match="line 4"):
        parse_cloud("pcd/1\nn 2 d 3 label -1\n0 0 0\n1 1\n")
    with pytest.raises(ParseError, match="line 3"):
        parse_cloud("pcd/1\nn 1 d 3 label -1\n0 x 0\n")


def test_unlabelled_cloud():
    c = parse_cloud("pcd/1\nn 1 d 3 label -1\n0 0 1\n")
    assert c.label is None


def test_split_manifest_round_trip(tmp_path):
    train, _ = generate(SMALL)
    manifest = write_split(train, tmp_path, "train")
    lines = manifest.read_text().splitlines()
    assert lines[0] == "train/000000.pcd 0"
    back = read_split(tmp_path, "train")
    assert back.class_names == SMALL.classes
    assert np.array_equal(back.labels(), train.labels())


def test_corrupted_view_identity_at_zero():
    _, test = generate(SMALL)
    for proto in ("rotation", "noise", "outlier"):
        view = corrupted_view(test, proto, 0.0, 3)
        assert all(np.array_equal(view[i].points, test[i].points) for i in range(len(test)))


def test_corrupted_view_rotation_bound_and_determinism():
    _, test = generate(SMALL)
    view = corrupted_view(test, "rotation", 30.0, 11)
    for i in range(len(test)):
        assert view.transform_for(i).angle_deg <= 30.0 + 1e-6
        r = view.transform_for(i).rotation
        assert np.allclose(view[i].points, test[i].points @ r.T)
    again = corrupted_view(test, "rotation", 30.0, 11)
    assert np.array_equal(view.stack(), again.stack())


def test_corrupted_view_leaves_base_untouched():
    _, test = generate(SMALL)
    before = test.stack().copy()
    view = corrupted_view(test, "outlier", 0.1, 2)
    moved = np.any(view[0].points != test[0].points, axis=1).sum()
    assert moved == round(0.1 * 64)
    assert np.array_equal(test.stack(), before)
    with pytest.raises(BadProtocol):
        corrupted_view(test, "blur", 0.1, 0)
