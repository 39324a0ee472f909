import numpy as np
import pytest
from hypothesis import given, settings

from anisoreg import GmmModel, NotPSD, ObservedCloud, ParseError, RigidTransform
from anisoreg.core import cov_from_upper, cov_to_upper
from anisoreg.io import (
    export_gmm,
    export_transforms,
    parse_cloud_csv,
    parse_gmm,
    parse_ply,
    parse_transforms,
    write_cloud_csv,
    write_ply,
)
from conftest import random_spd, random_transform, seeds


def test_minimal_row(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y,z,sxx,syy,szz\n0,0,0,1,1,5\n")
    c = parse_cloud_csv(p)
    np.testing.assert_array_equal(c.points, [[0, 0, 0]])
    np.testing.assert_array_equal(c.noise_covs[0], np.diag([1.0, 1.0, 5.0]))
    assert c.id == "c"


def test_negative_variance_is_not_psd(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x,y,z,sxx,syy,szz\n0,0,0,1,1,1\n0,0,0,-1,1,5\n")
    with pytest.raises(NotPSD) as exc:
        parse_cloud_csv(p)
    assert exc.value.index == 1


@pytest.mark.parametrize("text, line", [
    ("", 1),
    ("a,b,c\n1,2,3\n", 1),
    ("x,y,z,sxx,syy,szz\n1,2,3,1,1,1\n1,2,3,1,1\n", 3),
    ("x,y,z,sxx,syy,szz\n1,2,3,1,1,1\n1,2,oops,1,1,1\n", 3),
    ("x,y,z,sxx,syy,szz\n1,2,nan,1,1,1\n", 2),
])
def test_parse_errors_carry_line(tmp_path, text, line):
    p = tmp_path / "c.csv"
    p.write_text(text)
    with pytest.raises(ParseError) as exc:
        parse_cloud_csv(p)
    assert exc.value.line == line


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_cloud_round_trip_is_exact(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    covs = np.stack([random_spd(rng, 1e-6, 10.0) for _ in range(5)])
    c = ObservedCloud("v", rng.normal(size=(5, 3)) * 1e3, covs)
    p = write_cloud_csv(c, tmp_path_factory.mktemp("rt") / "v.csv")
    back = parse_cloud_csv(p)
    np.testing.assert_array_equal(back.points, c.points)
    # only the upper triangle is stored
    np.testing.assert_array_equal(back.noise_covs, cov_from_upper(cov_to_upper(c.noise_covs)))


def test_ascii_ply(tmp_path):
    p = tmp_path / "m.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nproperty uchar red\nend_header\n0 0 0 1\n1 0 0 2\n0 1 0 3\n")
    np.testing.assert_array_equal(parse_ply(p), [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_binary_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(50, 3))
    p = write_ply(pts, tmp_path / "b.ply")
    assert p.read_bytes().startswith(b"ply\nformat binary_little_endian")
    np.testing.assert_array_equal(parse_ply(p), pts)


@pytest.mark.parametrize("body", [
    # header declares 10 vertices, 9 present
    "ply\nformat ascii 1.0\nelement vertex 10\nproperty float x\nproperty float y\n"
    "property float z\nend_header\n" + "0 0 0\n" * 9,
    "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n",
    "not a ply file\n",
])
def test_bad_ply(tmp_path, body):
    p = tmp_path / "bad.ply"
    p.write_text(body)
    with pytest.raises(ParseError):
        parse_ply(p)


def test_truncated_binary_ply(tmp_path, rng):
    p = write_ply(rng.normal(size=(10, 3)), tmp_path / "t.ply")
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(ParseError):
        parse_ply(p)


def test_gmm_round_trip(tmp_path, rng):
    K = 4
    w = np.append(np.full(K, 0.2), 0.2)
    g = GmmModel(rng.normal(size=(K, 3)), rng.uniform(0.1, 1, K), w, 3.5)
    p = export_gmm(g, tmp_path / "g.csv")
    lines = p.read_text().splitlines()
    assert lines[0] == "mu_x,mu_y,mu_z,sigma2,weight" and len(lines) == K + 1
    back = parse_gmm(p, 3.5)
    np.testing.assert_array_equal(back.means, g.means)
    np.testing.assert_array_equal(back.variances, g.variances)
    assert back.weights[:-1].sum() == pytest.approx(1 - g.outlier_weight)


def test_single_component_gmm(tmp_path):
    g = GmmModel(np.zeros((1, 3)), [1.0], [1.0, 0.0], 1.0)
    p = export_gmm(g, tmp_path / "g.csv")
    assert len(p.read_text().splitlines()) == 2


def test_transforms_round_trip(tmp_path, rng):
    ts = [random_transform(rng) for _ in range(3)] + [RigidTransform.identity()]
    p = export_transforms(ts, tmp_path / "t.csv")
    assert p.read_text().splitlines()[0].split(",")[-3:] == ["tx", "ty", "tz"]
    back = parse_transforms(p)
    for a, b in zip(ts, back):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)
