import numpy as np
import pytest

from surfrann.geometry_levelset import frame_at, sample_levelset, torus
from surfrann.geometry_pointcloud import (CloudParseError, PointCloudSurface, fit_frames, load_cloud,
                                          orientation_coherence)
from surfrann.sampling import fibonacci_sphere


@pytest.fixture(scope="module")
def sphere_frames():
    cloud = PointCloudSurface.from_points(fibonacci_sphere(5000))
    return cloud, fit_frames(cloud, k=20)


def test_sphere_curvature_and_normals(sphere_frames):
    cloud, fr = sphere_frames
    assert np.median(np.abs(fr.H - 1)) <= 0.02
    ang = np.degrees(np.arccos(np.clip(np.einsum("ni,ni->n", fr.normal, cloud.points), -1, 1)))
    assert np.median(ang) <= 0.5
    assert fr.ok.all()


def test_sphere_refinement_improves_curvature(sphere_frames):
    e1 = np.median(np.abs(sphere_frames[1].H - 1))
    e2 = np.median(np.abs(fit_frames(PointCloudSurface.from_points(fibonacci_sphere(10000))).H - 1))
    assert e2 <= e1 / 1.5


def test_plane_exact():
    g = np.linspace(-1, 1, 30)
    A, B = np.meshgrid(g, g)
    n = np.array([1.0, 2.0, 2.0]) / 3
    e1 = np.array([2.0, -1.0, 0.0]) / np.sqrt(5)
    e2 = np.cross(n, e1)
    P = A.ravel()[:, None] * e1 + B.ravel()[:, None] * e2 + 0.3 * n
    fr = fit_frames(PointCloudSurface.from_points(P), k=20)
    assert np.max(np.abs(fr.H)) <= 1e-10
    assert np.allclose(np.abs(fr.normal @ n), 1, atol=1e-10)


def test_torus_curvature_mst():
    S = torus()
    P = sample_levelset(S, 20000, 0)
    cloud = PointCloudSurface.from_points(P)
    fr = fit_frames(cloud, k=20, orientation="mst")
    ex = frame_at(S, P)
    assert np.median(np.abs(fr.H - ex.H) / np.abs(ex.H)) <= 0.05
    assert orientation_coherence(cloud, fr) >= 0.999
    assert np.mean(np.einsum("ni,ni->n", fr.normal, ex.normal) > 0) >= 0.999


def test_small_cloud_flagged_and_bad_k():
    cloud = PointCloudSurface.from_points(np.eye(3))
    fr = fit_frames(cloud, k=6)
    assert not fr.ok.any() and np.isnan(fr.H).all()
    with pytest.raises(ValueError):
        fit_frames(cloud, k=3)
    with pytest.raises(ValueError):
        fit_frames(cloud, orientation="random")


def test_load_xyz_dedup_and_ply(tmp_path):
    p = tmp_path / "c.xyz"
    p.write_text("# header\n0 0 0\n1,0,0\n0 1 0\n0 0 0\n")
    c = load_cloud(p)
    assert len(c) == 3 and c.duplicates_removed == 1
    ply = tmp_path / "c.ply"
    ply.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                   "property float z\nend_header\n1 2 3\n4 5 6\n")
    assert np.array_equal(load_cloud(ply).points, [[1, 2, 3], [4, 5, 6]])


@pytest.mark.parametrize("text,line", [("0 0 0\n1 2\n", "line 2"), ("0 0 0\n\n1 a 2\n", "line 3")])
def test_load_errors_name_line(tmp_path, text, line):
    p = tmp_path / "bad.xyz"
    p.write_text(text)
    with pytest.raises(CloudParseError, match=line):
        load_cloud(p)


def test_ply_errors(tmp_path):
    p = tmp_path / "b.ply"
    p.write_text("ply\nformat binary_little_endian 1.0\nend_header\n")
    with pytest.raises(CloudParseError, match="ASCII"):
        load_cloud(p)
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n1 2 3\n")
    with pytest.raises(CloudParseError, match="ends before"):
        load_cloud(p)


def test_frames_csv_roundtrip(tmp_path, sphere_frames):
    cloud, fr = sphere_frames
    fr.to_csv(tmp_path / "f.csv", cloud.points)
    data = np.loadtxt(tmp_path / "f.csv", delimiter=",", skiprows=1)
    assert np.array_equal(data[:, :3], cloud.points) and np.array_equal(data[:, 6], fr.H)
