import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowpose.flow import pose_mesh, visibility
from flowpose.harness.io import decode_pgm
from flowpose.raster import BACKGROUND, BehindCameraError, Camera, project, rasterize, write_pgm

from conftest import random_state


def test_project_examples():
    cam = Camera(500.0, 320.0, 240.0, 640, 480)
    assert project(cam, np.array([0.0, 0.0, 2.0])) == pytest.approx([320.0, 240.0])
    assert project(cam, np.array([0.1, 0.0, 1.0]))[0] == pytest.approx(370.0)
    with pytest.raises(BehindCameraError):
        project(cam, np.array([0.0, 0.0, -1.0]))
    with pytest.raises(BehindCameraError):
        project(cam, np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]))


def test_project_batch_matches_scalar(rng):
    cam = Camera(431.5, 100.25, 80.75, 200, 160)
    pts = rng.uniform([-1, -1, 0.5], [1, 1, 5], (500, 3))
    uv = project(cam, pts)
    for p, q in zip(pts, uv):
        x, y, z = (float(v) for v in p)
        assert q[0] == 431.5 * x / z + 100.25
        assert q[1] == 431.5 * y / z + 80.75


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera(0.0, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1, 1, 0, 4)
    with pytest.raises(ValueError):
        Camera(1.0, 1, 1, 4, 4, np.diag([1.0, 1.0, -1.0]))


def test_projection_jacobian(rng):
    cam = Camera(300.0, 32, 32, 64, 64, np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, 4.0]))
    X = rng.normal(size=(10, 3)) * 0.5
    J = cam.projection_jacobian(X)
    h = 1e-6
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        fd = (cam.project_world(X + e)[0] - cam.project_world(X - e)[0]) / (2 * h)
        np.testing.assert_allclose(J[:, :, c], fd, atol=1e-6)


# -- rasterization -----------------------------------------------------------

def test_empty_faces_all_background():
    vb = rasterize(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3), int), (16, 8))
    assert vb.shape == (8, 16) and not vb.covered.any()


def test_nearer_triangle_wins():
    verts = np.array([[2, 2], [30, 3], [4, 28], [1, 1], [31, 2], [3, 31]], dtype=float)
    depths = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    vb = rasterize(verts, depths, faces, (32, 32))
    both = vb.covered
    assert both.sum() > 100
    far_only = rasterize(verts[:3], depths[:3], faces[:1], (32, 32)).covered
    assert np.all(vb.tri[far_only] == 1)
    np.testing.assert_allclose(vb.depth[far_only], 1.0)


def _brute_force(tri, size):
    """Coverage and barycentrics by testing every pixel centre against the edge functions."""
    w, h = size
    (x0, y0), (x1, y1), (x2, y2) = tri
    area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
    pts = [(0, 1, 2)] if area > 0 else [(0, 2, 1)]
    order = pts[0]
    cov = np.zeros((h, w), bool)
    bary = np.zeros((h, w, 3))
    for py in range(h):
        for px in range(w):
            cx, cy = px + 0.5, py + 0.5
            ok = True
            lam = [0.0, 0.0, 0.0]
            for k in range(3):
                a = tri[order[(k + 1) % 3]]
                b = tri[order[(k + 2) % 3]]
                dx, dy = b[0] - a[0], b[1] - a[1]
                e = dx * (cy - a[1]) - dy * (cx - a[0])
                top_left = dy < 0 or (dy == 0 and dx > 0)
                if not (e > 0 or (e == 0 and top_left)):
                    ok = False
                lam[order[k]] = e / abs(area)
            if ok:
                cov[py, px] = True
                bary[py, px] = lam
    return cov, bary


@pytest.mark.parametrize("seed", range(6))
def test_single_triangle_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    verts = rng.uniform(-4, 68, (3, 2))
    if seed == 0:
        verts = np.array([[8.5, 8.5], [40.5, 8.5], [8.5, 40.5]])  # edges through pixel centres
    vb = rasterize(verts, np.full(3, 2.0), np.array([[0, 1, 2]]), (64, 64))
    cov, bary = _brute_force([tuple(v) for v in verts], (64, 64))
    assert np.array_equal(vb.covered, cov)
    np.testing.assert_allclose(vb.bary[cov], bary[cov], atol=1e-12)


def test_shared_edge_no_double_coverage():
    # two triangles forming a square, diagonal through pixel centres
    verts = np.array([[4.5, 4.5], [20.5, 4.5], [20.5, 20.5], [4.5, 20.5]])
    d = np.ones(4)
    a = rasterize(verts, d, np.array([[0, 1, 2]]), (32, 32)).covered
    b = rasterize(verts, d, np.array([[0, 2, 3]]), (32, 32)).covered
    assert not np.any(a & b)
    both = rasterize(verts, d, np.array([[0, 1, 2], [0, 2, 3]]), (32, 32)).covered
    assert np.array_equal(both, a | b)
    assert both.sum() == 16 * 16


def test_perspective_correct_depth():
    verts = np.array([[0.0, 0.0], [64.0, 0.0], [0.0, 64.0]])
    depths = np.array([1.0, 3.0, 2.0])
    vb = rasterize(verts, depths, np.array([[0, 1, 2]]), (64, 64))
    b = vb.bary[vb.covered]
    np.testing.assert_allclose(vb.depth[vb.covered], 1.0 / (b @ (1.0 / depths)), rtol=1e-12)


def test_degenerate_triangles_skipped():
    verts = np.array([[1.0, 1.0], [10.0, 10.0], [20.0, 20.0]])
    vb = rasterize(verts, np.ones(3), np.array([[0, 1, 2]]), (32, 32))
    assert not vb.covered.any()


def test_body_mesh_invariants(male, cam128, rng):
    state = random_state(rng)
    mesh = pose_mesh(state, male, cam128)
    vb = visibility(mesh, male, cam128)
    cov = vb.covered
    assert cov.sum() > 500
    b = vb.bary[cov]
    assert np.all(b >= -1e-12)
    np.testing.assert_allclose(b.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(vb.depth[cov] > 0)
    # barycentric reconstruction of the pixel centre
    ys, xs = np.nonzero(cov)
    tri = male.faces[vb.tri[cov]]
    rec = np.einsum("nk,nkc->nc", b, mesh.uv[tri])
    np.testing.assert_allclose(rec, np.column_stack([xs + 0.5, ys + 0.5]), atol=1e-3)
    # determinism and face-order invariance
    vb2 = visibility(mesh, male, cam128)
    assert np.array_equal(vb.tri, vb2.tri) and np.array_equal(vb.bary, vb2.bary)
    perm = rng.permutation(len(male.faces))
    vp = rasterize(mesh.uv, mesh.depth, male.faces[perm], cam128.size)
    relabel = np.where(vp.covered, perm[np.maximum(vp.tri, 0)], BACKGROUND)
    assert np.array_equal(relabel, vb.tri)
    assert np.array_equal(vp.bary, vb.bary) and np.array_equal(vp.depth, vb.depth)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-10, 42, allow_nan=False), min_size=6, max_size=6),
       st.lists(st.floats(-10, 42, allow_nan=False), min_size=6, max_size=6))
def test_barycentric_reconstruction_property(a, b):
    verts = np.array(a + b).reshape(6, 2)
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    vb = rasterize(verts, np.array([1.0, 1.5, 2.0, 1.2, 2.2, 0.8]), faces, (32, 32))
    cov = vb.covered
    ys, xs = np.nonzero(cov)
    rec = np.einsum("nk,nkc->nc", vb.bary[cov], verts[faces[vb.tri[cov]]])
    np.testing.assert_allclose(rec, np.column_stack([xs + 0.5, ys + 0.5]), atol=1e-3)


def test_write_pgm(tmp_path):
    verts = np.array([[0.0, 0.0], [16.0, 0.0], [0.0, 16.0]])
    vb = rasterize(verts, np.ones(3), np.array([[0, 1, 2]]), (16, 16))
    path = tmp_path / "vis.pgm"
    write_pgm(path, vb)
    img = decode_pgm(path.read_bytes())
    assert np.array_equal(img > 0, vb.covered)
    assert set(np.unique(img)) <= {0, 1}
