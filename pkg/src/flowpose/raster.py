"""Pinhole projection and z-buffered triangle rasterization."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

BACKGROUND = -1


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = None  # world to camera
    translation: np.ndarray = None

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be at least 1x1")
        rot = np.eye(3) if self.rotation is None else np.array(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("camera rotation must be a proper rotation")
        trans = np.zeros(3) if self.translation is None else np.array(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project_world(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and depths of world points."""
        cam_pts = self.to_camera(points)
        return project(self, cam_pts), cam_pts[..., 2]

    def projection_jacobian(self, points: np.ndarray) -> np.ndarray:
        """d(pixel)/d(world point), shape (N, 2, 3)."""
        xc = self.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
        z = xc[:, 2]
        jac = np.zeros((len(xc), 2, 3))
        jac[:, 0, 0] = self.focal / z
        jac[:, 1, 1] = self.focal / z
        jac[:, 0, 2] = -self.focal * xc[:, 0] / z**2
        jac[:, 1, 2] = -self.focal * xc[:, 1] / z**2
        return jac @ self.rotation


def project(cam: Camera, points: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points (..., 3) to pixels (..., 2)."""
    pts = np.asarray(points, dtype=float)
    z = pts[..., 2]
    if np.any(~(z > 0)):
        raise BehindCameraError(f"{int(np.sum(~(z > 0)))} point(s) at or behind the camera")
    out = np.empty(pts.shape[:-1] + (2,))
    out[..., 0] = cam.focal * pts[..., 0] / z + cam.cx
    out[..., 1] = cam.focal * pts[..., 1] / z + cam.cy
    return out


@dataclass(frozen=True, eq=False)
class VisibilityBuffer:
    tri: np.ndarray    # (H, W) triangle id or BACKGROUND
    bary: np.ndarray   # (H, W, 3) screen-space barycentrics
    depth: np.ndarray  # (H, W), inf on background

    @property
    def covered(self) -> np.ndarray:
        return self.tri != BACKGROUND

    @property
    def shape(self) -> tuple[int, int]:
        return self.tri.shape


def _edge_includes(dx, dy):
    # top-left rule for an edge walked with the interior on its left (y down)
    return (dy < 0) | ((dy == 0) & (dx > 0))


def rasterize(verts2: np.ndarray, depths: np.ndarray, faces: np.ndarray,
              size: tuple[int, int]) -> VisibilityBuffer:
    """Nearest-depth triangle, barycentrics and depth at every pixel center."""
    width, height = size
    verts2 = np.asarray(verts2, dtype=float).reshape(-1, 2)
    depths = np.asarray(depths, dtype=float).reshape(-1)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    tri_buf = np.full((height, width), BACKGROUND, dtype=np.int64)
    bary_buf = np.zeros((height, width, 3))
    depth_buf = np.full((height, width), np.inf)
    if len(faces) == 0:
        return VisibilityBuffer(tri_buf, bary_buf, depth_buf)

    p = verts2[faces]  # (F, 3, 2)
    area = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    ok = (area != 0) & np.isfinite(area) & np.all(depths[faces] > 0, axis=1)
    lo = np.ceil(p.min(axis=1) - 0.5).astype(np.int64)
    hi = np.floor(p.max(axis=1) - 0.5).astype(np.int64)
    lo = np.maximum(lo, 0)
    hi[:, 0] = np.minimum(hi[:, 0], width - 1)
    hi[:, 1] = np.minimum(hi[:, 1], height - 1)
    nx = np.where(ok, hi[:, 0] - lo[:, 0] + 1, 0).clip(min=0)
    ny = np.where(ok, hi[:, 1] - lo[:, 1] + 1, 0).clip(min=0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return VisibilityBuffer(tri_buf, bary_buf, depth_buf)

    fid = np.repeat(np.arange(len(faces)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    px = lo[fid, 0] + local % nx[fid]
    py = lo[fid, 1] + local // nx[fid]
    cx = px + 0.5
    cy = py + 0.5

    # orient every triangle so that its signed area is positive
    flip = area < 0
    order = np.where(flip[:, None], [0, 2, 1], [0, 1, 2])
    q = np.take_along_axis(p, order[:, :, None], axis=1)[fid]
    signed = np.abs(area)[fid]
    edge = np.empty((total, 3))
    inside = np.ones(total, dtype=bool)
    for k in range(3):
        a = q[:, (k + 1) % 3]
        b = q[:, (k + 2) % 3]
        dx = b[:, 0] - a[:, 0]
        dy = b[:, 1] - a[:, 1]
        e = dx * (cy - a[:, 1]) - dy * (cx - a[:, 0])
        inside &= (e > 0) | ((e == 0) & _edge_includes(dx, dy))
        edge[:, k] = e
    if not inside.any():
        return VisibilityBuffer(tri_buf, bary_buf, depth_buf)

    fid, px, py = fid[inside], px[inside], py[inside]
    lam = edge[inside] / signed[inside, None]
    # undo the orientation swap so barycentrics follow the face's vertex order
    lam = np.take_along_axis(lam, np.argsort(order[fid], axis=1), axis=1)
    inv_z = np.sum(lam / depths[faces[fid]], axis=1)
    z = 1.0 / inv_z

    pix = py * width + px
    f = faces[fid]
    sort = np.lexsort((f[:, 2], f[:, 1], f[:, 0], z, pix))
    pix_sorted = pix[sort]
    first = np.ones(len(sort), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = sort[first]
    flat = pix[win]
    tri_buf.reshape(-1)[flat] = fid[win]
    bary_buf.reshape(-1, 3)[flat] = lam[win]
    depth_buf.reshape(-1)[flat] = z[win]
    return VisibilityBuffer(tri_buf, bary_buf, depth_buf)


def write_pgm(path: str | Path, vbuf: VisibilityBuffer) -> None:
    """Debug dump of the triangle ids (mod 256, background 0)."""
    img = np.where(vbuf.covered, vbuf.tri % 255 + 1, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())
