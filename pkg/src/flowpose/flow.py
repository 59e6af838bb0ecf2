"""Backward-flow and silhouette rendering, flow Jacobians and flow pyramids."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from .geometry import JointTransforms, ModelState, Skeleton, forward_kinematics, skin_vertices
from .raster import BACKGROUND, Camera, VisibilityBuffer, rasterize

BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True, eq=False)
class FlowField:
    vectors: np.ndarray  # (H, W, 2), pixels
    valid: np.ndarray    # (H, W) bool

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=float)
        valid = np.array(self.valid, dtype=bool)
        if vec.ndim != 3 or vec.shape[2] != 2 or vec.shape[:2] != valid.shape:
            raise ValueError(f"inconsistent flow shapes {vec.shape} / {valid.shape}")
        vec[~valid] = 0.0
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "valid", valid)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int, valid: bool = True) -> "FlowField":
        return cls(np.zeros((height, width, 2)), np.full((height, width), valid))


@dataclass(frozen=True, eq=False)
class FlowPyramid:
    levels: list[FlowField]

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> FlowField:
        return self.levels[i]


def _blur(x: np.ndarray) -> np.ndarray:
    x = ndimage.correlate1d(x, BINOMIAL, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(x, BINOMIAL, axis=1, mode="constant", cval=0.0)


def _down_matrix(mask: np.ndarray, den: np.ndarray, next_mask: np.ndarray) -> sparse.csr_matrix:
    """Sparse blur-and-decimate step from one level to the next (flat row-major)."""
    h, w = mask.shape
    h2, w2 = next_mask.shape
    oy, ox = np.nonzero(next_mask)
    rows, cols, vals = [], [], []
    out = oy * w2 + ox
    inv_den = 1.0 / den[2 * oy, 2 * ox]
    for dy in range(-2, 3):
        y = 2 * oy + dy
        for dx in range(-2, 3):
            x = 2 * ox + dx
            ok = (y >= 0) & (y < h) & (x >= 0) & (x < w)
            ok[ok] = mask[y[ok], x[ok]]
            rows.append(out[ok])
            cols.append(y[ok] * w + x[ok])
            vals.append(BINOMIAL[dy + 2] * BINOMIAL[dx + 2] * inv_den[ok])
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(h2 * w2, h * w))


class PyramidOperator:
    """Mask-normalized blur-and-decimate chain for a fixed level-0 valid mask.

    The operator is linear in the field values, so it also provides the
    adjoint used to pull level gradients back to full resolution.
    """

    def __init__(self, valid: np.ndarray, levels: int):
        if levels < 1:
            raise ValueError("a pyramid needs at least one level")
        self.masks = [np.asarray(valid, dtype=bool)]
        self.steps = []
        for _ in range(levels - 1):
            m = self.masks[-1]
            den = _blur(m.astype(float))
            nxt = den[::2, ::2] > 0
            self.steps.append(_down_matrix(m, den, nxt))
            self.masks.append(nxt)

    @property
    def levels(self) -> int:
        return len(self.masks)

    def apply(self, x: np.ndarray) -> list[np.ndarray]:
        """Values at every level for level-0 data ``x`` of shape (H, W, ...)."""
        x = np.asarray(x, dtype=float)
        tail = x.shape[2:]
        m0 = self.masks[0]
        flat = (x * m0.reshape(m0.shape + (1,) * len(tail))).reshape(m0.size, -1)
        out = [flat]
        for step in self.steps:
            out.append(step @ out[-1])
        return [v.reshape(m.shape + tail) for v, m in zip(out, self.masks)]

    def apply_sparse(self, pixels: np.ndarray, values: np.ndarray, levels) -> dict[int, np.ndarray]:
        """Levels of data that is nonzero only at flat ``pixels``; rows (n_level, C).

        Level 0 is returned as the rows of ``values`` themselves (no scatter).
        """
        out = {0: values}
        acc = None
        for lv in range(1, max(levels, default=0) + 1):
            acc = self.steps[0][:, pixels] @ values if lv == 1 else self.steps[lv - 1] @ acc
            out[lv] = acc
        return out

    def adjoint(self, grads: list[np.ndarray]) -> np.ndarray:
        """Pull per-level gradients back to level 0 (transpose of ``apply``)."""
        tail = grads[0].shape[2:]
        acc = grads[-1].reshape(self.masks[-1].size, -1)
        for level in range(self.levels - 2, -1, -1):
            acc = grads[level].reshape(self.masks[level].size, -1) + self.steps[level].T @ acc
        m = self.masks[0]
        return acc.reshape(m.shape + tail) * m.reshape(m.shape + (1,) * len(tail))


def gaussian_pyramid(field: FlowField, levels: int) -> FlowPyramid:
    op = PyramidOperator(field.valid, levels)
    values = op.apply(field.vectors)
    return FlowPyramid([FlowField(v, m) for v, m in zip(values, op.masks)])


# -- rendering ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PosedMesh:
    transforms: JointTransforms
    vertices: np.ndarray
    uv: np.ndarray
    depth: np.ndarray


def pose_mesh(state: ModelState, skel: Skeleton, cam: Camera) -> PosedMesh:
    """Skin and project the mesh; raises BehindCameraError."""
    T = forward_kinematics(skel, state.theta, state.sigma)
    verts = skin_vertices(skel, T)
    uv, depth = cam.project_world(verts)
    return PosedMesh(T, verts, uv, depth)


def visibility(mesh: PosedMesh, skel: Skeleton, cam: Camera) -> VisibilityBuffer:
    return rasterize(mesh.uv, mesh.depth, skel.faces, cam.size)


def backward_flow(vbuf: VisibilityBuffer, faces: np.ndarray, uv_cur: np.ndarray,
                  uv_prev: np.ndarray) -> FlowField:
    """Barycentric interpolation of projected vertex displacements (cur -> prev)."""
    covered = vbuf.covered
    tri = faces[vbuf.tri[covered]]
    disp = uv_prev[tri] - uv_cur[tri]  # (N, 3, 2)
    vec = np.zeros(vbuf.shape + (2,))
    vec[covered] = np.einsum("nk,nkc->nc", vbuf.bary[covered], disp)
    return FlowField(vec, covered)


def flow_with_fixed_coverage(tri_ids: np.ndarray, faces: np.ndarray, uv_cur: np.ndarray,
                             uv_prev: np.ndarray) -> FlowField:
    """Backward flow with a frozen pixel-to-triangle assignment.

    Barycentrics are recomputed from ``uv_cur`` (and may leave [0, 1]); this
    is the function whose derivative the renderer reports away from
    coverage changes.
    """
    covered = tri_ids != BACKGROUND
    ys, xs = np.nonzero(covered)
    pts = np.stack([xs + 0.5, ys + 0.5], axis=1)
    tri = faces[tri_ids[covered]]
    u = uv_cur[tri]
    e = np.stack([u[:, 0] - u[:, 2], u[:, 1] - u[:, 2]], axis=2)  # columns
    lam01 = np.linalg.solve(e, (pts - u[:, 2])[:, :, None])[:, :, 0]
    lam = np.column_stack([lam01, 1.0 - lam01.sum(axis=1)])
    disp = uv_prev[tri] - u
    vec = np.zeros(tri_ids.shape + (2,))
    vec[covered] = np.einsum("nk,nkc->nc", lam, disp)
    return FlowField(vec, covered)


def render_backward_flow(state_i: ModelState, state_prev: ModelState, skel: Skeleton,
                         cam: Camera, vbuf: VisibilityBuffer | None = None) -> FlowField:
    """Flow from frame i back to frame i-1, visibility taken at frame i."""
    cur = pose_mesh(state_i, skel, cam)
    prev = pose_mesh(state_prev, skel, cam)
    if vbuf is None:
        vbuf = visibility(cur, skel, cam)
    return backward_flow(vbuf, skel.faces, cur.uv, prev.uv)


def render_silhouette(state: ModelState, skel: Skeleton, cam: Camera) -> np.ndarray:
    return visibility(pose_mesh(state, skel, cam), skel, cam).covered


@dataclass(frozen=True, eq=False)
class FlowJacobian:
    """Per covered pixel: the three vertices and the 2x2 blocks dF/du for each."""
    pixels: np.ndarray  # (N,) flat pixel indices
    verts: np.ndarray   # (N, 3)
    cur: np.ndarray     # (N, 3, 2, 2) w.r.t. projections at frame i
    prev: np.ndarray    # (N, 3, 2, 2) w.r.t. projections at frame i-1

    def __len__(self) -> int:
        return len(self.pixels)


def flow_jacobian_from(vbuf: VisibilityBuffer, faces: np.ndarray, uv_cur: np.ndarray,
                       uv_prev: np.ndarray, exact: bool = True) -> FlowJacobian:
    covered = vbuf.covered
    pixels = np.flatnonzero(covered)
    verts = faces[vbuf.tri.reshape(-1)[pixels]]
    lam = vbuf.bary.reshape(-1, 3)[pixels]
    eye = np.eye(2)
    prev = lam[:, :, None, None] * eye
    if exact:
        # the cur triangle maps affinely onto the prev one; barycentrics move with it
        u, w = uv_cur[verts], uv_prev[verts]
        e = np.stack([u[:, 0] - u[:, 2], u[:, 1] - u[:, 2]], axis=2)
        g = np.stack([w[:, 0] - w[:, 2], w[:, 1] - w[:, 2]], axis=2)
        affine = g @ np.linalg.inv(e)
        cur = -lam[:, :, None, None] * affine[:, None]
    else:
        cur = -prev
    return FlowJacobian(pixels, verts, cur, prev)


def flow_jacobian(state_i: ModelState, state_prev: ModelState, skel: Skeleton, cam: Camera,
                  vbuf: VisibilityBuffer, exact: bool = True) -> FlowJacobian:
    """Partial derivatives of each flow vector w.r.t. the projected vertices.

    With ``exact=False`` barycentrics are held fixed (dF/du_cur = -b I); the
    default also differentiates the barycentrics of the fixed pixel centre,
    which is the true derivative away from coverage changes.
    """
    cur = pose_mesh(state_i, skel, cam)
    prev = pose_mesh(state_prev, skel, cam)
    return flow_jacobian_from(vbuf, skel.faces, cur.uv, prev.uv, exact)
