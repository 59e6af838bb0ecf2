"""Cost terms of the per-frame objective and their derivatives.

Every term is a sum of squared residuals.  The ``*_residuals`` functions
return the residual vector and its Jacobian with respect to whatever
parameter block the inputs were differentiated against; the ``*_cost``
functions wrap them into a :class:`CostReport`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .flow import (FlowField, FlowPyramid, PosedMesh, PyramidOperator, backward_flow,
                   flow_jacobian_from, pose_mesh, visibility)
from .geometry import (JOINT_NAMES, N_JOINTS, N_MOTION, N_POSE, CapsuleSet, ModelState,
                       Skeleton, capsule_jacobian, forward_kinematics, pose_axes,
                       vertex_jacobian)
from .raster import Camera, VisibilityBuffer

TERMS = ("flow", "coverage", "bounds", "interpenetration", "smoothness")


class InvalidInputError(ValueError):
    pass


@dataclass
class CostReport:
    value: float
    gradient: np.ndarray
    terms: dict[str, float] = field(default_factory=dict)


@dataclass
class Residuals:
    r: np.ndarray
    J: np.ndarray | None = None

    @property
    def value(self) -> float:
        return float(self.r @ self.r)

    def report(self, name: str) -> CostReport:
        grad = 2.0 * self.J.T @ self.r if self.J is not None else None
        return CostReport(self.value, grad, {name: self.value})


# -- joint-angle bounds ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(N_POSE)
        hi = np.array(self.upper, dtype=float).reshape(N_POSE)
        if np.any(~(lo < hi)):
            raise ValueError("bounds need lower < upper in every component")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)


def parse_pose_bounds(text: str) -> PoseBounds:
    lo = np.full(N_POSE, -np.inf)
    hi = np.full(N_POSE, np.inf)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or "=" in line:
            continue
        tok = line.split()
        if tok[0] != "bound" or len(tok) != 8 or tok[1] not in JOINT_NAMES:
            raise ValueError(f"line {lineno}: bad bound entry {raw.strip()!r}")
        j = JOINT_NAMES.index(tok[1])
        vals = [float(v) for v in tok[2:]]
        lo[3 * j:3 * j + 3] = vals[0::2]
        hi[3 * j:3 * j + 3] = vals[1::2]
    return PoseBounds(lo, hi)


def load_pose_bounds(path: str | Path | None = None) -> PoseBounds:
    if path is None:
        text = resources.files("flowpose.assets").joinpath("pose_bounds.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_pose_bounds(text)


def bound_residuals(theta: np.ndarray, bounds: PoseBounds) -> Residuals:
    theta = np.asarray(theta, dtype=float)
    with np.errstate(over="ignore"):
        below = np.exp(bounds.lower - theta) - 1.0
        above = np.exp(theta - bounds.upper) - 1.0
    lo_on = below > 0
    hi_on = above > 0
    r = np.where(lo_on, below, 0.0) + np.where(hi_on, above, 0.0)
    d = np.where(lo_on, -(below + 1.0), 0.0) + np.where(hi_on, above + 1.0, 0.0)
    return Residuals(r, np.diag(d))


def bound_cost(theta: np.ndarray, bounds: PoseBounds) -> CostReport:
    return bound_residuals(theta, bounds).report("bounds")


# -- temporal smoothness -----------------------------------------------------

def smoothness_residuals(theta_i: np.ndarray, theta_prev: np.ndarray) -> Residuals:
    r = np.asarray(theta_i, dtype=float) - np.asarray(theta_prev, dtype=float)
    return Residuals(r, np.eye(len(r)))


def smoothness_cost(theta_i: np.ndarray, theta_prev: np.ndarray) -> CostReport:
    return smoothness_residuals(theta_i, theta_prev).report("smoothness")


# -- interpenetration --------------------------------------------------------

def tree_distance(parents: np.ndarray) -> np.ndarray:
    n = len(parents)
    depth = np.zeros(n, dtype=int)
    for j in range(n):
        depth[j] = 0 if parents[j] < 0 else depth[parents[j]] + 1
    dist = np.zeros((n, n), dtype=int)
    for i in range(n):
        for j in range(n):
            a, b = i, j
            while a != b:
                if depth[a] >= depth[b]:
                    a = parents[a]
                else:
                    b = parents[b]
            dist[i, j] = depth[i] + depth[j] - 2 * depth[a]
    return dist


def non_adjacent_pairs(parents: np.ndarray, min_distance: int = 3) -> np.ndarray:
    """Bone pairs at least ``min_distance`` apart in the kinematic tree."""
    dist = tree_distance(np.asarray(parents))
    i, j = np.nonzero(np.triu(dist >= min_distance, k=1))
    return np.column_stack([i, j])


def _body_parents():
    from .geometry import load_template
    return load_template("male").parents


def segment_distance(a1, b1, a2, b2):
    """Closest points between segments; returns (distance, s, t) per row."""
    d1 = b1 - a1
    d2 = b2 - a2
    r = a1 - a2
    a = np.einsum("ij,ij->i", d1, d1)
    e = np.einsum("ij,ij->i", d2, d2)
    f = np.einsum("ij,ij->i", d2, r)
    c = np.einsum("ij,ij->i", d1, r)
    b = np.einsum("ij,ij->i", d1, d2)
    denom = a * e - b * b
    safe_a = np.where(a > 0, a, 1.0)
    safe_e = np.where(e > 0, e, 1.0)
    s = np.where(denom > 1e-12 * a * e, np.clip((b * f - c * e) / np.where(denom > 0, denom, 1.0), 0, 1), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0, np.clip(-c / safe_a, 0, 1), np.where(t > 1, np.clip((b - c) / safe_a, 0, 1), s))
    t = np.clip(t, 0, 1)
    p = a1 + s[:, None] * d1
    q = a2 + t[:, None] * d2
    return np.linalg.norm(p - q, axis=1), s, t


def interpenetration_residuals(caps: CapsuleSet, pairs: np.ndarray | None = None) -> Residuals:
    """Clamped capsule overlap ``max(0, r_a + r_b - d)`` for every listed pair.

    The Jacobian is taken through the capsule Jacobians when the set carries
    them, otherwise w.r.t. the raw capsule parameters ``[a, b, radius]``.
    """
    if pairs is None:
        pairs = non_adjacent_pairs(_body_parents())
        pairs = pairs[np.isin(pairs, caps.bone).all(axis=1)]
        lookup = {b: i for i, b in enumerate(caps.bone)}
        pairs = np.array([[lookup[i], lookup[j]] for i, j in pairs], dtype=int).reshape(-1, 2)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    dist, s, t = segment_distance(caps.a[i], caps.b[i], caps.a[j], caps.b[j])
    overlap = caps.radius[i] + caps.radius[j] - dist
    active = overlap > 0
    r = np.where(active, overlap, 0.0)

    p = caps.a[i] + s[:, None] * (caps.b[i] - caps.a[i])
    q = caps.a[j] + t[:, None] * (caps.b[j] - caps.a[j])
    n = np.divide(p - q, dist[:, None], out=np.zeros_like(p), where=dist[:, None] > 0)
    # d(overlap) = dr_i + dr_j - dd, dd = n.(dp - dq)
    ga_i = -(1 - s)[:, None] * n
    gb_i = -s[:, None] * n
    ga_j = (1 - t)[:, None] * n
    gb_j = t[:, None] * n
    m = len(caps)
    if caps.da is not None:
        J = (np.einsum("pi,pik->pk", ga_i, caps.da[i]) + np.einsum("pi,pik->pk", gb_i, caps.db[i])
             + np.einsum("pi,pik->pk", ga_j, caps.da[j]) + np.einsum("pi,pik->pk", gb_j, caps.db[j])
             + caps.dr[i] + caps.dr[j])
    else:
        J = np.zeros((len(pairs), 7 * m))
        rows = np.arange(len(pairs))
        for idx, ga, gb in ((i, ga_i, gb_i), (j, ga_j, gb_j)):
            for c in range(3):
                J[rows, 3 * idx + c] += ga[:, c]
                J[rows, 3 * m + 3 * idx + c] += gb[:, c]
            J[rows, 6 * m + idx] += 1.0
    J = J * active[:, None]
    return Residuals(r, J)


def interpenetration_cost(caps: CapsuleSet, pairs: np.ndarray | None = None) -> CostReport:
    return interpenetration_residuals(caps, pairs).report("interpenetration")


# -- silhouette coverage -----------------------------------------------------

@dataclass(frozen=True)
class CoverageConfig:
    a: float = 0.7
    spacing: int = 2
    # differentiate S_M C_I by letting model pixels move with their surface point
    follow_surface: bool = True

    def __post_init__(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError("coverage weight a must lie in [0, 1]")
        if int(self.spacing) < 1:
            raise ValueError("grid spacing must be >= 1")


def chamfer_map(mask: np.ndarray) -> np.ndarray:
    """Euclidean distance of every pixel to the nearest silhouette pixel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, float(mask.shape[0] + mask.shape[1]))
    return ndimage.distance_transform_edt(~mask)


def _grid_axis(n: int, spacing: int):
    nodes = int(np.ceil((n - 1) / spacing)) + 1
    pix = np.arange(n)
    i0 = np.minimum(pix // spacing, max(nodes - 2, 0))
    frac = (pix - i0 * spacing) / spacing
    i1 = np.minimum(i0 + 1, nodes - 1)
    return nodes, i0, i1, frac


@dataclass(frozen=True, eq=False)
class ProjectedCapsules:
    A: np.ndarray     # (N, 2) projected endpoints
    B: np.ndarray
    rho_a: np.ndarray  # projected radii at the endpoints, px
    rho_b: np.ndarray
    dA: np.ndarray | None = None  # (N, 2, P)
    dB: np.ndarray | None = None
    drho_a: np.ndarray | None = None  # (N, P)
    drho_b: np.ndarray | None = None


def project_capsules(caps: CapsuleSet, cam: Camera) -> ProjectedCapsules:
    A, za = cam.project_world(caps.a)
    B, zb = cam.project_world(caps.b)
    rho_a = cam.focal * caps.radius / za
    rho_b = cam.focal * caps.radius / zb
    if caps.da is None:
        return ProjectedCapsules(A, B, rho_a, rho_b)
    pa = cam.projection_jacobian(caps.a)
    pb = cam.projection_jacobian(caps.b)
    dA = pa @ caps.da
    dB = pb @ caps.db
    rz = cam.rotation[2]
    drho_a = (cam.focal / za)[:, None] * caps.dr - (rho_a / za)[:, None] * np.einsum("i,nip->np", rz, caps.da)
    drho_b = (cam.focal / zb)[:, None] * caps.dr - (rho_b / zb)[:, None] * np.einsum("i,nip->np", rz, caps.db)
    return ProjectedCapsules(A, B, rho_a, rho_b, dA, dB, drho_a, drho_b)


def _capsule_signed_distance(q, pc: ProjectedCapsules):
    """Signed distance of points q (M, 2) to every tapered 2D capsule, (M, N)."""
    D = pc.B - pc.A
    M = np.einsum("ij,ij->i", D, D)
    e = q[:, None, :] - pc.A[None]
    t_raw = np.einsum("mnj,nj->mn", e, D) / np.where(M > 0, M, 1.0)
    t = np.clip(t_raw, 0.0, 1.0)
    diff = e - t[:, :, None] * D[None]
    dist = np.linalg.norm(diff, axis=2)
    rho = pc.rho_a + t * (pc.rho_b - pc.rho_a)
    return dist - rho, t, (t_raw > 0) & (t_raw < 1) & (M > 0), diff, dist


@dataclass(frozen=True, eq=False)
class ModelDistanceGrid:
    """Capsule-based model distance map sampled on a grid and bilinearly interpolated."""
    spacing: int
    node_x: np.ndarray   # pixel column of every node column
    node_y: np.ndarray
    signed: np.ndarray   # (ny, nx) signed distance at nodes
    owner: np.ndarray    # (ny, nx) nearest capsule
    interpolated: np.ndarray  # (H, W) signed, interpolated
    caps: ProjectedCapsules
    _axes: tuple

    @property
    def values(self) -> np.ndarray:
        return np.maximum(self.interpolated, 0.0)

    def pixel_weights(self, pixels: np.ndarray):
        """Node indices (M, 4) and bilinear weights (M, 4) for flat pixel ids."""
        (nx, ix0, ix1, fx), (ny, iy0, iy1, fy), width = self._axes
        y, x = np.divmod(np.asarray(pixels), width)
        idx = np.stack([iy0[y] * nx + ix0[x], iy0[y] * nx + ix1[x],
                        iy1[y] * nx + ix0[x], iy1[y] * nx + ix1[x]], axis=1)
        w = np.stack([(1 - fy[y]) * (1 - fx[x]), (1 - fy[y]) * fx[x],
                      fy[y] * (1 - fx[x]), fy[y] * fx[x]], axis=1)
        return idx, w

    def node_jacobian(self, nodes: np.ndarray) -> np.ndarray:
        """d(signed node value)/d params for flat node ids, (M, P)."""
        pc = self.caps
        if pc.dA is None:
            raise ValueError("capsules were projected without Jacobians")
        nodes = np.asarray(nodes)
        iy, ix = np.divmod(nodes, len(self.node_x))
        q = np.column_stack([self.node_x[ix] + 0.5, self.node_y[iy] + 0.5])
        c = self.owner.reshape(-1)[nodes]
        A, B = pc.A[c], pc.B[c]
        D = B - A
        M = np.einsum("ij,ij->i", D, D)
        e = q - A
        t_raw = np.einsum("ij,ij->i", e, D) / np.where(M > 0, M, 1.0)
        t = np.clip(t_raw, 0.0, 1.0)
        interior = (t_raw > 0) & (t_raw < 1) & (M > 0)
        diff = e - t[:, None] * D
        dist = np.linalg.norm(diff, axis=1)
        n = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
        drho_dt = pc.rho_b[c] - pc.rho_a[c]
        safe = np.where(M > 0, M, 1.0)[:, None]
        dt_dA = np.where(interior[:, None], (-D - e + 2 * t[:, None] * D) / safe, 0.0)
        dt_dB = np.where(interior[:, None], (e - 2 * t[:, None] * D) / safe, 0.0)
        gA = -(1 - t)[:, None] * n - drho_dt[:, None] * dt_dA
        gB = -t[:, None] * n - drho_dt[:, None] * dt_dB
        return (np.einsum("mi,mip->mp", gA, pc.dA[c]) + np.einsum("mi,mip->mp", gB, pc.dB[c])
                - (1 - t)[:, None] * pc.drho_a[c] - t[:, None] * pc.drho_b[c])


def model_distance_grid(caps: CapsuleSet, cam: Camera, spacing: int) -> ModelDistanceGrid:
    """Approximate model Chamfer map from the projected capsules.

    Node values are signed (negative inside a capsule); interpolation is done
    on the signed values and the map is clamped at zero afterwards.
    """
    spacing = int(spacing)
    if spacing < 1:
        raise ValueError("grid spacing must be >= 1")
    pc = project_capsules(caps, cam)
    ax = _grid_axis(cam.width, spacing)
    ay = _grid_axis(cam.height, spacing)
    node_x = np.arange(ax[0]) * spacing
    node_y = np.arange(ay[0]) * spacing
    gx, gy = np.meshgrid(node_x + 0.5, node_y + 0.5)
    q = np.column_stack([gx.ravel(), gy.ravel()])
    sd = _capsule_signed_distance(q, pc)[0]
    owner = np.argmin(sd, axis=1)
    signed = sd[np.arange(len(q)), owner].reshape(ay[0], ax[0])
    owner = owner.reshape(ay[0], ax[0])
    (_, ix0, ix1, fx), (_, iy0, iy1, fy) = ax, ay
    top = signed[iy0][:, ix0] * (1 - fx) + signed[iy0][:, ix1] * fx
    bottom = signed[iy1][:, ix0] * (1 - fx) + signed[iy1][:, ix1] * fx
    interp = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return ModelDistanceGrid(spacing, node_x, node_y, signed, owner, interp, pc,
                             (ax, ay, cam.width))


def dense_model_distance(caps: CapsuleSet, cam: Camera) -> np.ndarray:
    """Clamped capsule distance evaluated at every pixel, no grid."""
    pc = project_capsules(caps, cam)
    gx, gy = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    q = np.column_stack([gx.ravel(), gy.ravel()])
    sd = _capsule_signed_distance(q, pc)[0].min(axis=1)
    return np.maximum(sd, 0.0).reshape(cam.height, cam.width)


def surface_point_jacobian(vbuf: VisibilityBuffer, skel: Skeleton, mesh: PosedMesh, cam: Camera,
                           pixels: np.ndarray) -> np.ndarray:
    """d(projection of the surface point seen at each pixel)/d[theta, sigma], (N, 2, 75).

    The point is pinned to its triangle and barycentric coordinates.
    """
    pixels = np.asarray(pixels)
    verts = skel.faces[vbuf.tri.reshape(-1)[pixels]]
    bary = vbuf.bary.reshape(-1, 3)[pixels]
    used, local = np.unique(verts, return_inverse=True)
    du = _projected_vertex_jacobian(skel, mesh, cam, used)
    return np.einsum("nk,nkap->nap", bary, du[local.reshape(verts.shape)])


def coverage_residuals(S_I: np.ndarray, C_I: np.ndarray, S_M: np.ndarray, caps: CapsuleSet,
                       cam: Camera, cfg: CoverageConfig, jacobian: bool = True,
                       surface=None) -> Residuals:
    """Residuals ``a S_M C_I + (1-a) S_I C_M`` on every pixel where they can be nonzero.

    ``S_M`` enters as a fixed indicator.  The ``C_M`` part is differentiated
    through the capsule grid.  The ``S_M C_I`` part gets a derivative only
    when ``surface(pixels) -> (N, 2, P)`` is given (and ``cfg.follow_surface``):
    each model pixel then slides with its surface point over ``C_I``.
    """
    S_I = np.asarray(S_I, dtype=bool)
    S_M = np.asarray(S_M, dtype=bool)
    C_I = np.asarray(C_I, dtype=float)
    shape = (cam.height, cam.width)
    if S_I.shape != shape or C_I.shape != shape or S_M.shape != shape:
        raise InvalidInputError(f"silhouette inputs must be {shape}, got {S_I.shape}/{C_I.shape}/{S_M.shape}")
    grid = model_distance_grid(caps, cam, cfg.spacing)
    outside = np.flatnonzero(S_M & ~S_I)
    image_pix = np.flatnonzero(S_I & (grid.interpolated > 0))
    r = np.concatenate([cfg.a * C_I.reshape(-1)[outside],
                        (1 - cfg.a) * grid.interpolated.reshape(-1)[image_pix]])
    # S_M C_I and S_I C_M never overlap: C_I vanishes on S_I
    J = None
    if jacobian:
        n_par = caps.da.shape[2]
        J = np.zeros((len(r), n_par))
        if len(outside) and surface is not None and cfg.follow_surface:
            gy, gx = np.gradient(C_I)
            grad = np.column_stack([gx.reshape(-1)[outside], gy.reshape(-1)[outside]])
            du = surface(outside)
            J[:len(outside), :du.shape[2]] = cfg.a * np.einsum("na,nap->np", grad, du)
        if len(image_pix):
            idx, w = grid.pixel_weights(image_pix)
            nodes, inv = np.unique(idx, return_inverse=True)
            node_jac = grid.node_jacobian(nodes)
            inv = inv.reshape(idx.shape)
            rows = np.einsum("mk,mkp->mp", w, node_jac[inv])
            J[len(outside):] = (1 - cfg.a) * rows
    return Residuals(r, J)


def coverage_cost(S_I: np.ndarray, C_I: np.ndarray, state: ModelState, skel: Skeleton,
                  cam: Camera, cfg: CoverageConfig, with_shape: bool = False,
                  silhouette: np.ndarray | None = None) -> CostReport:
    """Silhouette coverage over ``(theta, sigma[, beta])``.

    ``silhouette`` overrides the rendered model silhouette (held fixed, and
    then the ``S_M C_I`` part carries no derivative).
    """
    T = forward_kinematics(skel, state.theta, state.sigma)
    caps = capsule_jacobian(skel, T, with_shape=with_shape)
    surface = None
    if silhouette is None:
        mesh = pose_mesh(state, skel, cam)
        vbuf = visibility(mesh, skel, cam)
        silhouette = vbuf.covered
        surface = lambda px: surface_point_jacobian(vbuf, skel, mesh, cam, px)
    return coverage_residuals(S_I, C_I, silhouette, caps, cam, cfg, surface=surface).report("coverage")


# -- flow matching -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowFrame:
    """Everything the flow term needs about one (cur, prev) state pair."""
    cur: PosedMesh
    prev: PosedMesh
    vbuf: VisibilityBuffer


def flow_frame(state_i: ModelState, state_prev: ModelState, skel: Skeleton, cam: Camera,
               vbuf: VisibilityBuffer | None = None) -> FlowFrame:
    cur = pose_mesh(state_i, skel, cam)
    prev = pose_mesh(state_prev, skel, cam)
    if vbuf is None:
        vbuf = visibility(cur, skel, cam)
    return FlowFrame(cur, prev, vbuf)


def _check_pyramid(F_o: FlowPyramid, cam: Camera, levels):
    lvl0 = F_o[0]
    if (lvl0.width, lvl0.height) != cam.size:
        raise InvalidInputError(f"observed flow is {lvl0.width}x{lvl0.height}, camera is {cam.width}x{cam.height}")
    levels = range(len(F_o)) if levels is None else levels
    if any(lv < 0 or lv >= len(F_o) for lv in levels):
        raise InvalidInputError("pyramid level out of range")
    return list(levels)


def _projected_vertex_jacobian(skel, mesh: PosedMesh, cam, index):
    omega = pose_axes(skel, mesh.transforms)
    vj = vertex_jacobian(skel, mesh.transforms, index, omega)
    return cam.projection_jacobian(mesh.vertices[index]) @ vj


def flow_residuals(F_o: FlowPyramid, frame: FlowFrame, skel: Skeleton, cam: Camera,
                   levels=None, roles=("cur",), exact: bool = True,
                   jacobian: bool = True) -> Residuals:
    """Per-level flow differences on pixels valid in both pyramids.

    ``roles`` selects the states differentiated: ``"cur"`` gives 75 columns
    for frame i, ``("cur", "prev")`` gives 150 (frame i then frame i-1).
    """
    levels = _check_pyramid(F_o, cam, levels)
    rendered = backward_flow(frame.vbuf, skel.faces, frame.cur.uv, frame.prev.uv)
    op = PyramidOperator(rendered.valid, len(F_o))
    values = op.apply(rendered.vectors)
    sel = [np.flatnonzero(op.masks[lv] & F_o[lv].valid) for lv in levels]
    r = np.concatenate([(values[lv] - F_o[lv].vectors).reshape(-1, 2)[s].reshape(-1)
                        for lv, s in zip(levels, sel)])
    if not jacobian:
        return Residuals(r)

    fj = flow_jacobian_from(frame.vbuf, skel.faces, frame.cur.uv, frame.prev.uv, exact)
    used = np.unique(fj.verts)
    remap = np.zeros(len(skel.vertices), dtype=int)
    remap[used] = np.arange(len(used))
    local = remap[fj.verts]
    blocks = []
    for role in roles:
        mesh, coef = (frame.cur, fj.cur) if role == "cur" else (frame.prev, fj.prev)
        du = _projected_vertex_jacobian(skel, mesh, cam, used)  # (U, 2, 75)
        dF = np.einsum("nkab,nkbp->nap", coef, du[local])       # (N, 2, 75)
        blocks.append(dF.reshape(len(fj.pixels), 2 * N_MOTION))
    cols = np.concatenate(blocks, axis=1) if len(blocks) > 1 else blocks[0]
    per_level = op.apply_sparse(fj.pixels, cols, levels)
    rows = []
    for lv, s in zip(levels, sel):
        vals = per_level[lv][np.searchsorted(fj.pixels, s)] if lv == 0 else per_level[lv][s]
        rows.append(vals.reshape(len(s), len(roles), 2, N_MOTION).transpose(0, 2, 1, 3)
                    .reshape(2 * len(s), len(roles) * N_MOTION))
    return Residuals(r, np.concatenate(rows))


def flow_cost(F_o: FlowPyramid, state_i: ModelState, state_prev: ModelState, skel: Skeleton,
              cam: Camera, levels=None, roles=("cur",), exact: bool = True,
              vbuf: VisibilityBuffer | None = None) -> CostReport:
    """Flow matching summed over pyramid levels; gradient by the adjoint route."""
    frame = flow_frame(state_i, state_prev, skel, cam, vbuf)
    levels = _check_pyramid(F_o, cam, levels)
    rendered = backward_flow(frame.vbuf, skel.faces, frame.cur.uv, frame.prev.uv)
    op = PyramidOperator(rendered.valid, len(F_o))
    values = op.apply(rendered.vectors)
    value = 0.0
    grads = [np.zeros_like(v) for v in values]
    for lv in levels:
        both = op.masks[lv] & F_o[lv].valid
        diff = (values[lv] - F_o[lv].vectors) * both[:, :, None]
        value += float(np.sum(diff * diff))
        grads[lv] = 2.0 * diff
    g0 = op.adjoint(grads).reshape(-1, 2)

    fj = flow_jacobian_from(frame.vbuf, skel.faces, frame.cur.uv, frame.prev.uv, exact)
    gpix = g0[fj.pixels]
    parts = []
    for role in roles:
        mesh, coef = (frame.cur, fj.cur) if role == "cur" else (frame.prev, fj.prev)
        g_uv = np.zeros((len(skel.vertices), 2))
        np.add.at(g_uv, fj.verts, np.einsum("na,nkab->nkb", gpix, coef))
        used = np.flatnonzero(np.any(g_uv != 0, axis=1))
        du = _projected_vertex_jacobian(skel, mesh, cam, used)
        parts.append(np.einsum("ua,uap->p", g_uv[used], du))
    return CostReport(value, np.concatenate(parts) if parts else np.zeros(0), {"flow": value})


# -- weighted sum ------------------------------------------------------------

def total_cost(terms: dict[str, CostReport], weights: dict[str, float]) -> CostReport:
    """Weighted sum of cost terms; a missing weight counts as zero.

    Gradients over a leading sub-block (theta only, for bounds and
    smoothness) are zero-padded to the longest block, e.g. ``[theta, sigma]``.
    """
    for name, lam in weights.items():
        if lam < 0:
            raise ValueError(f"weight for {name!r} is negative")
    n = max((len(rep.gradient) for rep in terms.values()), default=0)
    value = 0.0
    grad = np.zeros(n)
    breakdown = {}
    for name, rep in terms.items():
        lam = float(weights.get(name, 0.0))
        breakdown[name] = rep.value
        value += lam * rep.value
        g = np.asarray(rep.gradient, dtype=float)
        grad[:len(g)] += lam * g
    return CostReport(value, grad, breakdown)
