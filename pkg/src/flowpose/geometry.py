"""Parametric capsule-skinned humanoid.

A 24-joint skeleton whose bone offsets and capsule radii are affine in ten
shape coefficients, a coarse tube mesh generated from the capsules, linear
blend skinning, and the Jacobians of joints, capsules and vertices with
respect to the parameter vector ``[theta (72), sigma (3), beta (10)]``.
"""
from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass
from importlib import resources
from typing import Iterator, NamedTuple, Sequence

import numpy as np

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
    "left_hand", "right_hand",
)
N_JOINTS = 24
N_POSE = 3 * N_JOINTS
N_SHAPE = 10
GENDERS = ("female", "male")

# column layout of every parameter Jacobian
POSE = slice(0, N_POSE)
TRANS = slice(N_POSE, N_POSE + 3)
SHAPE = slice(N_POSE + 3, N_POSE + 3 + N_SHAPE)
N_MOTION = N_POSE + 3
N_PARAMS = N_MOTION + N_SHAPE

# joints that can be marked in the first frame
ANNOTATED_JOINTS = (
    "left_hip", "right_hip", "left_knee", "right_knee", "left_ankle",
    "right_ankle", "left_shoulder", "right_shoulder", "left_elbow",
    "right_elbow", "left_wrist", "right_wrist",
)
# the twelve annotated joints plus the head
EVAL_JOINT_NAMES = (
    "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip", "left_knee",
    "right_knee", "left_ankle", "right_ankle",
)
EVAL_JOINTS = np.array([JOINT_NAMES.index(n) for n in EVAL_JOINT_NAMES])

MESH_AROUND = 10
MESH_RINGS = 4
# tube radius relative to the capsule, keeps the mesh inside its proxy
MESH_INSET = 0.92
PARENT_BLEND = 0.25


class InvalidParameterError(ValueError):
    pass


class TemplateFormatError(ValueError):
    pass


# -- rotations ---------------------------------------------------------------

def hat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _series(phi: np.ndarray):
    """sin(x)/x, (1-cos x)/x^2 and (x-sin x)/x^3 with small-angle expansions."""
    small = phi < 1e-4
    p = np.where(small, 1.0, phi)
    p2 = phi * phi
    a = np.where(small, 1.0 - p2 / 6.0, np.sin(p) / p)
    b = np.where(small, 0.5 - p2 / 24.0, (1.0 - np.cos(p)) / p**2)
    c = np.where(small, 1.0 / 6.0 - p2 / 120.0, (p - np.sin(p)) / p**3)
    return a, b, c


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=float)
    phi = np.linalg.norm(aa, axis=-1)
    a, b, _ = _series(phi)
    k = hat(aa)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def left_jacobian(aa: np.ndarray) -> np.ndarray:
    """J such that dR R^T = hat(J dtheta) for R = rodrigues(theta)."""
    aa = np.asarray(aa, dtype=float)
    phi = np.linalg.norm(aa, axis=-1)
    _, b, c = _series(phi)
    k = hat(aa)
    return np.eye(3) + b[..., None, None] * k + c[..., None, None] * (k @ k)


def canonical_axis_angle(theta: np.ndarray) -> np.ndarray:
    """Rewrite every 3-vector of ``theta`` with an equivalent one of norm < pi."""
    aa = np.asarray(theta, dtype=float).reshape(-1, 3)
    phi = np.linalg.norm(aa, axis=1)
    wrapped = np.mod(phi, 2 * np.pi)
    wrapped = np.where(wrapped >= np.pi, wrapped - 2 * np.pi, wrapped)
    scale = np.divide(wrapped, phi, out=np.ones_like(phi), where=phi > 0)
    return (aa * scale[:, None]).reshape(np.shape(theta))


# -- state -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelState:
    gender: str
    beta: np.ndarray
    theta: np.ndarray
    sigma: np.ndarray
    frame: int = 0

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise InvalidParameterError(f"unknown gender {self.gender!r}")
        for name, size in (("beta", N_SHAPE), ("theta", N_POSE), ("sigma", 3)):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.size != size:
                raise InvalidParameterError(f"{name} needs {size} values, got {arr.size}")
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"{name} is not finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.frame < 0:
            raise InvalidParameterError("frame index must be >= 0")

    @classmethod
    def zero(cls, gender: str = "male", frame: int = 0) -> "ModelState":
        return cls(gender, np.zeros(N_SHAPE), np.zeros(N_POSE), np.zeros(3), frame)

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)

    @property
    def motion(self) -> np.ndarray:
        """The per-frame unknowns ``[theta, sigma]``."""
        return np.concatenate([self.theta, self.sigma])

    def with_motion(self, x: np.ndarray, frame: int | None = None) -> "ModelState":
        x = np.asarray(x, dtype=float)
        return self.replace(theta=x[POSE], sigma=x[TRANS],
                            frame=self.frame if frame is None else frame)


# -- template ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BodyTemplate:
    gender: str
    parents: np.ndarray
    offsets: np.ndarray
    ends: np.ndarray
    radius: np.ndarray
    capsule_refs: tuple
    offset_basis: np.ndarray
    radius_basis: np.ndarray


def _floats(tokens: Sequence[str], lineno: int) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise TemplateFormatError(f"line {lineno}: expected numbers, got {' '.join(tokens)}")


def parse_template(text: str) -> BodyTemplate:
    idx = {n: i for i, n in enumerate(JOINT_NAMES)}
    header: dict[str, str] = {}
    parents = np.full(N_JOINTS, -2, dtype=int)
    offsets = np.zeros((N_JOINTS, 3))
    ends = np.zeros((N_JOINTS, 3))
    radius = np.full(N_JOINTS, np.nan)
    refs: list = [None] * N_JOINTS
    obasis = np.zeros((N_JOINTS, 3, N_SHAPE))
    rbasis = np.zeros((N_JOINTS, N_SHAPE))

    def joint(name, lineno):
        if name not in idx:
            raise TemplateFormatError(f"line {lineno}: unknown joint {name!r}")
        return idx[name]

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            header[key] = value
            continue
        tok = line.split()
        kind = tok[0]
        if kind == "joint" and len(tok) == 6:
            j = joint(tok[1], lineno)
            parents[j] = -1 if tok[2] == "-" else joint(tok[2], lineno)
            offsets[j] = _floats(tok[3:6], lineno)
        elif kind == "end" and len(tok) == 5:
            ends[joint(tok[1], lineno)] = _floats(tok[2:5], lineno)
        elif kind == "capsule" and len(tok) == 7:
            j = joint(tok[1], lineno)
            radius[j] = _floats(tok[2:3], lineno)[0]
            fa, fb = _floats([tok[4], tok[6]], lineno)
            refs[j] = ((tok[3], fa), (tok[5], fb))
        elif kind == "shape" and len(tok) >= 5:
            k = int(tok[1])
            if not 0 <= k < N_SHAPE:
                raise TemplateFormatError(f"line {lineno}: shape index {k} out of range")
            j = joint(tok[3], lineno)
            if tok[2] == "offset" and len(tok) == 7:
                obasis[j, :, k] = _floats(tok[4:7], lineno)
            elif tok[2] == "radius" and len(tok) == 5:
                rbasis[j, k] = _floats(tok[4:5], lineno)[0]
            else:
                raise TemplateFormatError(f"line {lineno}: bad shape entry")
        else:
            raise TemplateFormatError(f"line {lineno}: cannot parse {raw.strip()!r}")

    if header.get("version") != "1":
        raise TemplateFormatError(f"unsupported template version {header.get('version')!r}")
    gender = header.get("gender")
    if gender not in GENDERS:
        raise TemplateFormatError(f"bad gender {gender!r}")
    if np.any(parents == -2):
        missing = [JOINT_NAMES[j] for j in np.flatnonzero(parents == -2)]
        raise TemplateFormatError(f"joints missing: {missing}")
    if parents[0] != -1 or np.any(parents[1:] < 0):
        raise TemplateFormatError("joint 0 must be the only root")
    if np.any(parents[1:] >= np.arange(1, N_JOINTS)):
        raise TemplateFormatError("parents must precede their children")
    if np.any(~(radius > 0)):
        raise TemplateFormatError("every joint needs a capsule with positive radius")
    children = {j: {c for c in range(N_JOINTS) if parents[c] == j} for j in range(N_JOINTS)}
    for j, ((ra, _), (rb, _)) in enumerate(refs):
        for r in (ra, rb):
            if r in ("-", "end"):
                continue
            if r not in idx or idx[r] not in children[j]:
                raise TemplateFormatError(f"capsule of {JOINT_NAMES[j]}: {r!r} is not a child")
    return BodyTemplate(gender, parents, offsets, ends, radius, tuple(refs), obasis, rbasis)


@functools.lru_cache(maxsize=None)
def load_template(gender: str) -> BodyTemplate:
    if gender not in GENDERS:
        raise InvalidParameterError(f"unknown gender {gender!r}")
    text = resources.files("flowpose.assets").joinpath(f"{gender}.txt").read_text()
    return parse_template(text)


# -- skeleton ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Skeleton:
    gender: str
    beta: np.ndarray
    parents: np.ndarray
    offsets: np.ndarray
    ends: np.ndarray
    rest_joints: np.ndarray
    capsule_radius: np.ndarray
    capsule_start: np.ndarray
    capsule_end: np.ndarray
    vertices: np.ndarray
    weights: np.ndarray
    faces: np.ndarray
    vertex_bone: np.ndarray
    offset_basis: np.ndarray
    radius_basis: np.ndarray
    capsule_start_basis: np.ndarray
    capsule_end_basis: np.ndarray
    ancestors: np.ndarray  # [b, k]: k is b or an ancestor of b

    @property
    def names(self) -> tuple[str, ...]:
        return JOINT_NAMES

    @property
    def height(self) -> float:
        """Head top to sole of the left foot, at rest."""
        h, f = JOINT_NAMES.index("head"), JOINT_NAMES.index("left_foot")
        top = self.rest_joints[h, 1] + self.ends[h, 1] + self.capsule_radius[h]
        sole = self.rest_joints[f, 1] - self.capsule_radius[f]
        return float(top - sole)


def _ancestor_matrix(parents: np.ndarray) -> np.ndarray:
    anc = np.zeros((len(parents), len(parents)), dtype=bool)
    for j in range(len(parents)):
        anc[j, j] = True
        if parents[j] >= 0:
            anc[j] |= anc[parents[j]]
    return anc


def _rest_positions(parents, offsets):
    pos = np.zeros_like(offsets)
    for j, p in enumerate(parents):
        pos[j] = offsets[j] if p < 0 else pos[p] + offsets[j]
    return pos


def _tube(a, b, rho):
    """Closed capsule surface around segment a-b: rings from the a pole to the b pole."""
    axis = b - a
    d = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    phi = 2 * np.pi * np.arange(MESH_AROUND) / MESH_AROUND
    circle = np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w
    c45 = np.sqrt(0.5)
    rings = [a - d * rho * c45 + rho * c45 * circle]
    rings += [a + t * axis + rho * circle for t in np.linspace(0.0, 1.0, MESH_RINGS)]
    rings.append(b + d * rho * c45 + rho * c45 * circle)
    verts = np.vstack([a - d * rho] + rings + [b + d * rho])
    n = MESH_AROUND
    faces = []
    ring0 = lambda r: 1 + r * n  # noqa: E731
    for i in range(n):
        j = (i + 1) % n
        faces.append((0, ring0(0) + j, ring0(0) + i))
        for r in range(len(rings) - 1):
            p, q = ring0(r), ring0(r + 1)
            faces.append((p + i, p + j, q + i))
            faces.append((p + j, q + j, q + i))
        last = ring0(len(rings) - 1)
        faces.append((len(verts) - 1, last + i, last + j))
    # pole, cap ring and first tube ring sit at the a end
    start_region = np.zeros(len(verts), dtype=bool)
    start_region[: 1 + 2 * n] = True
    return verts, np.array(faces), start_region


def build_skeleton(gender: str, beta: np.ndarray | None = None) -> Skeleton:
    """Evaluate the template for shape ``beta``; ``beta = 0`` gives the template."""
    t = load_template(gender)
    beta = np.zeros(N_SHAPE) if beta is None else np.array(beta, dtype=float).reshape(-1)
    if beta.size != N_SHAPE or not np.all(np.isfinite(beta)):
        raise InvalidParameterError("beta must hold 10 finite values")
    offsets = t.offsets + t.offset_basis @ beta
    radius = t.radius + t.radius_basis @ beta
    if np.any(radius <= 0):
        raise InvalidParameterError("shape gives a non-positive capsule radius")

    idx = {n: i for i, n in enumerate(JOINT_NAMES)}
    start = np.zeros((N_JOINTS, 3))
    end = np.zeros((N_JOINTS, 3))
    start_b = np.zeros((N_JOINTS, 3, N_SHAPE))
    end_b = np.zeros((N_JOINTS, 3, N_SHAPE))
    for j, refs in enumerate(t.capsule_refs):
        for (ref, frac), vec, basis in zip(refs, (start, end), (start_b, end_b)):
            if ref == "end":
                vec[j] = frac * t.ends[j]
            elif ref != "-":
                vec[j] = frac * offsets[idx[ref]]
                basis[j] = frac * t.offset_basis[idx[ref]]

    rest = _rest_positions(t.parents, offsets)
    verts, faces, weights, owner = [], [], [], []
    count = 0
    for j in range(N_JOINTS):
        v, f, start_region = _tube(rest[j] + start[j], rest[j] + end[j], MESH_INSET * radius[j])
        w = np.zeros((len(v), N_JOINTS))
        w[:, j] = 1.0
        p = t.parents[j]
        if p >= 0 and not np.any(start[j]):
            w[start_region, j] = 1.0 - PARENT_BLEND
            w[start_region, p] = PARENT_BLEND
        verts.append(v)
        faces.append(f + count)
        weights.append(w)
        owner.append(np.full(len(v), j))
        count += len(v)

    return Skeleton(
        gender=gender,
        beta=beta,
        parents=t.parents.copy(),
        offsets=offsets,
        ends=t.ends.copy(),
        rest_joints=rest,
        capsule_radius=radius,
        capsule_start=start,
        capsule_end=end,
        vertices=np.vstack(verts),
        weights=np.vstack(weights),
        faces=np.vstack(faces).astype(np.int64),
        vertex_bone=np.concatenate(owner),
        offset_basis=t.offset_basis.copy(),
        radius_basis=t.radius_basis.copy(),
        capsule_start_basis=start_b,
        capsule_end_basis=end_b,
        ancestors=_ancestor_matrix(t.parents),
    )


# -- kinematics --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JointTransforms:
    rotations: np.ndarray  # world rotation of every joint frame
    positions: np.ndarray
    local: np.ndarray      # rodrigues(theta_j)
    theta: np.ndarray
    sigma: np.ndarray


def forward_kinematics(skel: Skeleton, theta: np.ndarray, sigma: np.ndarray) -> JointTransforms:
    theta = np.asarray(theta, dtype=float).reshape(N_JOINTS, 3)
    sigma = np.asarray(sigma, dtype=float).reshape(3)
    local = rodrigues(theta)
    rot = np.empty((N_JOINTS, 3, 3))
    pos = np.empty((N_JOINTS, 3))
    for j, p in enumerate(skel.parents):
        if p < 0:
            rot[j] = local[j]
            pos[j] = sigma + skel.offsets[j]
        else:
            rot[j] = rot[p] @ local[j]
            pos[j] = pos[p] + rot[p] @ skel.offsets[j]
    return JointTransforms(rot, pos, local, theta.reshape(-1).copy(), sigma.copy())


def skin_vertices(skel: Skeleton, T: JointTransforms) -> np.ndarray:
    """Linear blend skinning of the rest mesh."""
    trans = T.positions - np.einsum("bij,bj->bi", T.rotations, skel.rest_joints)
    blended = np.einsum("vb,bij->vij", skel.weights, T.rotations)
    return np.einsum("vij,vj->vi", blended, skel.vertices) + skel.weights @ trans


class Capsule(NamedTuple):
    a: np.ndarray
    b: np.ndarray
    radius: float
    bone: int


@dataclass(frozen=True, eq=False)
class CapsuleSet:
    a: np.ndarray
    b: np.ndarray
    radius: np.ndarray
    bone: np.ndarray
    # optional parameter Jacobians, (N, 3, P) and (N, P)
    da: np.ndarray | None = None
    db: np.ndarray | None = None
    dr: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.radius)

    def __iter__(self) -> Iterator[Capsule]:
        for i in range(len(self)):
            yield Capsule(self.a[i], self.b[i], float(self.radius[i]), int(self.bone[i]))

    @classmethod
    def from_capsules(cls, caps: Sequence[Capsule]) -> "CapsuleSet":
        return cls(
            np.array([c.a for c in caps], dtype=float).reshape(-1, 3),
            np.array([c.b for c in caps], dtype=float).reshape(-1, 3),
            np.array([c.radius for c in caps], dtype=float),
            np.array([c.bone for c in caps], dtype=int),
        )


def body_capsules(skel: Skeleton, T: JointTransforms) -> CapsuleSet:
    a = T.positions + np.einsum("bij,bj->bi", T.rotations, skel.capsule_start)
    b = T.positions + np.einsum("bij,bj->bi", T.rotations, skel.capsule_end)
    return CapsuleSet(a, b, skel.capsule_radius.copy(), np.arange(N_JOINTS))


def eval_joints(T: JointTransforms) -> np.ndarray:
    return T.positions[EVAL_JOINTS].copy()


# -- parameter Jacobians -----------------------------------------------------

def pose_axes(skel: Skeleton, T: JointTransforms) -> np.ndarray:
    """World angular axes: ``omega[k, :, c]`` is dR_k R_k^T / dtheta_kc as a vector."""
    jl = left_jacobian(T.theta.reshape(N_JOINTS, 3))
    parent_rot = np.array([np.eye(3) if p < 0 else T.rotations[p] for p in skel.parents])
    return parent_rot @ jl


def _rotational_part(omega, mask, diff):
    # mask (N, 24), diff (N, 24, 3) -> (N, 3, 72)
    cols = np.cross(omega.transpose(0, 2, 1)[None], diff[:, :, None, :])  # n k c i
    cols *= mask[:, :, None, None]
    return cols.transpose(0, 3, 1, 2).reshape(len(diff), 3, N_POSE)


def attached_point_jacobian(skel: Skeleton, T: JointTransforms, bones: np.ndarray,
                            points: np.ndarray, omega: np.ndarray | None = None) -> np.ndarray:
    """d(point)/d[theta, sigma] for points rigidly attached to joint frames.

    A bone index of -1 attaches the point to the translation only.
    """
    bones = np.asarray(bones, dtype=int)
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    omega = pose_axes(skel, T) if omega is None else omega
    mask = np.where(bones[:, None] >= 0, skel.ancestors[np.maximum(bones, 0)], False)
    diff = points[:, None, :] - T.positions[None, :, :]
    jac = np.zeros((len(points), 3, N_MOTION))
    jac[:, :, POSE] = _rotational_part(omega, mask, diff)
    jac[:, :, TRANS] = np.eye(3)
    return jac


def joint_jacobian(skel: Skeleton, T: JointTransforms, with_shape: bool = False,
                   omega: np.ndarray | None = None) -> np.ndarray:
    """d(joint positions)/d params, (24, 3, 75) or (24, 3, 85) with shape."""
    jac = attached_point_jacobian(skel, T, skel.parents, T.positions, omega)
    if with_shape:
        jac = np.concatenate([jac, _joint_shape_jacobian(skel, T)], axis=2)
    return jac


def _joint_shape_jacobian(skel, T):
    parent_rot = np.array([np.eye(3) if p < 0 else T.rotations[p] for p in skel.parents])
    per_bone = parent_rot @ skel.offset_basis  # (24, 3, 10)
    return np.einsum("jk,kab->jab", skel.ancestors.astype(float), per_bone)


def capsule_jacobian(skel: Skeleton, T: JointTransforms, with_shape: bool = False,
                     omega: np.ndarray | None = None) -> CapsuleSet:
    """Body capsules carrying Jacobians of endpoints and radii."""
    caps = body_capsules(skel, T)
    bones = np.arange(N_JOINTS)
    omega = pose_axes(skel, T) if omega is None else omega
    da = attached_point_jacobian(skel, T, bones, caps.a, omega)
    db = attached_point_jacobian(skel, T, bones, caps.b, omega)
    dr = np.zeros((N_JOINTS, N_MOTION))
    if with_shape:
        dj = _joint_shape_jacobian(skel, T)
        sa = dj + T.rotations @ skel.capsule_start_basis
        sb = dj + T.rotations @ skel.capsule_end_basis
        da = np.concatenate([da, sa], axis=2)
        db = np.concatenate([db, sb], axis=2)
        dr = np.concatenate([dr, skel.radius_basis], axis=1)
    return dataclasses.replace(caps, da=da, db=db, dr=dr)


def vertex_jacobian(skel: Skeleton, T: JointTransforms, index: np.ndarray | None = None,
                    omega: np.ndarray | None = None) -> np.ndarray:
    """d(skinned vertices)/d[theta, sigma], (V, 3, 75); shape is held fixed."""
    idx = np.arange(len(skel.vertices)) if index is None else np.asarray(index)
    w = skel.weights[idx]
    local = skel.vertices[idx][:, None, :] - skel.rest_joints[None, :, :]
    per_bone = np.einsum("bij,vbj->vbi", T.rotations, local) + T.positions[None]
    anc = skel.ancestors.astype(float)
    s = w @ anc
    moment = np.einsum("vb,bk,vbi->vki", w, anc, per_bone, optimize=True)
    diff = moment - s[:, :, None] * T.positions[None]
    omega = pose_axes(skel, T) if omega is None else omega
    jac = np.zeros((len(idx), 3, N_MOTION))
    jac[:, :, POSE] = _rotational_part(omega, np.ones_like(s, dtype=bool), diff)
    jac[:, :, TRANS] = np.eye(3)
    return jac
