"""Procrustes alignment and 3D/2D joint errors."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..geometry import EVAL_JOINT_NAMES, JOINT_NAMES, ModelState, build_skeleton, eval_joints, forward_kinematics
from ..raster import Camera


class DegenerateInputError(ValueError):
    pass


class EmptyEvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls(np.eye(3), np.zeros(3), 1.0)


def procrustes_align(A: np.ndarray, B: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity mapping the rows of A onto the rows of B."""
    A = np.asarray(A, dtype=float).reshape(-1, 3)
    B = np.asarray(B, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError(f"point sets differ in shape: {A.shape} vs {B.shape}")
    if len(A) < 3:
        raise DegenerateInputError("at least three point pairs are needed")
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    Ac, Bc = A - mu_a, B - mu_b
    sv = np.linalg.svd(Ac, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-12 * sv[0]:
        raise DegenerateInputError("source points are collinear or coincident")
    U, S, Vt = np.linalg.svd(Bc.T @ Ac)
    d = np.ones(3)
    d[2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = (U * d) @ Vt
    s = float(np.sum(S * d) / np.sum(Ac * Ac)) if with_scale else 1.0
    return SimilarityTransform(R, mu_b - s * R @ mu_a, s)


@lru_cache(maxsize=32)
def _skeleton(gender: str, beta: bytes):
    return build_skeleton(gender, np.frombuffer(beta))


def state_joints(state: ModelState) -> np.ndarray:
    """The 13 evaluation joints of a state, metres."""
    skel = _skeleton(state.gender, np.asarray(state.beta, dtype=float).tobytes())
    return eval_joints(forward_kinematics(skel, state.theta, state.sigma))


def _stack(states) -> np.ndarray:
    return np.array([state_joints(s) for s in states])


def _check(est, gt):
    if len(est) != len(gt):
        raise ValueError(f"frame counts differ: {len(est)} estimated vs {len(gt)} ground truth")
    if len(est) == 0:
        raise EmptyEvaluationError("no frames to evaluate")


def joint_error_local(est: list[ModelState], gt: list[ModelState], with_scale: bool = True,
                      align: bool = True) -> tuple[np.ndarray, float]:
    """Per-frame aligned mean joint error and its sequence mean, centimetres."""
    _check(est, gt)
    E, G = _stack(est), _stack(gt)
    per_frame = np.empty(len(E))
    for i, (e, g) in enumerate(zip(E, G)):
        if align:
            e = procrustes_align(e, g, with_scale).apply(e)
        per_frame[i] = np.mean(np.linalg.norm(e - g, axis=1)) * 100.0
    return per_frame, float(per_frame.mean())


def joint_error_global(est: list[ModelState], gt: list[ModelState], with_scale: bool = True) -> float:
    """Mean joint error after one alignment over all frames, centimetres."""
    _check(est, gt)
    E, G = _stack(est).reshape(-1, 3), _stack(gt).reshape(-1, 3)
    aligned = procrustes_align(E, G, with_scale).apply(E)
    return float(np.mean(np.linalg.norm(aligned - G, axis=1)) * 100.0)


def joint_error_2d(est: list[ModelState], gt2d: list[dict | None], cam: Camera) -> float:
    """Mean pixel distance over the joints given per frame; ``None`` skips a frame."""
    if len(est) != len(gt2d):
        raise ValueError("frame counts differ")
    dists = []
    for st, marks in zip(est, gt2d):
        if not marks:
            continue
        skel = _skeleton(st.gender, np.asarray(st.beta, dtype=float).tobytes())
        T = forward_kinematics(skel, st.theta, st.sigma)
        names = [n for n in marks if n in JOINT_NAMES]
        if not names:
            continue
        uv, _ = cam.project_world(T.positions[[JOINT_NAMES.index(n) for n in names]])
        ref = np.array([marks[n] for n in names], dtype=float)
        dists.extend(np.linalg.norm(uv - ref, axis=1))
    if not dists:
        raise EmptyEvaluationError("no ground-truth joints overlap the estimate")
    return float(np.mean(dists))


def inter_frame_displacement(states: list[ModelState]) -> np.ndarray:
    """Largest joint displacement between consecutive frames, metres, per frame pair."""
    J = _stack(states)
    return np.linalg.norm(np.diff(J, axis=0), axis=2).max(axis=1)


def evaluation_report(est: list[ModelState], gt: list[ModelState]) -> dict[str, float]:
    out = {}
    for label, scale in (("scaled", True), ("rigid", False)):
        _, local = joint_error_local(est, gt, scale)
        out[f"local_{label}_cm"] = local
        out[f"global_{label}_cm"] = joint_error_global(est, gt, scale)
    out["eval_joints"] = float(len(EVAL_JOINT_NAMES))
    return out
