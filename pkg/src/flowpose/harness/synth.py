"""Scripted synthetic sequences with exact ground truth."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from ..flow import FlowField, pose_mesh, backward_flow, visibility
from ..geometry import ANNOTATED_JOINTS, JOINT_NAMES, N_JOINTS, N_POSE, N_SHAPE, ModelState, build_skeleton, forward_kinematics
from ..raster import Camera
from ..tracker import Annotation
from .io import FormatError, SequenceBundle, camera_from

DEFAULT_ROTATION = np.diag([1.0, -1.0, -1.0])  # world +y up -> image y down, camera looks along -z


@dataclass
class MotionScript:
    frames: int
    camera: Camera
    fps: float = 30.0
    gender: str = "male"
    noise: float = 0.0
    seed: int = 0
    subject: str = "synthetic"
    beta: np.ndarray = field(default_factory=lambda: np.zeros(N_SHAPE))
    # channel -> list of (frame, xyz); channel is a joint index or -1 for translation
    keys: dict[int, list[tuple[float, np.ndarray]]] = field(default_factory=dict)

    def curves(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-frame theta (F, 72) and sigma (F, 3)."""
        t = np.arange(self.frames, dtype=float)
        theta = np.zeros((self.frames, N_POSE))
        sigma = np.zeros((self.frames, 3))
        for channel, keys in self.keys.items():
            keys = sorted(keys, key=lambda k: k[0])
            kt = np.array([k[0] for k in keys])
            kv = np.array([k[1] for k in keys])
            if np.any(np.diff(kt) <= 0):
                raise FormatError(f"duplicate key frames on channel {channel}")
            if len(kt) == 1:
                vals = np.broadcast_to(kv[0], (self.frames, 3))
            else:
                vals = CubicSpline(kt, kv, axis=0, bc_type="natural" if len(kt) > 2 else "not-a-knot")(t)
            if channel < 0:
                sigma[:] = vals
            else:
                theta[:, 3 * channel:3 * channel + 3] = vals
        return theta, sigma

    def states(self) -> list[ModelState]:
        theta, sigma = self.curves()
        return [ModelState(self.gender, self.beta, theta[i], sigma[i], i) for i in range(self.frames)]


def parse_motion_script(text: str) -> MotionScript:
    values, keys = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("key "):
            tok = line.split()
            if len(tok) != 6:
                raise FormatError(f"script line {lineno}: expected 'key <frame> <joint|translation> x y z'")
            if tok[2] == "translation":
                channel = -1
            elif tok[2] in JOINT_NAMES:
                channel = JOINT_NAMES.index(tok[2])
            else:
                raise FormatError(f"script line {lineno}: unknown channel {tok[2]!r}")
            keys.setdefault(channel, []).append((float(tok[1]), np.array([float(v) for v in tok[3:]])))
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            raise FormatError(f"script line {lineno}: expected key = value")
        values[key] = val
    try:
        frames = int(values["frames"])
    except KeyError:
        raise FormatError("motion script needs 'frames'") from None
    if frames < 2:
        raise FormatError("a sequence needs at least two frames")
    cam_values = {k: v for k, v in values.items() if k in ("width", "height", "focal", "cx", "cy")}
    cam_values["rotation"] = values.get("camera_rotation", " ".join(str(v) for v in DEFAULT_ROTATION.reshape(-1)))
    if "camera_translation" in values:
        cam_values["translation"] = values["camera_translation"]
    beta = np.zeros(N_SHAPE)
    if "beta" in values:
        beta = np.array([float(v) for v in values["beta"].split()])
    return MotionScript(frames, camera_from(cam_values), float(values.get("fps", 30)),
                        values.get("gender", "male"), float(values.get("noise", 0.0)),
                        int(values.get("seed", 0)), values.get("subject", "synthetic"), beta, keys)


def load_motion_script(path: str | Path | None = None) -> MotionScript:
    """Read a script; ``None`` loads the packaged 30-frame walk."""
    if path is None:
        text = resources.files("flowpose.assets").joinpath("walk.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_motion_script(text)


def render_frames(states: list[ModelState], cam: Camera):
    """Exact backward flow (frames 1..) and silhouettes for a state sequence."""
    skels = {}
    meshes, flows, masks = [], [None], []
    for st in states:
        key = (st.gender, st.beta.tobytes())
        if key not in skels:
            skels[key] = build_skeleton(st.gender, st.beta)
        skel = skels[key]
        mesh = pose_mesh(st, skel, cam)
        vbuf = visibility(mesh, skel, cam)
        masks.append(vbuf.covered)
        if meshes:
            flows.append(backward_flow(vbuf, skel.faces, mesh.uv, meshes[-1].uv))
        meshes.append(mesh)
    return flows, masks


def synth_sequence(script: MotionScript, noise: float | None = None, seed: int | None = None) -> SequenceBundle:
    """Render GT flow and masks; optional i.i.d. Gaussian noise (px) on valid flow pixels."""
    noise = script.noise if noise is None else noise
    seed = script.seed if seed is None else seed
    states = script.states()
    flows, masks = render_frames(states, script.camera)
    if noise > 0:
        rng = np.random.default_rng(seed)
        noisy = [None]
        for fl in flows[1:]:
            vec = fl.vectors + rng.normal(0.0, noise, fl.vectors.shape)
            noisy.append(FlowField(vec, fl.valid))
        flows = noisy
    return SequenceBundle(script.camera, flows, masks, states, script.fps, script.subject,
                          script.gender, meta={"noise": repr(float(noise)), "seed": str(seed)})


def gt_annotation(state: ModelState, cam: Camera, joints=ANNOTATED_JOINTS,
                  theta_noise: float = 0.0, seed: int = 0, with_translation: bool = False) -> Annotation:
    """Annotation clicked exactly at the projected GT joints, with a perturbed manual pose."""
    skel = build_skeleton(state.gender, state.beta)
    T = forward_kinematics(skel, state.theta, state.sigma)
    idx = [JOINT_NAMES.index(n) for n in joints]
    uv, _ = cam.project_world(T.positions[idx])
    rng = np.random.default_rng(seed)
    theta = state.theta + rng.uniform(-theta_noise, theta_noise, N_POSE)
    return Annotation({n: (float(u), float(v)) for n, (u, v) in zip(joints, uv)}, theta,
                      state.sigma.copy() if with_translation else None, state.gender)


def gt_joints_2d(states: list[ModelState], cam: Camera, joints=ANNOTATED_JOINTS) -> list[dict]:
    out = []
    for st in states:
        skel = build_skeleton(st.gender, st.beta)
        T = forward_kinematics(skel, st.theta, st.sigma)
        idx = [JOINT_NAMES.index(n) for n in joints]
        uv, _ = cam.project_world(T.positions[idx])
        out.append({n: tuple(map(float, p)) for n, p in zip(joints, uv)})
    return out


def walking_script(frames: int = 30, period: float = 30.0, width: int = 128, height: int = 128,
                   focal: float = 230.0, distance: float = 3.6, yaw: float = 0.9,
                   step: int = 3) -> str:
    """Text of a walking-like motion script (arm/leg swings, slow forward drift)."""
    lines = [f"frames = {frames}", "fps = 30", "gender = male", f"width = {width}", f"height = {height}",
             f"focal = {focal}", f"cx = {width / 2}", f"cy = {height / 2}",
             f"camera_translation = 0 -0.1 {distance}", "noise = 0", "seed = 0", "subject = synthetic-walk"]
    heading = np.array([np.sin(yaw), 0.0, np.cos(yaw)])
    for f in list(range(0, frames, step)) + ([frames - 1] if (frames - 1) % step else []):
        ph = 2 * np.pi * f / period
        s, c = np.sin(ph), np.cos(ph)
        trans = heading * 0.3 * f / max(frames - 1, 1) + np.array([0.0, 0.015 * np.cos(2 * ph), 0.0])
        keys = {
            "translation": trans,
            "pelvis": (0.0, yaw + 0.08 * s, 0.03 * c),
            "spine1": (0.04, -0.05 * s, 0.0),
            "spine2": (0.03, -0.04 * s, 0.0),
            "left_hip": (-0.4 * s, 0.0, 0.06),
            "right_hip": (0.4 * s, 0.0, -0.06),
            "left_knee": (0.45 + 0.35 * np.cos(ph + 0.9), 0.0, 0.0),
            "right_knee": (0.45 - 0.35 * np.cos(ph + 0.9), 0.0, 0.0),
            "left_ankle": (-0.1 * s, 0.0, 0.0),
            "right_ankle": (0.1 * s, 0.0, 0.0),
            "head": (0.05 * c, 0.06 * s, 0.0),
            "left_shoulder": (0.35 * s, 0.0, -1.13),
            "right_shoulder": (-0.35 * s, 0.0, 1.13),
            "left_elbow": (0.0, -0.35 - 0.15 * s, 0.0),
            "right_elbow": (0.0, 0.35 - 0.15 * s, 0.0),
        }
        for name, v in keys.items():
            lines.append(f"key {f} {name} " + " ".join(f"{x:.6f}" for x in v))
    return "\n".join(lines) + "\n"
