"""Color-coded flow images and skeleton overlays."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from ..flow import FlowField
from ..geometry import JOINT_NAMES, ModelState, build_skeleton, forward_kinematics
from ..raster import Camera


def _color_wheel() -> np.ndarray:
    # Middlebury hue segments: RY, YG, GC, CB, BM, MR
    segments = (15, 6, 4, 11, 13, 6)
    wheel = []
    ramps = [((255, 0, 0), (255, 255, 0)), ((255, 255, 0), (0, 255, 0)), ((0, 255, 0), (0, 255, 255)),
             ((0, 255, 255), (0, 0, 255)), ((0, 0, 255), (255, 0, 255)), ((255, 0, 255), (255, 0, 0))]
    for n, (a, b) in zip(segments, ramps):
        t = np.arange(n)[:, None] / n
        wheel.append((1 - t) * np.array(a) + t * np.array(b))
    return np.concatenate(wheel) / 255.0


def flow_to_color(field: FlowField, max_norm: float | None = None) -> np.ndarray:
    """RGB uint8 image; hue encodes direction, saturation magnitude, invalid is black."""
    u, v = field.vectors[..., 0], field.vectors[..., 1]
    mag = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(mag[field.valid].max()) if field.valid.any() else 1.0
    max_norm = max(max_norm, 1e-9)
    wheel = _color_wheel()
    n = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    rad = np.clip(mag / max_norm, 0, 1)[..., None]
    col = 1 - rad * (1 - col)
    img = (col * 255).round().astype(np.uint8)
    img[~field.valid] = 0
    return img


def write_flow_png(field: FlowField, path: str | Path, max_norm: float | None = None) -> None:
    Image.fromarray(flow_to_color(field, max_norm)).save(path)


def skeleton_overlay(state: ModelState, cam: Camera, background: np.ndarray | None = None,
                     color=(255, 64, 64), scale: int = 2) -> Image.Image:
    """Projected kinematic tree drawn over an optional mask or RGB background."""
    skel = build_skeleton(state.gender, state.beta)
    T = forward_kinematics(skel, state.theta, state.sigma)
    uv, _ = cam.project_world(T.positions)
    if background is None:
        base = np.zeros((cam.height, cam.width, 3), dtype=np.uint8)
    elif background.ndim == 2:
        base = np.repeat((np.asarray(background, dtype=bool) * 90).astype(np.uint8)[..., None], 3, axis=2)
    else:
        base = np.asarray(background, dtype=np.uint8)
    img = Image.fromarray(base).resize((cam.width * scale, cam.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    pts = uv * scale
    for j, p in enumerate(skel.parents):
        if p >= 0:
            draw.line([tuple(pts[p]), tuple(pts[j])], fill=color, width=max(1, scale))
    for j in range(len(JOINT_NAMES)):
        x, y = pts[j]
        draw.ellipse([x - scale, y - scale, x + scale, y + scale], fill=(255, 255, 255))
    return img
