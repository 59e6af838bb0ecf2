"""File formats: .flo flow, PGM/PNG masks, annotations, results and sequence bundles."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..flow import FlowField
from ..geometry import JOINT_NAMES, N_POSE, N_SHAPE, ModelState
from ..objectives import TERMS
from ..raster import Camera
from ..tracker import Annotation, FrameData, TrackResult

FLO_TAG = b"PIEH"
FLO_CHECK = 202021.25
UNKNOWN_FLOW = 1e9


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


# -- optical flow ------------------------------------------------------------

def write_flo(field: FlowField, path: str | Path) -> None:
    """Middlebury .flo; invalid pixels are written with the 'unknown' marker."""
    h, w = field.valid.shape
    data = field.vectors.astype("<f4")
    data[~field.valid] = UNKNOWN_FLOW
    with open(path, "wb") as fh:
        fh.write(FLO_TAG)
        fh.write(struct.pack("<ii", w, h))
        fh.write(data.tobytes())


def read_flo(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("truncated header", len(raw))
    tag = raw[:4]
    if tag != FLO_TAG and struct.unpack("<f", tag)[0] != FLO_CHECK:
        raise FormatError(f"bad magic {tag!r}", 0)
    if len(raw) < 12:
        raise FormatError("truncated header", len(raw))
    w, h = struct.unpack("<ii", raw[4:12])
    if w < 1 or h < 1:
        raise FormatError(f"bad dimensions {w}x{h}", 4)
    need = 12 + 8 * w * h
    if len(raw) < need:
        raise FormatError(f"truncated payload, expected {need} bytes", len(raw))
    vec = np.frombuffer(raw, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2)
    valid = np.all(np.isfinite(vec) & (np.abs(vec) < 1e9), axis=2)
    return FlowField(vec.astype(np.float64), valid)


# -- masks -------------------------------------------------------------------

def _pgm_tokens(raw: bytes, count: int):
    """Header tokens of a binary PNM file and the payload offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def decode_pgm(raw: bytes) -> np.ndarray:
    tokens, offset = _pgm_tokens(raw, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"unsupported PNM type {tokens[0]!r}", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("non-numeric PGM header", 2) from None
    if maxval != 255:
        raise FormatError(f"only 8-bit PGM is supported (maxval {maxval})", offset)
    if len(raw) < offset + w * h:
        raise FormatError("truncated PGM payload", len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)


def read_mask(path: str | Path) -> np.ndarray:
    """Binary mask from an 8-bit PGM (P5) or grayscale PNG; true where value >= 128."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"P5":
        img = decode_pgm(raw)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image
        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P", "RGB", "RGBA", "LA"):
                raise FormatError(f"unsupported PNG mode {im.mode}", 0)
            img = np.asarray(im.convert("L"))
    else:
        raise FormatError("unsupported mask format (need PGM P5 or PNG)", 0)
    return img >= 128


def write_mask(mask: np.ndarray, path: str | Path) -> None:
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


# -- key = value text --------------------------------------------------------

def _strip(line: str) -> str:
    return line.split("#", 1)[0].strip()


def _floats(text: str, n: int, what: str) -> np.ndarray:
    vals = np.array([float(v) for v in text.split()])
    if vals.size != n:
        raise FormatError(f"{what}: expected {n} numbers, got {vals.size}")
    return vals


# -- annotation --------------------------------------------------------------

def parse_annotation(text: str) -> Annotation:
    """``name x y`` lines; optional ``pose <joint> ax ay az``, ``translation``, ``gender``."""
    joints, theta, sigma, gender = {}, np.zeros(N_POSE), None, "male"
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        tok = line.split()
        try:
            if tok[0] == "pose":
                j = JOINT_NAMES.index(tok[1])
                theta[3 * j:3 * j + 3] = _floats(" ".join(tok[2:]), 3, "pose")
            elif tok[0] == "translation":
                sigma = _floats(" ".join(tok[1:]), 3, "translation")
            elif tok[0] == "gender":
                gender = tok[1]
            elif len(tok) == 3:
                joints[tok[0]] = (float(tok[1]), float(tok[2]))
            else:
                raise ValueError(f"cannot parse {raw.strip()!r}")
        except (ValueError, IndexError) as exc:
            raise FormatError(f"annotation line {lineno}: {exc}") from None
    try:
        return Annotation(joints, theta, sigma, gender)
    except ValueError as exc:
        raise FormatError(f"annotation: {exc}") from None


def format_annotation(ann: Annotation) -> str:
    lines = [f"gender {ann.gender}"]
    lines += [f"{name} {x:.6f} {y:.6f}" for name, (x, y) in ann.joints.items()]
    for j, name in enumerate(JOINT_NAMES):
        aa = ann.theta[3 * j:3 * j + 3]
        if np.any(aa != 0):
            lines.append(f"pose {name} " + " ".join(repr(float(v)) for v in aa))
    if ann.sigma is not None:
        lines.append("translation " + " ".join(repr(float(v)) for v in ann.sigma))
    return "\n".join(lines) + "\n"


def read_annotation(path: str | Path) -> Annotation:
    return parse_annotation(Path(path).read_text())


# -- results -----------------------------------------------------------------

COST_COLUMNS = TERMS + ("total",)


def format_result(result: TrackResult) -> str:
    cols = ["frame", "sigma_x", "sigma_y", "sigma_z"] + [f"theta_{k}" for k in range(N_POSE)]
    cols += list(COST_COLUMNS)
    lines = ["# flowpose result", f"# gender = {result.gender}",
             "# beta = " + " ".join(repr(float(b)) for b in result.beta),
             "# columns = " + " ".join(cols)]
    for st, cost in zip(result.states, result.costs):
        vals = [repr(float(v)) for v in np.concatenate([st.sigma, st.theta])]
        vals += [repr(float(cost.get(k, float("nan")))) for k in COST_COLUMNS]
        lines.append(f"{st.frame} " + " ".join(vals))
    return "\n".join(lines) + "\n"


def parse_result(text: str) -> TrackResult:
    header, rows = {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].partition("=")
            if sep:
                header[key.strip()] = val.strip()
            continue
        tok = line.split()
        if len(tok) != 1 + 3 + N_POSE + len(COST_COLUMNS):
            raise FormatError(f"result line {lineno}: expected {1 + 3 + N_POSE + len(COST_COLUMNS)} columns, got {len(tok)}")
        rows.append((int(tok[0]), np.array([float(v) for v in tok[1:]])))
    if "gender" not in header or "beta" not in header:
        raise FormatError("result header needs gender and beta")
    gender = header["gender"]
    beta = _floats(header["beta"], N_SHAPE, "beta")
    states, costs, diags = [], [], []
    for frame, vals in rows:
        states.append(ModelState(gender, beta, vals[3:3 + N_POSE], vals[:3], frame))
        cost = {k: float(v) for k, v in zip(COST_COLUMNS, vals[3 + N_POSE:]) if not np.isnan(v)}
        costs.append(cost)
        diags.append({"frame": frame})
    frames = [s.frame for s in states]
    if any(b <= a for a, b in zip(frames, frames[1:])):
        raise FormatError("result frame indices must be strictly increasing")
    return TrackResult(states, costs, diags)


def write_result(result: TrackResult, path: str | Path) -> None:
    Path(path).write_text(format_result(result))


def read_result(path: str | Path) -> TrackResult:
    return parse_result(Path(path).read_text())


def write_states(states: list[ModelState], path: str | Path) -> None:
    write_result(TrackResult(list(states), [{} for _ in states], [{} for _ in states]), path)


def read_states(path: str | Path) -> list[ModelState]:
    return read_result(path).states


# -- sequence bundles --------------------------------------------------------

@dataclass
class SequenceBundle:
    camera: Camera
    flows: list[FlowField | None]   # flows[i]: backward flow i -> i-1; flows[0] is None
    masks: list[np.ndarray | None]
    gt: list[ModelState] | None = None
    fps: float = 30.0
    subject: str = ""
    gender: str = "male"
    root: Path | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.flows) != len(self.masks):
            raise ValueError("flow and mask lists differ in length")
        if len(self.flows) < 2:
            raise ValueError("a bundle needs at least two frames")
        if self.gt is not None and len(self.gt) != len(self.flows):
            raise ValueError("ground truth length differs from the frame count")
        size = (self.camera.height, self.camera.width)
        for i, (fl, m) in enumerate(zip(self.flows, self.masks)):
            if fl is not None and fl.valid.shape != size:
                raise ValueError(f"frame {i}: flow is {fl.valid.shape}, camera is {size}")
            if m is not None and np.shape(m) != size:
                raise ValueError(f"frame {i}: mask is {np.shape(m)}, camera is {size}")

    def __len__(self) -> int:
        return len(self.flows)

    def frames(self) -> list[FrameData]:
        return [FrameData(f, m) for f, m in zip(self.flows, self.masks)]


def _camera_lines(cam: Camera) -> list[str]:
    return [f"width = {cam.width}", f"height = {cam.height}", f"focal = {cam.focal!r}",
            f"cx = {cam.cx!r}", f"cy = {cam.cy!r}",
            "rotation = " + " ".join(repr(float(v)) for v in cam.rotation.reshape(-1)),
            "translation = " + " ".join(repr(float(v)) for v in cam.translation)]


def camera_from(values: dict[str, str]) -> Camera:
    try:
        return Camera(float(values["focal"]), float(values.get("cx", int(values["width"]) / 2)),
                      float(values.get("cy", int(values["height"]) / 2)), int(values["width"]),
                      int(values["height"]),
                      _floats(values["rotation"], 9, "rotation").reshape(3, 3) if "rotation" in values else None,
                      _floats(values["translation"], 3, "translation") if "translation" in values else None)
    except KeyError as exc:
        raise FormatError(f"missing camera key {exc}") from None


def write_bundle(bundle: SequenceBundle, outdir: str | Path) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# flowpose sequence bundle", "version = 1"] + _camera_lines(bundle.camera)
    lines += [f"fps = {bundle.fps!r}", f"subject = {bundle.subject}", f"gender = {bundle.gender}",
              f"frames = {len(bundle)}"]
    lines += [f"{k} = {v}" for k, v in bundle.meta.items()]
    if bundle.gt is not None:
        write_states(bundle.gt, out / "gt.txt")
        lines.append("gt = gt.txt")
    for i, (fl, m) in enumerate(zip(bundle.flows, bundle.masks)):
        flow_name = mask_name = "-"
        if fl is not None:
            flow_name = f"flow_{i:04d}.flo"
            write_flo(fl, out / flow_name)
        if m is not None:
            mask_name = f"mask_{i:04d}.pgm"
            write_mask(m, out / mask_name)
        lines.append(f"frame {i} {flow_name} {mask_name}")
    (out / "bundle.txt").write_text("\n".join(lines) + "\n")
    return out


def read_bundle(path: str | Path) -> SequenceBundle:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    index = root / "bundle.txt" if path.is_dir() else path
    if not index.exists():
        raise FormatError(f"no bundle index at {index}")
    values, frames = {}, {}
    for lineno, raw in enumerate(index.read_text().splitlines(), 1):
        line = _strip(raw)
        if not line:
            continue
        if line.startswith("frame "):
            tok = line.split()
            if len(tok) != 4:
                raise FormatError(f"bundle line {lineno}: expected 'frame <i> <flow> <mask>'")
            frames[int(tok[1])] = (tok[2], tok[3])
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            raise FormatError(f"bundle line {lineno}: expected key = value")
        values[key] = val
    n = int(values.get("frames", len(frames)))
    if sorted(frames) != list(range(n)):
        raise FormatError("bundle frame list is incomplete or out of order")
    cam = camera_from(values)

    def load(name, reader):
        if name == "-":
            return None
        file = root / name
        if not file.exists():
            raise FormatError(f"referenced file {file} does not exist")
        return reader(file)

    flows = [load(frames[i][0], read_flo) for i in range(n)]
    masks = [load(frames[i][1], read_mask) for i in range(n)]
    gt = read_states(root / values["gt"]) if "gt" in values else None
    known = {"version", "width", "height", "focal", "cx", "cy", "rotation", "translation", "fps",
             "subject", "gender", "frames", "gt"}
    meta = {k: v for k, v in values.items() if k not in known}
    return SequenceBundle(cam, flows, masks, gt, float(values.get("fps", 30.0)),
                          values.get("subject", ""), values.get("gender", "male"), root, meta)
