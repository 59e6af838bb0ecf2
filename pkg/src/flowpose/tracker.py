"""Optimizer, three-step initialization and the per-frame tracking loop."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .filter import FilterBank
from .flow import FlowField, FlowPyramid, PosedMesh, gaussian_pyramid, pose_mesh, visibility
from .geometry import (ANNOTATED_JOINTS, JOINT_NAMES, N_MOTION, N_POSE, N_SHAPE, POSE, TRANS,
                       ModelState, Skeleton, body_capsules, build_skeleton, capsule_jacobian,
                       forward_kinematics, joint_jacobian)
from .objectives import (CoverageConfig, FlowFrame, PoseBounds, Residuals, bound_residuals,
                         chamfer_map, coverage_residuals, flow_residuals,
                         interpenetration_residuals, load_pose_bounds, non_adjacent_pairs,
                         surface_point_jacobian)
from .raster import BehindCameraError, Camera

MIN_MARKED = 6


class InvalidStartError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class UnderConstrainedError(ValueError):
    pass


class InitError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class TrackerConfig:
    lambda_f: float = 1.0
    lambda_c: float = 0.3
    lambda_b: float = 10.0
    lambda_sp: float = 1.0
    lambda_theta: float = 0.05
    coverage_a: float = 0.7
    grid_spacing: int = 2
    follow_surface: bool = True
    levels: int = 4
    method: str = "gn"
    max_iter: int = 50
    gtol: float = 1e-6
    ftol: float = 1e-6
    xtol: float = 1e-10
    lm_damping: float = 1e-3
    exact_flow_jacobian: bool = True
    init_max_iter: int = 100
    init_joint_weight: float = 1.0
    init_pose_reg: float = 1.0
    init_shape_reg: float = 1.0
    init_max_reprojection: float = 25.0
    kf_q_theta: float = 1e-3
    kf_q_sigma: float = 1e-3
    kf_r: float = 1e-2
    kf_dt: float = 1.0
    kf_var0: float = 0.1
    bounds: str = ""

    def __post_init__(self):
        for name in ("lambda_f", "lambda_c", "lambda_b", "lambda_sp", "lambda_theta",
                     "init_joint_weight", "init_pose_reg", "init_shape_reg"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.levels < 1 or self.max_iter < 1 or self.init_max_iter < 1:
            raise ConfigError("levels and iteration limits must be >= 1")
        if self.method not in ("gn", "gd"):
            raise ConfigError(f"unknown optimizer {self.method!r}")
        CoverageConfig(self.coverage_a, self.grid_spacing, self.follow_surface)

    @property
    def weights(self) -> dict[str, float]:
        return {"flow": self.lambda_f, "coverage": self.lambda_c, "bounds": self.lambda_b,
                "interpenetration": self.lambda_sp, "smoothness": self.lambda_theta}

    @property
    def coverage(self) -> CoverageConfig:
        return CoverageConfig(self.coverage_a, self.grid_spacing, self.follow_surface)

    def options(self, max_iter: int | None = None) -> "OptimizerOptions":
        return OptimizerOptions(self.method, max_iter or self.max_iter, self.gtol, self.ftol,
                                self.xtol, self.lm_damping)

    def pose_bounds(self) -> PoseBounds:
        return load_pose_bounds(self.bounds or None)

    def filter_bank(self, state: ModelState) -> FilterBank:
        return FilterBank.seed(state.theta, state.sigma, self.kf_q_theta, self.kf_q_sigma,
                               self.kf_r, self.kf_dt, self.kf_var0)


def _coerce(kind, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def parse_config(text: str) -> TrackerConfig:
    kinds = {f.name: type(f.default) for f in dataclasses.fields(TrackerConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = (s.strip() for s in line.partition("="))
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(kinds[key], val)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return TrackerConfig(**values)


def load_config(path: str | Path | None) -> TrackerConfig:
    if path is None:
        return TrackerConfig()
    return parse_config(Path(path).read_text())


def format_config(cfg: TrackerConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# -- generic minimizer -------------------------------------------------------

@dataclass(frozen=True)
class OptimizerOptions:
    method: str = "gd"
    max_iter: int = 100
    gtol: float = 1e-6
    ftol: float = 1e-12
    xtol: float = 1e-12
    damping: float = 1e-3
    armijo: float = 1e-4
    shrink: float = 0.5
    max_backtrack: int = 40


@dataclass
class OptimizeResult:
    x: np.ndarray
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    message: str
    trace: list[float] = field(default_factory=list)


def _finite(v) -> bool:
    return bool(np.all(np.isfinite(v)))


def minimize(fun: Callable, x0: np.ndarray, opts: OptimizerOptions = OptimizerOptions(),
             value: Callable | None = None) -> OptimizeResult:
    """Monotone local minimization.

    ``method="gd"``: ``fun(x) -> (f, grad)``, gradient descent with a
    Barzilai-Borwein trial step and Armijo backtracking.
    ``method="gn"``: ``fun(x) -> (r, J)`` for ``f = |r|^2``, Levenberg-Marquardt.
    ``value`` optionally evaluates only the objective (GD) or the residual
    vector (GN) at trial points.
    """
    if opts.method == "gn":
        return _levenberg_marquardt(fun, x0, opts, value)
    if opts.method == "gd":
        return _gradient_descent(fun, x0, opts, value)
    raise ValueError(f"unknown method {opts.method!r}")


def _gradient_descent(fun, x0, opts, value):
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    f = float(f)
    g = np.asarray(g, dtype=float)
    if not (math.isfinite(f) and _finite(g)):
        raise InvalidStartError("cost or gradient is not finite at the starting point")
    value = value or (lambda z: fun(z)[0])
    trace = [f]
    step = 1.0 / max(np.linalg.norm(g), 1.0)
    it = 0
    msg = "iteration limit"
    converged = False
    while True:
        gn = float(np.linalg.norm(g))
        if gn <= opts.gtol:
            converged, msg = True, "gradient tolerance"
            break
        if it >= opts.max_iter:
            break
        it += 1
        t = step
        for _ in range(opts.max_backtrack):
            x_new = x - t * g
            f_new = float(value(x_new))
            if math.isfinite(f_new) and f_new <= f - opts.armijo * t * gn * gn:
                break
            t *= opts.shrink
        else:
            msg = "line search failed"
            break
        f_new, g_new = fun(x_new)
        f_new = float(f_new)
        g_new = np.asarray(g_new, dtype=float)
        s, y = x_new - x, g_new - g
        small = f - f_new <= opts.ftol * max(abs(f), 1e-300) and np.linalg.norm(s) <= opts.xtol * (np.linalg.norm(x) + opts.xtol)
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        sy = float(s @ y)
        step = float(s @ s) / sy if sy > 0 else t * 2.0
        if small:
            converged, msg = True, "step tolerance"
            break
    return OptimizeResult(x, f, float(np.linalg.norm(g)), it, converged, msg, trace)


def _levenberg_marquardt(fun, x0, opts, residual):
    x = np.array(x0, dtype=float)
    r, J = fun(x)
    r = np.asarray(r, dtype=float)
    f = float(r @ r)
    if not (math.isfinite(f) and _finite(J)):
        raise InvalidStartError("residual or Jacobian is not finite at the starting point")
    residual = residual or (lambda z: fun(z)[0])
    trace = [f]
    mu = opts.damping
    it = 0
    msg = "iteration limit"
    converged = False
    while True:
        g = J.T @ r
        if 2.0 * np.linalg.norm(g) <= opts.gtol:
            converged, msg = True, "gradient tolerance"
            break
        if it >= opts.max_iter:
            break
        it += 1
        A = J.T @ J
        d = np.diag(A).copy()
        d += 1e-9 * max(d.max(), 1e-12) + 1e-12
        accepted = False
        for _ in range(opts.max_backtrack):
            try:
                delta = np.linalg.solve(A + mu * np.diag(d), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            r_new = np.asarray(residual(x + delta), dtype=float)
            f_new = float(r_new @ r_new)
            if math.isfinite(f_new) and f_new < f:
                accepted = True
                break
            mu *= 10.0
        if not accepted:
            converged, msg = True, "no decrease possible"
            break
        mu = max(mu * 0.3, 1e-12)
        x_prev, f_prev = x, f
        x = x + delta
        r, J = fun(x)
        r = np.asarray(r, dtype=float)
        f = float(r @ r)
        trace.append(f)
        if f_prev - f <= opts.ftol * f_prev:
            converged, msg = True, "cost tolerance"
            break
        if np.linalg.norm(delta) <= opts.xtol * (np.linalg.norm(x_prev) + opts.xtol):
            converged, msg = True, "step tolerance"
            break
    return OptimizeResult(x, f, float(2.0 * np.linalg.norm(J.T @ r)), it, converged, msg, trace)


def least_squares_problem(evaluate: Callable[[np.ndarray, bool], Residuals], opts: OptimizerOptions):
    """Adapt a residual evaluator to ``minimize`` for either method."""
    if opts.method == "gn":
        def fun(x):
            res = evaluate(x, True)
            return res.r, res.J
        return fun, (lambda x: evaluate(x, False).r)

    def fun(x):
        res = evaluate(x, True)
        return res.value, 2.0 * res.J.T @ res.r
    return fun, (lambda x: evaluate(x, False).value)


# -- residual assembly -------------------------------------------------------

_INFEASIBLE = Residuals(np.array([np.inf]), None)


def _pad(J: np.ndarray | None, n_rows: int, n_cols: int, cols: slice | np.ndarray) -> np.ndarray:
    full = np.zeros((n_rows, n_cols))
    if J is not None:
        full[:, cols] = J
    return full


def _stack(parts: list[tuple[float, Residuals]], jacobian: bool) -> Residuals:
    parts = [(w, res) for w, res in parts if w > 0 and len(res.r)]
    if not parts:
        return Residuals(np.zeros(0), None)
    r = np.concatenate([math.sqrt(w) * res.r for w, res in parts])
    J = np.concatenate([math.sqrt(w) * res.J for w, res in parts]) if jacobian else None
    return Residuals(r, J)


@dataclass
class FrameData:
    """Observations for one frame; ``flow`` is the backward flow to the previous frame."""
    flow: FlowField | None
    mask: np.ndarray | None

    def chamfer(self) -> np.ndarray:
        return chamfer_map(self.mask)


class FrameProblem:
    """The full weighted cost of one frame as a function of ``[theta_i, sigma_i]``."""

    def __init__(self, skel: Skeleton, cam: Camera, cfg: TrackerConfig, bounds: PoseBounds,
                 pyramid: FlowPyramid, mask: np.ndarray, chamfer: np.ndarray,
                 prev: ModelState, template: ModelState):
        self.skel, self.cam, self.cfg, self.bounds = skel, cam, cfg, bounds
        self.pyramid, self.mask, self.chamfer = pyramid, mask, chamfer
        self.prev = prev
        self.template = template
        self.prev_mesh = pose_mesh(prev, skel, cam)
        self.pairs = non_adjacent_pairs(skel.parents)
        self.levels = list(range(len(pyramid)))

    def terms(self, x: np.ndarray, jacobian: bool, levels=None) -> dict[str, Residuals] | None:
        state = self.template.with_motion(x)
        try:
            cur = pose_mesh(state, self.skel, self.cam)
        except BehindCameraError:
            return None
        vbuf = visibility(cur, self.skel, self.cam)
        levels = self.levels if levels is None else levels
        out = {}
        out["flow"] = flow_residuals(self.pyramid, FlowFrame(cur, self.prev_mesh, vbuf), self.skel,
                                     self.cam, levels, exact=self.cfg.exact_flow_jacobian,
                                     jacobian=jacobian)
        caps = (capsule_jacobian(self.skel, cur.transforms) if jacobian
                else body_capsules(self.skel, cur.transforms))
        surface = lambda px: surface_point_jacobian(vbuf, self.skel, cur, self.cam, px)
        out["coverage"] = coverage_residuals(self.mask, self.chamfer, vbuf.covered, caps, self.cam,
                                             self.cfg.coverage, jacobian, surface)
        b = bound_residuals(state.theta, self.bounds)
        out["bounds"] = Residuals(b.r, _pad(b.J, len(b.r), N_MOTION, POSE) if jacobian else None)
        sp = interpenetration_residuals(caps, self.pairs)
        out["interpenetration"] = Residuals(sp.r, sp.J if jacobian else None)
        d = state.theta - self.prev.theta
        out["smoothness"] = Residuals(d, _pad(np.eye(N_POSE), N_POSE, N_MOTION, POSE) if jacobian else None)
        return out

    def evaluate(self, x: np.ndarray, jacobian: bool, levels=None) -> Residuals:
        terms = self.terms(x, jacobian, levels)
        if terms is None:
            return _INFEASIBLE
        w = self.cfg.weights
        return _stack([(w[k], v) for k, v in terms.items()], jacobian)

    def breakdown(self, x: np.ndarray) -> dict[str, float]:
        terms = self.terms(x, False)
        if terms is None:
            return {k: math.inf for k in self.cfg.weights}
        out = {k: v.value for k, v in terms.items()}
        out["total"] = sum(self.cfg.weights[k] * v for k, v in out.items())
        return out


def coarse_to_fine(evaluate: Callable, x0: np.ndarray, n_levels: int, opts: OptimizerOptions):
    """Sequential stages from the coarsest level down to level 0.

    Stage ``s`` sums the flow term over levels ``s .. n_levels-1``.
    """
    x = np.array(x0, dtype=float)
    results = []
    for s in range(n_levels - 1, -1, -1):
        levels = list(range(s, n_levels))
        fun, trial = least_squares_problem(lambda z, jac: evaluate(z, jac, levels), opts)
        res = minimize(fun, x, opts, trial)
        x = res.x
        results.append(res)
    return x, results


# -- initialization ----------------------------------------------------------

@dataclass
class Annotation:
    """Frame-0 clicks plus a rough manual pose."""
    joints: dict[str, tuple[float, float]]
    theta: np.ndarray
    sigma: np.ndarray | None = None
    gender: str = "male"

    def __post_init__(self):
        for name in self.joints:
            if name not in ANNOTATED_JOINTS:
                raise ValueError(f"joint {name!r} cannot be annotated")
        self.theta = np.asarray(self.theta, dtype=float).reshape(N_POSE)
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float).reshape(3)

    def check_inside(self, cam: Camera) -> None:
        for name, (x, y) in self.joints.items():
            if not (0 <= x < cam.width and 0 <= y < cam.height):
                raise ValueError(f"annotated joint {name!r} lies outside the image")

    @property
    def indices(self) -> np.ndarray:
        return np.array([JOINT_NAMES.index(n) for n in self.joints], dtype=int)

    @property
    def points(self) -> np.ndarray:
        return np.array(list(self.joints.values()), dtype=float).reshape(-1, 2)


def _guess_translation(ann: Annotation, skel: Skeleton, cam: Camera) -> np.ndarray:
    """Place the rest-translated model so its marked joints match in scale and centroid."""
    T = forward_kinematics(skel, ann.theta, np.zeros(3))
    idx = ann.indices
    model = T.positions[idx]
    pts = ann.points
    centroid = model.mean(axis=0)
    # depth from the spread of the marked joints
    spread3 = np.sqrt(np.mean(np.sum((model - centroid) ** 2, axis=1)))
    spread2 = np.sqrt(np.mean(np.sum((pts - pts.mean(axis=0)) ** 2, axis=1)))
    z = cam.focal * spread3 / max(spread2, 1e-6)
    u, v = pts.mean(axis=0)
    target_cam = np.array([(u - cam.cx) * z / cam.focal, (v - cam.cy) * z / cam.focal, z])
    target = cam.rotation.T @ (target_cam - cam.translation)
    return target - centroid


@dataclass
class InitResult:
    state: ModelState
    beta: np.ndarray
    bank: FilterBank
    stages: dict[str, OptimizeResult]


def _joint_residuals(T, skel, cam, ann, with_shape, jacobian):
    idx = ann.indices
    uv, _ = cam.project_world(T.positions[idx])
    r = (uv - ann.points).reshape(-1)
    if not jacobian:
        return Residuals(r)
    jj = joint_jacobian(skel, T, with_shape=with_shape)[idx]
    return Residuals(r, (cam.projection_jacobian(T.positions[idx]) @ jj).reshape(len(r), -1))


def initialize(mask0: np.ndarray, flow10: FlowField | None, ann: Annotation, cam: Camera,
               cfg: TrackerConfig = TrackerConfig(), chamfer0: np.ndarray | None = None) -> InitResult:
    """Fit shape, pose and translation of frame 0 from clicks, silhouette and flow."""
    if len(ann.joints) < MIN_MARKED:
        raise UnderConstrainedError(f"{len(ann.joints)} marked joints, at least {MIN_MARKED} needed")
    ann.check_inside(cam)
    mask0 = np.asarray(mask0, dtype=bool)
    if mask0.shape != (cam.height, cam.width):
        raise ValueError(f"mask is {mask0.shape}, camera is {cam.height}x{cam.width}")
    chamfer0 = chamfer_map(mask0) if chamfer0 is None else chamfer0
    bounds = cfg.pose_bounds()
    gender = ann.gender
    skel0 = build_skeleton(gender)
    sigma0 = ann.sigma if ann.sigma is not None else _guess_translation(ann, skel0, cam)
    pairs = non_adjacent_pairs(skel0.parents)
    n1 = N_MOTION + N_SHAPE
    stages = {}

    def shape_stage(y, jacobian, with_coverage):
        theta, sigma, beta = y[POSE], y[TRANS], y[N_MOTION:]
        skel = build_skeleton(gender, beta)
        T = forward_kinematics(skel, theta, sigma)
        try:
            parts = [(cfg.init_joint_weight, _joint_residuals(T, skel, cam, ann, True, jacobian))]
        except BehindCameraError:
            return _INFEASIBLE
        b = bound_residuals(theta, bounds)
        parts.append((cfg.lambda_b, Residuals(b.r, _pad(b.J, N_POSE, n1, POSE) if jacobian else None)))
        caps = capsule_jacobian(skel, T, with_shape=True) if jacobian else body_capsules(skel, T)
        sp = interpenetration_residuals(caps, pairs)
        parts.append((cfg.lambda_sp, Residuals(sp.r, sp.J if jacobian else None)))
        parts.append((cfg.init_pose_reg, Residuals(theta - ann.theta,
                                                   _pad(np.eye(N_POSE), N_POSE, n1, POSE) if jacobian else None)))
        parts.append((cfg.init_shape_reg, Residuals(beta.copy(),
                                                    _pad(np.eye(N_SHAPE), N_SHAPE, n1, slice(N_MOTION, n1)) if jacobian else None)))
        if with_coverage:
            state = ModelState(gender, beta, theta, sigma)
            try:
                mesh = pose_mesh(state, skel, cam)
            except BehindCameraError:
                return _INFEASIBLE
            vbuf = visibility(mesh, skel, cam)
            surface = lambda px: surface_point_jacobian(vbuf, skel, mesh, cam, px)
            parts.append((cfg.lambda_c, coverage_residuals(mask0, chamfer0, vbuf.covered, caps, cam,
                                                           cfg.coverage, jacobian, surface)))
        return _stack(parts, jacobian)

    opts = cfg.options(cfg.init_max_iter)
    y = np.concatenate([ann.theta, sigma0, np.zeros(N_SHAPE)])
    for stage, with_cov in (("step1", False), ("step2", True)):
        fun, trial = least_squares_problem(lambda z, jac: shape_stage(z, jac, with_cov), opts)
        try:
            res = minimize(fun, y, opts, trial)
        except InvalidStartError as exc:
            raise InitError(stage, str(exc)) from None
        y = res.x
        stages[stage] = res

    beta = y[N_MOTION:].copy()
    skel = build_skeleton(gender, beta)
    T = forward_kinematics(skel, y[POSE], y[TRANS])
    reproj = _joint_residuals(T, skel, cam, ann, False, False).r.reshape(-1, 2)
    rms = float(np.sqrt(np.mean(np.sum(reproj ** 2, axis=1))))
    if not rms <= cfg.init_max_reprojection:
        raise InitError("step2", f"joint reprojection error {rms:.1f} px exceeds the safeguard")

    state0 = ModelState(gender, beta, y[POSE], y[TRANS], 0)
    if flow10 is not None:
        state0, res = _flow_stage(state0, flow10, mask0, chamfer0, ann, skel, cam, cfg, bounds, pairs)
        stages["step3"] = res
    return InitResult(state0, beta, cfg.filter_bank(state0), stages)


def _flow_stage(state0, flow10, mask0, chamfer0, ann, skel, cam, cfg, bounds, pairs):
    """Joint refinement of frames 0 and 1 on the observed flow between them."""
    if (flow10.width, flow10.height) != cam.size:
        raise InitError("step3", "flow dimensions do not match the camera")
    pyramid = gaussian_pyramid(flow10, cfg.levels)
    n = 2 * N_MOTION
    f0 = np.arange(N_MOTION)
    f1 = np.arange(N_MOTION, n)
    eye = np.eye(N_POSE)

    def evaluate(z, jacobian, levels):
        s0 = state0.with_motion(z[f0])
        s1 = state0.with_motion(z[f1], frame=1)
        try:
            m0 = pose_mesh(s0, skel, cam)
            m1 = pose_mesh(s1, skel, cam)
            jr = _joint_residuals(m0.transforms, skel, cam, ann, False, jacobian)
        except BehindCameraError:
            return _INFEASIBLE
        v0 = visibility(m0, skel, cam)
        v1 = visibility(m1, skel, cam)
        fl = flow_residuals(pyramid, FlowFrame(m1, m0, v1), skel, cam, levels, roles=("cur", "prev"),
                            exact=cfg.exact_flow_jacobian, jacobian=jacobian)
        parts = [(cfg.lambda_f, Residuals(fl.r, np.concatenate([fl.J[:, N_MOTION:], fl.J[:, :N_MOTION]], axis=1)
                                          if jacobian else None))]
        parts.append((cfg.init_joint_weight, Residuals(jr.r, _pad(jr.J, len(jr.r), n, f0) if jacobian else None)))
        caps0 = capsule_jacobian(skel, m0.transforms) if jacobian else body_capsules(skel, m0.transforms)
        surface = lambda px: surface_point_jacobian(v0, skel, m0, cam, px)
        cov = coverage_residuals(mask0, chamfer0, v0.covered, caps0, cam, cfg.coverage, jacobian, surface)
        parts.append((cfg.lambda_c, Residuals(cov.r, _pad(cov.J, len(cov.r), n, f0) if jacobian else None)))
        for cols, st, mesh in ((f0, s0, m0), (f1, s1, m1)):
            b = bound_residuals(st.theta, bounds)
            parts.append((cfg.lambda_b, Residuals(b.r, _pad(b.J, N_POSE, n, cols[:N_POSE]) if jacobian else None)))
            caps = capsule_jacobian(skel, mesh.transforms) if jacobian else body_capsules(skel, mesh.transforms)
            sp = interpenetration_residuals(caps, pairs)
            parts.append((cfg.lambda_sp, Residuals(sp.r, _pad(sp.J, len(sp.r), n, cols) if jacobian else None)))
        d = s1.theta - s0.theta
        smooth_J = None
        if jacobian:
            smooth_J = np.zeros((N_POSE, n))
            smooth_J[:, f1[:N_POSE]] = eye
            smooth_J[:, f0[:N_POSE]] = -eye
        parts.append((cfg.lambda_theta, Residuals(d, smooth_J)))
        parts.append((cfg.init_pose_reg, Residuals(s0.theta - ann.theta,
                                                   _pad(eye, N_POSE, n, f0[:N_POSE]) if jacobian else None)))
        return _stack(parts, jacobian)

    z0 = np.concatenate([state0.motion, state0.motion])
    try:
        z, results = coarse_to_fine(evaluate, z0, len(pyramid), cfg.options(cfg.init_max_iter))
    except InvalidStartError as exc:
        raise InitError("step3", str(exc)) from None
    final = results[-1]
    return state0.with_motion(z[f0]), final


# -- tracking ----------------------------------------------------------------

@dataclass
class TrackResult:
    states: list[ModelState]
    costs: list[dict[str, float]]
    diagnostics: list[dict]

    @property
    def beta(self) -> np.ndarray:
        return self.states[0].beta

    @property
    def gender(self) -> str:
        return self.states[0].gender

    def __len__(self) -> int:
        return len(self.states)


def track_frame(frame: FrameData, prev: ModelState, seed: np.ndarray, skel: Skeleton, cam: Camera,
                cfg: TrackerConfig, bounds: PoseBounds, index: int):
    if frame.flow is None or frame.mask is None:
        raise ValueError(f"frame {index}: missing {'flow' if frame.flow is None else 'mask'}")
    if (frame.flow.width, frame.flow.height) != cam.size or np.shape(frame.mask) != (cam.height, cam.width):
        raise ValueError(f"frame {index}: data dimensions do not match the camera")
    mask = np.asarray(frame.mask, dtype=bool)
    problem = FrameProblem(skel, cam, cfg, bounds, gaussian_pyramid(frame.flow, cfg.levels), mask,
                           chamfer_map(mask), prev, prev.replace(frame=index))
    x, results = coarse_to_fine(problem.evaluate, seed, cfg.levels, cfg.options())
    return prev.with_motion(x, frame=index), problem.breakdown(x), results


def track(frames: Sequence[FrameData], state0: ModelState, bank: FilterBank, cam: Camera,
          cfg: TrackerConfig = TrackerConfig(), progress: Callable[[int, ModelState], None] | None = None) -> TrackResult:
    """Track frames 1.. starting from the initialized frame 0.

    ``frames[i]`` holds the backward flow from frame i to i-1 and the mask of
    frame i; ``frames[0]`` is not used.  A frame with missing or unusable data
    falls back to the Kalman prediction and the error is recorded.
    """
    skel = build_skeleton(state0.gender, state0.beta)
    bounds = cfg.pose_bounds()
    states = [state0.replace(frame=0)]
    costs = [{}]
    diags = [{"frame": 0, "iterations": 0, "converged": True, "message": "initialization", "error": ""}]
    for i in range(1, len(frames)):
        pred = bank.predict()
        prev = states[-1]
        try:
            state, breakdown, results = track_frame(frames[i], prev, pred.motion, skel, cam, cfg, bounds, i)
            bank = pred.update(state.motion)
            diag = {"frame": i, "iterations": sum(r.iterations for r in results),
                    "converged": all(r.converged for r in results), "message": results[-1].message,
                    "error": ""}
        except (ValueError, InvalidStartError) as exc:
            state = prev.with_motion(pred.motion, frame=i)
            breakdown = {}
            bank = pred
            diag = {"frame": i, "iterations": 0, "converged": False, "message": "degraded", "error": str(exc)}
        states.append(state)
        costs.append(breakdown)
        diags.append(diag)
        if progress is not None:
            progress(i, state)
    return TrackResult(states, costs, diags)
