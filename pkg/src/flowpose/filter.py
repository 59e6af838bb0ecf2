"""Constant-velocity Kalman filters for pose angles and translation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import N_MOTION, N_POSE


class InvalidMeasurementError(ValueError):
    pass


def wrap_angle(x: np.ndarray) -> np.ndarray:
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), 2.0 * np.pi)


def _transition(dt: float) -> np.ndarray:
    return np.array([[1.0, dt], [0.0, 1.0]])


def _process_noise(q: np.ndarray, dt: float) -> np.ndarray:
    base = np.array([[dt**3 / 3.0, dt**2 / 2.0], [dt**2 / 2.0, dt]])
    return np.asarray(q, dtype=float)[..., None, None] * base


@dataclass(frozen=True, eq=False)
class KalmanChannel:
    """One scalar position/velocity filter; arrays allow a batch of channels."""
    mean: np.ndarray   # (..., 2)
    cov: np.ndarray    # (..., 2, 2)
    q: np.ndarray
    r: np.ndarray
    dt: float = 1.0
    angular: np.ndarray | bool = False

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        r = np.asarray(self.r, dtype=float)
        if np.any(~(q > 0)) or np.any(~(r > 0)):
            raise ValueError("filter noise q and r must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)

    @classmethod
    def start(cls, x0, q, r, dt: float = 1.0, var0: float = 1e-4, angular=False) -> "KalmanChannel":
        x0 = np.asarray(x0, dtype=float)
        mean = np.stack([x0, np.zeros_like(x0)], axis=-1)
        cov = np.broadcast_to(var0 * np.eye(2), x0.shape + (2, 2)).copy()
        return cls(mean, cov, np.broadcast_to(q, x0.shape), np.broadcast_to(r, x0.shape), dt,
                   np.broadcast_to(angular, x0.shape))

    @property
    def position(self) -> np.ndarray:
        return self.mean[..., 0]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[..., 1]


def kf_predict(ch: KalmanChannel) -> KalmanChannel:
    F = _transition(ch.dt)
    mean = ch.mean @ F.T
    cov = F @ ch.cov @ F.T + _process_noise(ch.q, ch.dt)
    return KalmanChannel(mean, 0.5 * (cov + np.swapaxes(cov, -1, -2)), ch.q, ch.r, ch.dt, ch.angular)


def kf_update(ch: KalmanChannel, z) -> KalmanChannel:
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise InvalidMeasurementError("measurement is not finite")
    innov = z - ch.mean[..., 0]
    innov = np.where(ch.angular, wrap_angle(innov), innov)
    P = ch.cov
    s = P[..., 0, 0] + ch.r
    gain = P[..., :, 0] / s[..., None]
    mean = ch.mean + gain * innov[..., None]
    # Joseph form keeps the covariance symmetric PSD
    I_KH = np.eye(2) - gain[..., :, None] * np.array([1.0, 0.0])
    cov = I_KH @ P @ np.swapaxes(I_KH, -1, -2) + ch.r[..., None, None] * gain[..., :, None] * gain[..., None, :]
    return KalmanChannel(mean, 0.5 * (cov + np.swapaxes(cov, -1, -2)), ch.q, ch.r, ch.dt, ch.angular)


@dataclass(frozen=True, eq=False)
class FilterBank:
    """72 angle channels for theta followed by 3 linear channels for sigma."""
    channels: KalmanChannel

    @classmethod
    def seed(cls, theta, sigma, q_theta=1e-3, q_sigma=1e-3, r=1e-2, dt=1.0, var0=1e-4) -> "FilterBank":
        x0 = np.concatenate([np.asarray(theta, dtype=float).reshape(N_POSE),
                             np.asarray(sigma, dtype=float).reshape(3)])
        q = np.concatenate([np.full(N_POSE, q_theta), np.full(3, q_sigma)])
        angular = np.arange(N_MOTION) < N_POSE
        return cls(KalmanChannel.start(x0, q, r, dt, var0, angular))

    def predict(self) -> "FilterBank":
        return FilterBank(kf_predict(self.channels))

    def update(self, motion) -> "FilterBank":
        motion = np.asarray(motion, dtype=float)
        if motion.shape != (N_MOTION,):
            raise InvalidMeasurementError(f"expected {N_MOTION} values, got {motion.shape}")
        return FilterBank(kf_update(self.channels, motion))

    @property
    def motion(self) -> np.ndarray:
        return self.channels.position.copy()
