"""Planar geometry, camera model and pose metrics shared across the package."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

V_MAX = 0.2  # m/s, pusher speed limit


class BehindCamera(ValueError):
    pass


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into (-pi, pi]."""
    out = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    if np.ndim(out) == 0:
        return float(out)
    return out


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def to_world(self, pts) -> np.ndarray:
        """Map body-frame points (..., 2) or (..., 3) into the world frame."""
        pts = np.asarray(pts, dtype=float)
        out = pts.copy()
        c, s = math.cos(self.theta), math.sin(self.theta)
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + self.x
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + self.y
        return out

    def to_body(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        out = pts.copy()
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = pts[..., 0] - self.x
        dy = pts[..., 1] - self.y
        out[..., 0] = c * dx + s * dy
        out[..., 1] = -s * dx + c * dy
        return out


@dataclass(frozen=True)
class Se2Transform:
    """Rotation by ``dtheta`` about the origin followed by translation ``(dx, dy)``."""

    dx: float = 0.0
    dy: float = 0.0
    dtheta: float = 0.0

    @classmethod
    def identity(cls) -> "Se2Transform":
        return cls(0.0, 0.0, 0.0)

    def compose(self, other: "Se2Transform") -> "Se2Transform":
        """Return ``self * other`` (apply ``other`` first)."""
        t = se2_apply(self, np.array([other.dx, other.dy]))
        return Se2Transform(float(t[0]), float(t[1]), wrap_angle(self.dtheta + other.dtheta))

    def inverse(self) -> "Se2Transform":
        c, s = math.cos(self.dtheta), math.sin(self.dtheta)
        return Se2Transform(-(c * self.dx + s * self.dy), -(-s * self.dx + c * self.dy),
                            wrap_angle(-self.dtheta))

    def apply_pose(self, pose: Pose2) -> Pose2:
        p = se2_apply(self, pose.xy)
        return Pose2(float(p[0]), float(p[1]), pose.theta + self.dtheta)

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])


def se2_apply(t: Se2Transform, p) -> np.ndarray:
    """Apply ``t`` to points of shape (..., 2); extra trailing coords (e.g. height) pass through."""
    p = np.asarray(p, dtype=float)
    out = p.copy()
    c, s = math.cos(t.dtheta), math.sin(t.dtheta)
    out[..., 0] = c * p[..., 0] - s * p[..., 1] + t.dx
    out[..., 1] = s * p[..., 0] + c * p[..., 1] + t.dy
    return out


def se2_rotate_vector(t: Se2Transform, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = v.copy()
    c, s = math.cos(t.dtheta), math.sin(t.dtheta)
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


@dataclass(frozen=True)
class Action:
    vx: float
    vy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy])


def clip_speed(a, v_max: float = V_MAX) -> np.ndarray:
    """Radially clamp velocity vectors (..., 2) to the disc of radius ``v_max``."""
    a = np.asarray(a, dtype=float)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    scale = np.minimum(1.0, v_max / np.maximum(n, 1e-300))
    return a * scale


@dataclass(frozen=True)
class PoseError:
    pos_err: float  # cm
    angle_err: float  # degrees


def pose_error(a: Pose2, b: Pose2) -> PoseError:
    pos = 100.0 * math.hypot(a.x - b.x, a.y - b.y)
    # min over both orders keeps the metric exactly symmetric under float rounding
    d = min(abs(wrap_angle(a.theta - b.theta)), abs(wrap_angle(b.theta - a.theta)))
    ang = math.degrees(d)
    return PoseError(pos, ang)


class CameraModel:
    """Pinhole camera. ``R``/``t`` map world points into the camera frame (z forward)."""

    def __init__(self, fx, fy, cx, cy, R, t, width, height):
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = np.asarray(R, dtype=float)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation must be a proper rotation")
        self.fx, self.fy, self.cx, self.cy = float(fx), float(fy), float(cx), float(cy)
        self.R = R
        self.t = np.asarray(t, dtype=float).reshape(3)
        self.width, self.height = int(width), int(height)

    @classmethod
    def look_at(cls, eye, target, width, height, fx, fy=None, up=(0.0, 0.0, 1.0)):
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        fwd /= np.linalg.norm(fwd)
        up = np.asarray(up, dtype=float)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            # looking straight down: pick world +y as image "up"
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls(fx, fy if fy is not None else fx, (width - 1) / 2.0, (height - 1) / 2.0,
                   R, -R @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, p) -> np.ndarray:
        return np.asarray(p, dtype=float) @ self.R.T + self.t

    def project(self, p):
        """World point(s) (..., 3) -> (uv (..., 2), depth (...))."""
        pc = self.to_camera(p)
        z = pc[..., 2]
        if np.any(z <= 0):
            raise BehindCamera("point is behind the camera")
        uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def unproject(self, uv, depth) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx * depth
        y = (uv[..., 1] - self.cy) / self.fy * depth
        pc = np.stack([x, y, depth], axis=-1)
        return (pc - self.t) @ self.R

    def pixel_rays(self):
        """Unit-depth ray directions (world frame) for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(float)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return d @ self.R

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["R"], d["t"], d["width"], d["height"])


def sample_augmentation(rng: np.random.Generator, translation: float = 0.3,
                        rotation: float = math.pi) -> Se2Transform:
    """Random planar transform; translation uniform in [-translation, translation]^2 and
    rotation uniform in (-rotation, rotation]."""
    dx, dy = rng.uniform(-1.0, 1.0, size=2) * translation
    dtheta = -rng.uniform(-1.0, 1.0) * rotation  # maps [-1, 1) onto (-r, r]
    return Se2Transform(float(dx), float(dy), float(dtheta) if rotation else 0.0)
