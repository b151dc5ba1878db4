"""Quasi-static pusher-slider environment.

The object is a union of convex prisms resting on the table. A circular pusher
moves kinematically; when it touches the object the object twist follows the
ellipsoidal limit-surface model with a Coulomb friction cone at the single
contact point. All contact computations happen in the object frame, so the
step map is exactly equivariant under planar rigid transforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (V_MAX, CameraModel, Pose2, clip_speed, pose_error, rot2)

CONTACT_TOL = 1e-4


class GoalGenerationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class Prism:
    """Convex polygon (CCW, body frame) extruded between heights ``z0`` and ``z1``."""

    polygon: np.ndarray
    z0: float
    z1: float


@dataclass(eq=False)
class ObjectShape:
    family: str
    parts: list
    anchors: np.ndarray  # (n, 3) body-frame surface points
    anchor_faces: list
    nominal_extent: np.ndarray  # family-level (3,) extent used for descriptor normalization
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for part in self.parts:
            check_convex(part.polygon)
        verts = np.concatenate([p.polygon for p in self.parts])
        lo = np.array([verts[:, 0].min(), verts[:, 1].min(), min(p.z0 for p in self.parts)])
        hi = np.array([verts[:, 0].max(), verts[:, 1].max(), max(p.z1 for p in self.parts)])
        self.bbox_min, self.bbox_max = lo, hi
        self.char_radius = float(np.max(np.linalg.norm(verts, axis=1)))

    @property
    def height(self) -> float:
        return float(self.bbox_max[2])

    @property
    def gt_anchors(self) -> np.ndarray:
        """Four fixed body-frame points for the ground-truth keypoint baseline."""
        return self.anchors[[i for i, f in enumerate(self.anchor_faces) if f == "gt"]]

    def descriptor(self, pts) -> np.ndarray:
        """Body-frame points -> normalized coordinates (the synthetic dense descriptor).

        Coordinates are first normalized by this instance's bounding box and then
        rescaled by the family extent, so parametrically corresponding points of
        different instances share a descriptor.
        """
        pts = np.asarray(pts, dtype=float)
        unit = (pts - self.bbox_min) / (self.bbox_max - self.bbox_min)
        return unit * (self.nominal_extent / self.nominal_extent.max())

    def to_dict(self) -> dict:
        return {"family": self.family, "params": self.params}


def check_convex(poly) -> None:
    poly = np.asarray(poly, dtype=float)
    if len(poly) < 3:
        raise ValueError("polygon needs at least three vertices")
    e = np.roll(poly, -1, axis=0) - poly
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if np.any(cross <= 1e-15):
        raise ValueError("polygon must be convex, counterclockwise and non-degenerate")


def box_shape(length=0.175, width=0.089, height=0.038) -> ObjectShape:
    """Sugar-box-sized cuboid; ``height`` is the vertical extent for the chosen resting face."""
    a, b, h = length / 2, width / 2, height
    poly = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
    # top anchors sit on the long centerline, the part of the top face that stays
    # confidently localized from every yaw under the angled cameras
    anchors = [
        [0.0, 0.0, h], [a / 3, 0.0, h], [-a / 3, 0.0, h], [2 * a / 3, 0.0, h], [-2 * a / 3, 0.0, h],
        [a, 0.0, h / 2], [-a, 0.0, h / 2], [0.0, b, h / 2], [0.0, -b, h / 2],
        [a, b, h], [-a, b, h], [-a, -b, h], [a, -b, h],
    ]
    faces = ["top"] * 5 + ["side+x", "side-x", "side+y", "side-y"] + ["gt"] * 4
    return ObjectShape("box", [Prism(poly, 0.0, h)], np.array(anchors, dtype=float), faces,
                       np.array([length, width, height]),
                       {"length": length, "width": width, "height": height})


MUG_FAMILY = [
    # body radius, body height, handle width, handle length
    (0.040, 0.095, 0.016, 0.030),
    (0.036, 0.085, 0.014, 0.028),
    (0.044, 0.100, 0.018, 0.032),
    (0.038, 0.110, 0.015, 0.026),
    (0.042, 0.080, 0.020, 0.034),
    (0.035, 0.095, 0.012, 0.030),
    (0.046, 0.090, 0.016, 0.036),
    (0.039, 0.105, 0.018, 0.025),
    (0.043, 0.088, 0.014, 0.029),
    (0.037, 0.092, 0.017, 0.033),
]
MUG_NOMINAL = np.array([0.04 * 2 + 0.03, 0.08, 0.095])


def mug_shape(index: int) -> ObjectShape:
    r, h, w, hl = MUG_FAMILY[index]
    ang = np.arange(16) * 2 * np.pi / 16 + np.pi / 16
    body = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)
    x0 = r * math.cos(math.pi / 16) * 0.9
    handle = np.array([[x0, -w / 2], [r + hl, -w / 2], [r + hl, w / 2], [x0, w / 2]])
    parts = [Prism(body, 0.0, h), Prism(handle, 0.25 * h, 0.8 * h)]
    # parametric anchors: rim ring, handle tip, side points
    anchors = [[0.0, 0.0, h]]
    for k in range(4):
        t = k * np.pi / 2 + np.pi / 4
        anchors.append([0.6 * r * math.cos(t), 0.6 * r * math.sin(t), h])
    anchors += [[r + hl, 0.0, 0.5 * h], [-r * math.cos(math.pi / 16), 0.0, 0.5 * h]]
    anchors += [[r * 0.6, r * 0.6, h], [-r * 0.6, r * 0.6, h], [-r * 0.6, -r * 0.6, h], [r * 0.6, -r * 0.6, h]]
    faces = ["top"] * 5 + ["handle", "side"] + ["gt"] * 4
    return ObjectShape("mug", parts, np.array(anchors), faces, MUG_NOMINAL,
                       {"index": index, "radius": r, "height": h, "handle_width": w, "handle_length": hl})


def shape_from_dict(d: dict) -> ObjectShape:
    if d["family"] == "box":
        return box_shape(**d["params"])
    return mug_shape(int(d["params"]["index"]))


# --------------------------------------------------------------------------- tasks

TASKS = ("top_down", "angled", "occlusions", "mugs")


IMAGE_SIZES = {"top_down": (160, 120), "mugs": (160, 120), "angled": (320, 240), "occlusions": (320, 240)}


def task_cameras(task: str, width: int | None = None, height: int | None = None):
    """Two cameras per task; camera 0 is used at test time.

    Focal lengths scale with the image width so the field of view is fixed.
    """
    if width is None or height is None:
        width, height = IMAGE_SIZES[task]
    scale = width / 160.0
    if task in ("top_down", "mugs"):
        cams = []
        for yaw in (0.0, math.pi / 2):
            up = (math.cos(yaw + math.pi / 2), math.sin(yaw + math.pi / 2), 0.0)
            cams.append(CameraModel.look_at((0.0, 0.0, 0.9), (0.0, 0.0, 0.0), width, height,
                                            fx=190.0 * scale, up=up))
        return cams
    cams = []
    for yaw in (-math.pi / 2, math.pi):  # cameras on two adjacent sides of the table
        dist = 0.62
        eye = (dist * math.cos(yaw) * math.cos(math.pi / 4), dist * math.sin(yaw) * math.cos(math.pi / 4),
               dist * math.sin(math.pi / 4))
        cams.append(CameraModel.look_at(eye, (0.0, 0.0, 0.0), width, height, fx=240.0 * scale))
    return cams


@dataclass(eq=False)
class TaskSpec:
    name: str
    cameras: list
    resting_face: str
    dt: float = 0.1
    episode_len: int = 40
    v_max: float = V_MAX
    substeps: int = 10
    mu: float = 0.3
    pusher_radius: float = 0.01
    workspace: float = 0.2
    spawn: float = 0.05
    policy_noise: float = 0.8
    goal_steps: int = 15
    goal_min_pos_cm: float = 2.0
    goal_min_angle_deg: float = 10.0

    def make_shape(self, rng=None) -> ObjectShape:
        if self.name == "mugs":
            idx = 0 if rng is None else int(rng.integers(len(MUG_FAMILY)))
            return mug_shape(idx)
        if self.resting_face == "side":
            return box_shape(0.175, 0.038, 0.089)
        return box_shape(0.175, 0.089, 0.038)


def make_task(name: str, cfg: dict | None = None) -> TaskSpec:
    if name not in TASKS:
        raise ValueError(f"unknown task {name!r}; expected one of {TASKS}")
    sim = (cfg or {}).get("sim", {})
    kw = {k: sim[k] for k in ("dt", "v_max", "substeps", "mu", "pusher_radius", "workspace", "spawn",
                              "policy_noise", "goal_steps", "goal_min_pos_cm", "goal_min_angle_deg")
          if k in sim}
    if "episode_len" in sim:
        kw["episode_len"] = sim["episode_len"]
    face = "side" if name == "occlusions" else "flat"
    size = (cfg or {}).get("vision", {}).get("image_size", {}).get(name)
    cams = task_cameras(name, *size) if size else task_cameras(name)
    return TaskSpec(name, cams, face, **kw)


# --------------------------------------------------------------------------- state

@dataclass(frozen=True)
class EnvState:
    object_pose: Pose2
    pusher_pos: tuple
    time: float = 0.0

    @property
    def pusher(self) -> np.ndarray:
        return np.array(self.pusher_pos, dtype=float)

    def transformed(self, t) -> "EnvState":
        from .core import se2_apply

        p = se2_apply(t, self.pusher)
        return EnvState(t.apply_pose(self.object_pose), (float(p[0]), float(p[1])), self.time)


def closest_point(poly: np.ndarray, q: np.ndarray):
    """Closest boundary point of a convex CCW polygon to ``q``.

    Returns (signed distance, closest point, inward normal at the closest point);
    distance is negative when ``q`` lies inside.
    """
    a = poly
    b = np.roll(poly, -1, axis=0)
    e = b - a
    t = np.clip(np.einsum("ij,ij->i", q - a, e) / np.einsum("ij,ij->i", e, e), 0.0, 1.0)
    cp = a + t[:, None] * e
    d = np.linalg.norm(cp - q, axis=1)
    i = int(np.argmin(d))
    outward = np.stack([e[:, 1], -e[:, 0]], axis=1) / np.linalg.norm(e, axis=1)[:, None]
    inside = bool(np.all(np.einsum("ij,ij->i", q - a, outward) <= 0.0))
    if inside:
        depth = np.einsum("ij,ij->i", a - q, outward)  # distance to each edge line
        j = int(np.argmin(depth))
        return -float(depth[j]), q + depth[j] * outward[j], -outward[j]
    if d[i] < 1e-15:
        return 0.0, cp[i], -outward[i]
    return float(d[i]), cp[i], (cp[i] - q) / d[i]


def shape_closest(shape: ObjectShape, q):
    best = None
    for part in shape.parts:
        res = closest_point(part.polygon, q)
        if best is None or res[0] < best[0]:
            best = res
    return best


def limit_surface_twist(contact, normal, v_pusher, c: float, mu: float) -> np.ndarray:
    """Object body twist (vx, vy, omega) for a point push, ellipsoidal limit surface.

    ``normal`` points from the pusher into the object. Returns zero when the pusher
    separates.
    """
    vn = float(normal @ v_pusher)
    if vn <= 0.0:
        return np.zeros(3)
    A = np.diag([1.0, 1.0, 1.0 / c ** 2])
    J = np.array([[1.0, 0.0, -contact[1]], [0.0, 1.0, contact[0]]])
    G = J @ A @ J.T
    tangent = np.array([-normal[1], normal[0]])
    f = np.linalg.solve(G, v_pusher)
    fn, ft = float(f @ normal), float(f @ tangent)
    if fn > 0.0 and abs(ft) <= mu * fn:
        return A @ J.T @ f
    # sliding: the force lies on one edge of the friction cone
    best = None
    for s in (1.0, -1.0):
        dirn = normal + s * mu * tangent
        den = float(normal @ G @ dirn)
        if den <= 0.0:
            continue
        fs = (vn / den) * dirn
        slip = float((v_pusher - G @ fs) @ tangent) * s
        score = (slip >= -1e-12, s * ft)
        if best is None or score > best[0]:
            best = (score, fs)
    if best is None:
        return np.zeros(3)
    return A @ J.T @ best[1]


def _integrate(pose: Pose2, twist, dt: float) -> Pose2:
    vx, vy, w = twist
    th = w * dt
    if abs(th) < 1e-9:
        dx, dy = vx * dt - 0.5 * vy * w * dt * dt, vy * dt + 0.5 * vx * w * dt * dt
    else:
        s, c = math.sin(th), math.cos(th)
        dx = (s * vx - (1.0 - c) * vy) / w
        dy = ((1.0 - c) * vx + s * vy) / w
    d = rot2(pose.theta) @ np.array([dx, dy])
    return Pose2(pose.x + d[0], pose.y + d[1], pose.theta + th)


def pressure_constant(shape: ObjectShape) -> float:
    return 0.6 * shape.char_radius


def step(state: EnvState, shape: ObjectShape, a, dt: float = 0.1, *, substeps: int = 10,
         mu: float = 0.3, pusher_radius: float = 0.01) -> EnvState:
    """Advance one control step of length ``dt`` with pusher velocity ``a`` (world frame)."""
    v = np.asarray(a.as_array() if hasattr(a, "as_array") else a, dtype=float)
    pose = state.object_pose
    pusher = state.pusher
    c = pressure_constant(shape)
    ds = dt / substeps
    for _ in range(substeps):
        pusher = pusher + v * ds
        q = pose.to_body(pusher)
        d, cp, n = shape_closest(shape, q)
        if d < pusher_radius:
            v_body = rot2(pose.theta).T @ v
            twist = limit_surface_twist(cp, n, v_body, c, mu)
            if np.any(twist):
                pose = _integrate(pose, twist, ds)
            q = pose.to_body(pusher)
            d, cp, n = shape_closest(shape, q)
            if d < pusher_radius:
                shift = rot2(pose.theta) @ (n * (pusher_radius - d))
                pose = Pose2(pose.x + shift[0], pose.y + shift[1], pose.theta)
    return EnvState(pose, (float(pusher[0]), float(pusher[1])), state.time + dt)


def task_step(task: TaskSpec, state: EnvState, shape: ObjectShape, a) -> EnvState:
    return step(state, shape, a, task.dt, substeps=task.substeps, mu=task.mu,
                pusher_radius=task.pusher_radius)


def penetration(state: EnvState, shape: ObjectShape, pusher_radius: float = 0.01) -> float:
    d, _, _ = shape_closest(shape, state.object_pose.to_body(state.pusher))
    return max(0.0, pusher_radius - d)


def in_contact(state: EnvState, shape: ObjectShape, pusher_radius: float = 0.01, tol: float = 1e-3) -> bool:
    d, _, _ = shape_closest(shape, state.object_pose.to_body(state.pusher))
    return d < pusher_radius + tol


# --------------------------------------------------------------------------- episodes

def reset(task: TaskSpec, rng: np.random.Generator):
    """Sample an initial state and object shape."""
    shape = task.make_shape(rng)
    x, y = rng.uniform(-task.spawn, task.spawn, size=2)
    theta = -rng.uniform(-math.pi, math.pi)
    phi = rng.uniform(-math.pi, math.pi)
    rho = shape.char_radius + task.pusher_radius + rng.uniform(0.01, 0.05)
    px, py = x + rho * math.cos(phi), y + rho * math.sin(phi)
    return EnvState(Pose2(float(x), float(y), float(theta)), (float(px), float(py)), 0.0), shape


def random_policy(rng: np.random.Generator, state: EnvState, v_max: float = V_MAX,
                  noise: float = 0.5) -> np.ndarray:
    """Velocity toward the object centroid with Gaussian heading noise."""
    d = state.object_pose.xy - state.pusher
    heading = math.atan2(d[1], d[0]) + (rng.normal(0.0, noise) if noise > 0 else 0.0)
    speed = rng.uniform(0.25, 1.0) * v_max
    return clip_speed(speed * np.array([math.cos(heading), math.sin(heading)]), v_max)


@dataclass(eq=False)
class Trajectory:
    """One rollout. ``poses``/``pushers`` have length T+1, ``actions`` length T.

    Observations are referenced by (trajectory, step) and re-rendered from the
    recorded state on demand; ``images`` holds them only when stored explicitly.
    """

    task: str
    seed: int
    shape: ObjectShape
    poses: np.ndarray
    pushers: np.ndarray
    actions: np.ndarray
    dt: float = 0.1
    images: list | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.poses)) * self.dt

    def state(self, t: int) -> EnvState:
        p = self.poses[t]
        return EnvState(Pose2(*p), (float(self.pushers[t, 0]), float(self.pushers[t, 1])), t * self.dt)


def rollout(task: TaskSpec, state: EnvState, shape: ObjectShape, actions) -> list:
    states = [state]
    for a in actions:
        states.append(task_step(task, states[-1], shape, a))
    return states


def collect_episode(task: TaskSpec, length: int, seed: int, index: int = 0) -> Trajectory:
    rng = np.random.default_rng([seed, index])
    state, shape = reset(task, rng)
    poses, pushers, actions = [state.object_pose.as_array()], [state.pusher], []
    for _ in range(length):
        a = random_policy(rng, state, task.v_max, task.policy_noise)
        nxt = task_step(task, state, shape, a)
        if max(abs(nxt.object_pose.x), abs(nxt.object_pose.y)) > task.workspace:
            break
        state = nxt
        actions.append(a)
        poses.append(state.object_pose.as_array())
        pushers.append(state.pusher)
    return Trajectory(task.name, seed * 100003 + index, shape, np.array(poses), np.array(pushers),
                      np.array(actions).reshape(-1, 2), task.dt)


def collect_dataset(task: TaskSpec, n_traj: int, length: int, seed: int) -> list:
    if n_traj < 1 or length < 1:
        raise ValueError("n_traj and length must be >= 1")
    return [collect_episode(task, length, seed, i) for i in range(n_traj)]


def contact_rate(trajs, pusher_radius: float = 0.01) -> float:
    hits = total = 0
    for tr in trajs:
        for t in range(1, len(tr.poses)):
            hits += in_contact(tr.state(t), tr.shape, pusher_radius)
            total += 1
    return hits / max(total, 1)


def goal_from_control(task: TaskSpec, start: EnvState, shape: ObjectShape, a):
    """Apply a constant control for ``task.goal_steps`` steps; return (goal, accepted)."""
    state = start
    for _ in range(task.goal_steps):
        state = task_step(task, state, shape, a)
    err = pose_error(start.object_pose, state.object_pose)
    ok = err.pos_err >= task.goal_min_pos_cm or err.angle_err >= task.goal_min_angle_deg
    ok = ok and max(abs(state.object_pose.x), abs(state.object_pose.y)) <= task.workspace
    return replace(state, time=0.0), ok


def generate_goal(task: TaskSpec, start: EnvState, shape: ObjectShape, rng: np.random.Generator,
                  max_tries: int = 100, control=None) -> EnvState:
    for _ in range(max_tries):
        a = control if control is not None else random_policy(rng, start, task.v_max, task.policy_noise)
        goal, ok = goal_from_control(task, start, shape, np.asarray(a, dtype=float))
        if ok:
            return goal
    raise GoalGenerationFailed(f"no acceptable goal after {max_tries} samples")
