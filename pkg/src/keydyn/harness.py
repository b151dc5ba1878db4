"""Closed-loop evaluation: goal reaching, ablations, the GT-3D baseline and one-shot imitation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Pose2, PoseError, pose_error
from .dynamics import LatentTrajectory, TrainConfig, train
from .io import REPORT_COLUMNS, csv_text
from .latent import DescriptorSet, confidence_stats, observe, sample_ds, select_sds
from .plan import PLANNERS, PlannerConfig, RewardSpec, goal_reward
from .sim import (EnvState, TaskSpec, collect_dataset, generate_goal, make_task, penetration, reset,
                  shape_closest, task_step)
from .vision import DEFAULT_ETA, ObjectNotVisible, correspond_many, render

log = logging.getLogger(__name__)

SUCCESS_POS_CM = 3.0
SUCCESS_ANGLE_DEG = 30.0


class UnsupportedTask(ValueError):
    pass


# --------------------------------------------------------------------------- observers

class DescriptorObserver:
    """Keypoints from rendering camera 0 and localizing a descriptor set."""

    def __init__(self, dset: DescriptorSet, cam, eta: float = DEFAULT_ETA, noise: float = 0.0):
        self.dset, self.cam, self.eta, self.noise = dset, cam, eta, noise

    def keypoints(self, state: EnvState, shape) -> np.ndarray:
        img = render(self.cam, shape, state.object_pose, self.noise)
        return observe(self.dset, img, self.cam, self.eta).points


class GroundTruthObserver:
    """World-frame positions of the shape's four ground-truth anchors."""

    def keypoints(self, state: EnvState, shape) -> np.ndarray:
        if shape.family != "box":
            raise UnsupportedTask("the ground-truth baseline needs a single rigid box")
        return state.object_pose.to_world(shape.gt_anchors)


def gt3d_latent(state: EnvState, shape) -> np.ndarray:
    """(4*3 + 2,) latent of exact anchor positions followed by the pusher position."""
    pts = GroundTruthObserver().keypoints(state, shape)
    return np.concatenate([pts.ravel(), state.pusher])


# --------------------------------------------------------------------------- data pipeline

@dataclass
class DescriptorSelection:
    candidates: DescriptorSet
    sets: dict  # method -> DescriptorSet
    scores: np.ndarray
    mean_conf: np.ndarray


def reference_image(task: TaskSpec, trajs):
    tr = trajs[0]
    return render(task.cameras[0], tr.shape, tr.state(0).object_pose)


def observe_dataset(task: TaskSpec, trajs, descs, eta: float = DEFAULT_ETA, noise: float = 0.0):
    """Per-trajectory world keypoints (T+1, K, 3), pixels (T+1, K, 2) and confidences (T+1, K)."""
    cam = task.cameras[0]
    out = []
    for tr in trajs:
        pts, pix, conf = [], [], []
        for t in range(len(tr.poses)):
            img = tr.images[t] if tr.images is not None else render(cam, tr.shape, tr.state(t).object_pose, noise)
            uv, _, world, c = correspond_many(img, descs, eta, cam)
            pts.append(world), pix.append(uv), conf.append(c)
        out.append((np.array(pts), np.array(pix), np.array(conf)))
    return out


def min_separation(task: TaskSpec, lat_cfg: dict) -> float:
    """Minimum SDS pixel spacing: configured, or 25 px per 640 px of image width."""
    sep = lat_cfg.get("min_sep_px")
    return float(sep) if sep is not None else 25.0 * task.cameras[0].width / 640.0


def select_descriptors(task: TaskSpec, trajs, lat_cfg: dict, seed: int, observations=None,
                       eta: float = DEFAULT_ETA) -> tuple:
    """Sample the candidate pool, score it on the dataset and build the DS and SDS sets.

    Returns the selection and the candidate observations (reused for training).
    """
    rng = np.random.default_rng([seed, 17])
    space = lat_cfg.get("space", "world")
    cands = sample_ds(reference_image(task, trajs), lat_cfg["K_candidates"], rng, space)
    if observations is None:
        observations = observe_dataset(task, trajs, cands.descriptors, eta)
    conf = np.concatenate([o[2] for o in observations])
    scores, mean = confidence_stats(cands, confidences=conf, tau=lat_cfg["tau_conf"])
    K = min(lat_cfg["K"], len(cands))
    ds = cands.subset(np.arange(K), method="DS")
    sds = select_sds(cands, scores, lat_cfg["K_star"], min_separation(task, lat_cfg), tiebreak=mean)
    sets = {"DS": ds, "WDS": ds, "SDS": sds, "WSDS": sds}
    return DescriptorSelection(cands, sets, scores, mean), observations


def candidate_index(sel: DescriptorSelection, method: str) -> np.ndarray:
    if method in ("SDS", "WSDS"):
        return np.asarray(sel.sets[method].meta["candidate_index"], dtype=int)
    return np.arange(len(sel.sets[method]))


def latent_trajectories(trajs, method: str, sel: DescriptorSelection | None = None,
                        observations=None, space: str = "world") -> list:
    out = []
    for i, tr in enumerate(trajs):
        if method == "GT3D":
            pts = np.array([Pose2(*p).to_world(tr.shape.gt_anchors) for p in tr.poses])
            if tr.shape.family != "box":
                raise UnsupportedTask("the ground-truth baseline needs a single rigid box")
        else:
            idx = candidate_index(sel, method)
            pts = observations[i][0 if space == "world" else 1][:, idx]
        out.append(LatentTrajectory(pts, tr.pushers.copy(), tr.actions.reshape(-1, 2), space))
    return out


@dataclass
class TaskBundle:
    task: TaskSpec
    trajs: list
    selection: DescriptorSelection | None
    models: dict
    curves: dict
    eta: float = DEFAULT_ETA

    def observer(self, method: str):
        if method == "GT3D":
            return GroundTruthObserver()
        return DescriptorObserver(self.selection.sets[method], self.task.cameras[0], self.eta)


def train_config(cfg: dict) -> TrainConfig:
    tc = dict(cfg["train"])
    tc["alpha_diag"] = cfg["latent"]["alpha_diag"]
    if cfg["latent"].get("space", "world") != "world":
        tc["augment"] = False  # rigid augmentation is undefined for pixel coordinates
    return TrainConfig.from_dict(tc)


def prepare_task(cfg: dict, task_name: str | None = None, methods=None, trajs=None) -> TaskBundle:
    """Collect data, select descriptors and train one model per method."""
    name = task_name or cfg["task"]
    task = make_task(name, cfg)
    methods = list(methods or cfg["eval"]["methods"])
    if trajs is None:
        trajs = collect_dataset(task, cfg["data"]["n_traj"], task.episode_len, cfg["seed"])
    eta = cfg["vision"]["eta"]
    sel = obs = None
    if any(m != "GT3D" for m in methods):
        sel, obs = select_descriptors(task, trajs, cfg["latent"], cfg["seed"], eta=eta)
    models, curves = {}, {}
    tc = train_config(cfg)
    for m in methods:
        data = latent_trajectories(trajs, m, sel, obs, cfg["latent"].get("space", "world"))
        models[m], curves[m] = train(data, m, tc)
        log.info("%s/%s trained, best test loss %.4g", name, m, models[m].meta["best_test_loss"])
    return TaskBundle(task, trajs, sel, models, curves, eta)


# --------------------------------------------------------------------------- closed loop

@dataclass(frozen=True)
class EvalPair:
    start: EnvState
    goal: EnvState
    shape: object
    seed: int


@dataclass
class EpisodeResult:
    error: PoseError
    steps: int
    costs: list
    success: bool
    failed: bool = False
    states: list = field(default_factory=list, repr=False)


def is_success(err: PoseError) -> bool:
    return err.pos_err <= SUCCESS_POS_CM and err.angle_err <= SUCCESS_ANGLE_DEG


def make_pairs(task: TaskSpec, n_pairs: int, seed: int) -> list:
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, 1000 + i])
        start, shape = reset(task, rng)
        goal = generate_goal(task, start, shape, rng)
        pairs.append(EvalPair(start, goal, shape, seed * 100003 + i))
    return pairs


def planner_for(cfg: dict):
    pc = dict(cfg["planner"])
    return PLANNERS[pc.pop("kind", "mppi")], PlannerConfig.from_dict(pc)


def mpc_loop(observe_fn, step_fn, state, model, reward_at, pcfg: PlannerConfig, steps: int,
             planner=None, seed: int = 0, diagnostics=None):
    """Generic receding-horizon loop.

    ``observe_fn(state) -> z``; ``step_fn(state, a) -> state``;
    ``reward_at(t) -> RewardSpec``. Returns (states, latents, actions).
    """
    planner = planner or PLANNERS["mppi"]
    states, zs, actions = [state], [], []
    warm = None
    z_prev = None
    for t in range(steps):
        z = observe_fn(state)
        zs.append(z)
        hist = (z, z if z_prev is None else z_prev)
        plan = planner(model, hist, reward_at(t), replace(pcfg, seed=seed * 1000 + t), warm)
        if diagnostics is not None:
            diagnostics.extend({"step": t, **d} for d in plan.diagnostics)
        a = plan.actions[0]
        state = step_fn(state, a)
        states.append(state)
        actions.append(a)
        warm = plan.actions
        z_prev = z
    zs.append(observe_fn(state))
    return states, zs, actions


def _encoder(model, observer, shape):
    def f(state):
        return np.asarray(model.encode(observer.keypoints(state, shape), state.pusher), dtype=float)
    return f


def closed_loop_episode(task: TaskSpec, model, observer, pcfg: PlannerConfig, pair: EvalPair,
                        max_steps: int = 30, planner=None, diagnostics=None) -> EpisodeResult:
    enc = _encoder(model, observer, pair.shape)
    failed = False
    costs = []
    try:
        z_goal = enc(pair.goal)
        reward = RewardSpec.to_goal(z_goal)
        states, zs, _ = mpc_loop(enc, lambda s, a: task_step(task, s, pair.shape, a), pair.start, model,
                                 lambda t: reward, pcfg, max_steps, planner, pair.seed, diagnostics)
        costs = [-goal_reward(z, z_goal) for z in zs]
        final = states[-1]
    except ObjectNotVisible:
        failed, states, final = True, [pair.start], pair.start
    err = pose_error(pair.goal.object_pose, final.object_pose)
    return EpisodeResult(err, len(states) - 1, costs, is_success(err) and not failed, failed, states)


def _episode_job(args):
    *head, want_diag = args
    diag = [] if want_diag else None
    res = closed_loop_episode(*head, diagnostics=diag)
    res.states = []  # keep worker results small
    return res, diag or []


def _map(fn, items, workers: int):
    """Ordered map, optionally over a process pool; order never depends on scheduling."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def evaluate(bundle: TaskBundle, cfg: dict, methods=None, n_pairs: int | None = None,
             diagnostics: dict | None = None, workers: int | None = None) -> list:
    """Run every method on one shared set of evaluation pairs; returns report rows."""
    workers = workers if workers is not None else int(cfg["eval"].get("workers", 1))
    task = bundle.task
    methods = list(methods or bundle.models)
    n_pairs = n_pairs or cfg["eval"]["n_pairs"]
    pairs = make_pairs(task, n_pairs, cfg["seed"])
    planner, pcfg = planner_for(cfg)
    rows = []
    errs = [pose_error(p.start.object_pose, p.goal.object_pose) for p in pairs]
    rows.append(_row("Avg. trajectory", task.name, errs, None))
    for m in methods:
        if m == "GT3D" and task.name == "mugs":
            continue
        obs = bundle.observer(m)
        args = [(task, bundle.models[m], obs, pcfg, p, cfg["eval"]["max_steps"], planner,
                 diagnostics is not None) for p in pairs]
        out = _map(_episode_job, args, workers)
        results = [r for r, _ in out]
        if diagnostics is not None:
            diagnostics[m] = [{"pair": i, **d} for i, (_, diag) in enumerate(out) for d in diag]
        rows.append(_row(m, task.name, [r.error for r in results], [r.success for r in results]))
        log.info("%s %s: %.2f cm %.1f deg", task.name, m, rows[-1]["pos_cm"], rows[-1]["angle_deg"])
    return rows


def _row(method, task, errs, successes):
    return {"method": method, "task": task,
            "pos_cm": float(np.mean([e.pos_err for e in errs])) if errs else float("nan"),
            "angle_deg": float(np.mean([e.angle_err for e in errs])) if errs else float("nan"),
            "success_rate": float(np.mean(successes)) if successes else float("nan"),
            "n": len(errs)}


# --------------------------------------------------------------------------- imitation

@dataclass
class Demonstration:
    states: list
    actions: np.ndarray
    keypoints: np.ndarray  # (T+1, K, B)
    latents: np.ndarray  # (T+1, dim)
    shape: object

    def __len__(self) -> int:
        return len(self.actions)


def scripted_push(task: TaskSpec, shape, steps: int = 25, speed: float = 0.08,
                  lateral: float = 0.03, start=(-0.06, -0.05, 0.0)):
    """A straight push across the long face, offset from the centroid so the object turns."""
    if steps < 1:
        raise ValueError("a demonstration needs at least one step")
    pose = Pose2(*start)
    half = -float(np.min(shape.parts[0].polygon[:, 1]))
    p_body = np.array([lateral, -(half + task.pusher_radius + 0.005)])
    pusher = pose.to_world(p_body[None])[0]
    state = EnvState(pose, (float(pusher[0]), float(pusher[1])), 0.0)
    d = pose.to_world(np.array([[0.0, 1.0]]))[0] - pose.xy
    actions = np.tile(speed * d / np.linalg.norm(d), (steps, 1))
    return state, actions


def record_demonstration(task: TaskSpec, shape, start: EnvState, actions, observer, encode) -> Demonstration:
    actions = np.asarray(actions, dtype=float).reshape(-1, 2)
    if len(actions) == 0:
        raise ValueError("empty demonstration script")
    states = [start]
    for a in actions:
        states.append(task_step(task, states[-1], shape, a))
    ys = np.array([observer.keypoints(s, shape) for s in states])
    zs = np.array([encode(y, s.pusher) for y, s in zip(ys, states)])
    return Demonstration(states, actions, ys, zs, shape)


def imitation_cost(err: PoseError) -> float:
    return float(np.clip(err.pos_err / SUCCESS_POS_CM + err.angle_err / SUCCESS_ANGLE_DEG, 0.0, 1.0))


def perturbed_start(demo: Demonstration, offset, pusher_radius: float = 0.01) -> EnvState:
    """Demo start with the object moved by (dx, dy, dtheta); the pusher keeps its
    world position unless it would overlap, in which case it backs off radially."""
    s0 = demo.states[0]
    p = s0.object_pose
    pose = Pose2(p.x + offset[0], p.y + offset[1], p.theta + offset[2])
    pusher = s0.pusher.copy()
    out = pusher - pose.xy
    out /= np.linalg.norm(out)
    while True:
        q = pose.to_body(pusher[None])[0]
        dist = shape_closest(demo.shape, q)[0]
        if dist >= pusher_radius + 0.005:
            break
        pusher = pusher + 0.002 * out
    return EnvState(pose, (float(pusher[0]), float(pusher[1])), 0.0)


def imitation_sweep(task: TaskSpec, demo: Demonstration, offsets, model, observer, pcfg: PlannerConfig,
                    seeds=(0,), extra_steps: int = 10, planner=None) -> list:
    """Track the demo latent trajectory from perturbed starts; one row per (offset, seed)."""
    enc = _encoder(model, observer, demo.shape)
    ref = RewardSpec.tracking(demo.latents)
    goal = demo.states[-1].object_pose
    rows = []
    for off in offsets:
        start = perturbed_start(demo, off, task.pusher_radius)
        for seed in seeds:
            try:
                states, _, _ = mpc_loop(enc, lambda s, a: task_step(task, s, demo.shape, a), start, model,
                                        ref.at, pcfg, len(demo) + extra_steps, planner, seed)
                final, failed = states[-1], False
            except ObjectNotVisible:
                final, failed = start, True
            err = pose_error(goal, final.object_pose)
            rows.append({"dx_cm": 100 * off[0], "dy_cm": 100 * off[1], "dtheta_deg": math.degrees(off[2]),
                         "seed": seed, "pos_cm": err.pos_err, "angle_deg": err.angle_err,
                         "cost": imitation_cost(err), "success": int(is_success(err) and not failed)})
    return rows


def success_by_offset(rows, key: str = "dtheta_deg") -> list:
    """[(offset, success_rate)] sorted by offset."""
    groups = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r["success"])
    return [(k, float(np.mean(v))) for k, v in sorted(groups.items())]


# --------------------------------------------------------------------------- reporting

def report(rows) -> tuple:
    """(csv text, plain-text summary) for evaluation rows."""
    text = csv_text(rows, REPORT_COLUMNS)
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    methods = list(dict.fromkeys(r["method"] for r in rows))
    cell = {(r["method"], r["task"]): r for r in rows}
    head = f"{'':18s}" + "".join(f"{t:>22s}" for t in tasks)
    sub = f"{'':18s}" + "".join(f"{'pos, cm':>11s}{'angle':>11s}" for _ in tasks)
    lines = [head, sub]
    for m in methods:
        line = f"{m:18s}"
        for t in tasks:
            r = cell.get((m, t))
            line += f"{r['pos_cm']:11.2f}{r['angle_deg']:11.1f}" if r else f"{'-':>11s}{'-':>11s}"
        lines.append(line)
    return text, "\n".join(lines) + "\n"
