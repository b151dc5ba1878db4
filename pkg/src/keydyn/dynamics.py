"""MLP latent dynamics, multi-step simulation-error training and trajectory augmentation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import Se2Transform, sample_augmentation, se2_apply, se2_rotate_vector
from .latent import WEIGHTED, build_latent, init_alpha
from .vision import DimensionMismatch

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    pass


class AugmentationUnsupported(ValueError):
    pass


@dataclass(eq=False)
class LatentTrajectory:
    """Keypoints ``points`` (T+1, K, B), pusher positions ``robot`` (T+1, 2), ``actions`` (T, 2)."""

    points: np.ndarray
    robot: np.ndarray
    actions: np.ndarray
    space: str = "world"

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 64
    horizon: int = 5
    augment: bool = True
    aug_translation: float = 0.3
    hidden: int = 500
    test_fraction: float = 0.1
    seed: int = 0
    alpha_diag: float = 3.0

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(eq=False)
class DynamicsModel:
    """Two-hidden-layer ReLU MLP predicting the next latent from (z_t, z_t - z_{t-1}, a_t).

    Inputs are standardized with fixed statistics; with ``residual`` the network
    output is a scaled increment added to z_t.
    """

    method: str
    z_dim: int
    params: list  # [W1, b1, W2, b2, W3, b3]
    alpha: np.ndarray | None = None
    in_shift: np.ndarray | None = None
    in_scale: np.ndarray | None = None
    out_scale: np.ndarray | None = None
    residual: bool = True
    a_dim: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n_in = 2 * self.z_dim + self.a_dim
        if self.in_shift is None:
            self.in_shift = np.zeros(n_in)
        if self.in_scale is None:
            self.in_scale = np.ones(n_in)
        if self.out_scale is None:
            self.out_scale = np.ones(self.z_dim)
        W1, W3 = self.params[0], self.params[4]
        if W1.shape[0] != n_in or W3.shape[1] != self.z_dim:
            raise DimensionMismatch("layer shapes disagree with the latent dimension")
        if (self.alpha is not None) != (self.method in WEIGHTED):
            raise ValueError("weight logits are required exactly for WDS/WSDS")
        self._f32 = None

    @property
    def n_in(self) -> int:
        return 2 * self.z_dim + self.a_dim

    def encode(self, points, robot):
        """Latent from raw keypoints (..., K, B) and pusher position (..., 2)."""
        return build_latent(self.method if self.method in WEIGHTED else "DS", points, self.alpha, robot)

    def copy(self) -> "DynamicsModel":
        return DynamicsModel(self.method, self.z_dim, [p.copy() for p in self.params],
                             None if self.alpha is None else self.alpha.copy(),
                             self.in_shift.copy(), self.in_scale.copy(), self.out_scale.copy(),
                             self.residual, self.a_dim, dict(self.meta))

    def float32(self):
        if self._f32 is None:
            self._f32 = [p.astype(np.float32) for p in self.params] + [
                self.in_shift.astype(np.float32), (1.0 / self.in_scale).astype(np.float32),
                self.out_scale.astype(np.float32)]
        return self._f32


def init_model(method: str, z_dim: int, rng: np.random.Generator, hidden: int = 500,
               n_points: int | None = None, alpha_diag: float = 3.0, residual: bool = True,
               a_dim: int = 2) -> DynamicsModel:
    sizes = [2 * z_dim + a_dim, hidden, hidden, z_dim]
    params = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(n_in)
        params += [rng.uniform(-bound, bound, (n_in, n_out)), rng.uniform(-bound, bound, n_out)]
    alpha = init_alpha(n_points, alpha_diag) if method in WEIGHTED else None
    return DynamicsModel(method, z_dim, params, alpha, residual=residual, a_dim=a_dim)


def _mlp(params, x):
    W1, b1, W2, b2, W3, b3 = params
    h = ad.relu(ad.add(ad.matmul(x, W1), b1))
    h = ad.relu(ad.add(ad.matmul(h, W2), b2))
    return ad.add(ad.matmul(h, W3), b3)


def _features(model, z_t, z_prev, a):
    x = ad.concat([z_t, ad.sub(z_t, z_prev), a], axis=-1)
    return ad.div(ad.sub(x, model.in_shift), model.in_scale)


def _step(model, params, z_t, z_prev, a):
    out = _mlp(params, _features(model, z_t, z_prev, a))
    if model.residual:
        return ad.add(z_t, ad.mul(out, model.out_scale))
    return ad.mul(out, model.out_scale)


def forward(model: DynamicsModel, z_t, z_prev, a) -> np.ndarray:
    """One-step prediction for arrays with a common batch shape (..., dim)."""
    z_t, z_prev, a = (np.asarray(v, dtype=float) for v in (z_t, z_prev, a))
    if z_t.shape[-1] != model.z_dim or z_prev.shape[-1] != model.z_dim or a.shape[-1] != model.a_dim:
        raise DimensionMismatch("input dimensions do not match the model")
    squeeze = z_t.ndim == 1
    out = _step(model, model.params, np.atleast_2d(z_t), np.atleast_2d(z_prev), np.atleast_2d(a))
    return out[0] if squeeze else out


def rollout(model: DynamicsModel, z0, z_prev, actions) -> np.ndarray:
    """Open-loop predictions z_1..z_H for ``actions`` (H, a_dim); returns (H, z_dim)."""
    actions = np.asarray(actions, dtype=float)
    if len(actions) < 1:
        raise ValueError("need at least one action")
    zs, cur, prev = [], np.asarray(z0, float), np.asarray(z_prev, float)
    for a in actions:
        nxt = forward(model, cur, prev, a)
        zs.append(nxt)
        prev, cur = cur, nxt
    return np.array(zs)


def rollout_batch(model: DynamicsModel, z0, z_prev, actions) -> np.ndarray:
    """Float32 batched rollout for planning: ``actions`` (N, H, a) -> (N, H, z_dim)."""
    W1, b1, W2, b2, W3, b3, shift, inv_scale, out_scale = model.float32()
    N, H, _ = actions.shape
    cur = np.broadcast_to(np.asarray(z0, np.float32), (N, model.z_dim))
    prev = np.broadcast_to(np.asarray(z_prev, np.float32), (N, model.z_dim))
    acts = actions.astype(np.float32)
    out = np.empty((N, H, model.z_dim), dtype=np.float32)
    for h in range(H):
        x = np.concatenate([cur, cur - prev, acts[:, h]], axis=1)
        x -= shift
        x *= inv_scale
        y = np.maximum(x @ W1 + b1, 0.0)
        y = np.maximum(y @ W2 + b2, 0.0)
        y = (y @ W3 + b3) * out_scale
        nxt = cur + y if model.residual else y
        out[:, h] = nxt
        prev, cur = cur, nxt
    return out


# --------------------------------------------------------------------------- loss

def multi_step_loss(model: DynamicsModel, params, alpha, points, robot, actions, horizon: int):
    """Summed squared simulation error over ``horizon`` open-loop steps, batch-averaged.

    ``points`` (B, horizon+2, K, P) and ``robot`` (B, horizon+2, 2) hold the
    observed segment starting at t-1; ``actions`` (B, horizon+1, 2) start at t-1
    too (the first one is unused). Latents are rebuilt from keypoints with
    ``alpha`` at every step, so weight logits receive gradients.
    """
    if ad.value(points).shape[1] < horizon + 2:
        raise ValueError("segment shorter than horizon + 2")
    z = _latents(model, alpha, points, robot)
    prev, cur = z[:, 0], z[:, 1]
    loss = 0.0
    for h in range(horizon):
        nxt = _step(model, params, cur, prev, actions[:, h + 1])
        diff = ad.sub(nxt, z[:, h + 2])
        loss = ad.add(loss, ad.sum(ad.mul(diff, diff)))
        prev, cur = cur, nxt
    return ad.mul(loss, 1.0 / ad.value(points).shape[0])


class _Shim:
    """Borrow ``DynamicsModel.encode`` with substituted (possibly traced) weight logits."""

    def __init__(self, model, alpha):
        self.method, self.alpha = model.method, alpha


def _latents(model, alpha, points, robot):
    return DynamicsModel.encode(_Shim(model, alpha), points, robot)


def loss_and_grads(model: DynamicsModel, points, robot, actions, horizon: int, dtype=np.float64):
    """Loss and gradients w.r.t. the learnable parameters (weights, then alpha if present).

    The model's normalization arrays must already have ``dtype``.
    """
    tape = ad.Tape(dtype)
    params = [tape.var(p) for p in model.params]
    alpha = tape.var(model.alpha) if model.alpha is not None else None
    points, robot, actions = (np.asarray(v, dtype=dtype) for v in (points, robot, actions))
    loss = multi_step_loss(model, params, alpha, points, robot, actions, horizon)
    tape.backward(loss)
    grads = [p.grad for p in params] + ([alpha.grad] if alpha is not None else [])
    return float(loss.value), grads


# --------------------------------------------------------------------------- augmentation

def augment(traj: LatentTrajectory, rng=None, transform: Se2Transform | None = None,
            translation: float = 0.3) -> LatentTrajectory:
    """Apply one planar rigid transform to a whole keypoint/action trajectory."""
    if traj.space != "world":
        raise AugmentationUnsupported("pixel-space keypoints cannot be rigidly transformed")
    t = transform if transform is not None else sample_augmentation(rng, translation)
    return LatentTrajectory(se2_apply(t, traj.points), se2_apply(t, traj.robot),
                            se2_rotate_vector(t, traj.actions), traj.space)


def augment_batch(points, robot, actions, rng, translation: float = 0.3):
    """Independent random planar transforms for each segment of a batch (B, ...)."""
    n = len(points)
    th = rng.uniform(-np.pi, np.pi, n)
    t = rng.uniform(-translation, translation, (n, 2))
    c, s = np.cos(th), np.sin(th)
    R = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (n, 2, 2)

    def move(p, shift):
        out = p.copy()
        out[..., :2] = np.einsum("nij,n...j->n...i", R, p[..., :2]) + (t.reshape((n,) + (1,) * (p.ndim - 2) + (2,)) if shift else 0.0)
        return out

    return move(points, True), move(robot, True), move(actions, False)


# --------------------------------------------------------------------------- training

class Adam:
    def __init__(self, params, lr=1e-4, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _segments(trajs, horizon):
    return [(i, t) for i, tr in enumerate(trajs) for t in range(1, len(tr) - horizon + 1)]


def _gather(trajs, segs, horizon):
    pts = np.stack([trajs[i].points[t - 1:t + horizon + 1] for i, t in segs])
    rob = np.stack([trajs[i].robot[t - 1:t + horizon + 1] for i, t in segs])
    act = np.stack([trajs[i].actions[t - 1:t + horizon] for i, t in segs])
    return pts, rob, act


def _fit_normalizer(model, trajs):
    z = [model.encode(tr.points, tr.robot) for tr in trajs]
    feats, deltas = [], []
    for zz, tr in zip(z, trajs):
        feats.append(np.concatenate([zz[1:-1], zz[1:-1] - zz[:-2], tr.actions[1:]], axis=1))
        deltas.append(zz[2:] - zz[1:-1])
    feats = np.concatenate(feats)
    deltas = np.concatenate(deltas)
    model.in_shift = feats.mean(axis=0)
    model.in_scale = np.maximum(feats.std(axis=0), 1e-6)
    model.out_scale = np.maximum(deltas.std(axis=0), 1e-6) if model.residual else np.maximum(
        np.concatenate(z).std(axis=0), 1e-6)


def split(n: int, test_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction)) if n > 1 else 0
    n_test = min(max(n_test, 1 if n > 1 and test_fraction > 0 else 0), n - 1)
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def evaluate_loss(model: DynamicsModel, trajs, horizon: int, batch: int = 256) -> float:
    segs = _segments(trajs, horizon)
    if not segs:
        return float("nan")
    total = 0.0
    for k in range(0, len(segs), batch):
        pts, rob, act = _gather(trajs, segs[k:k + batch], horizon)
        total += float(multi_step_loss(model, model.params, model.alpha, pts, rob, act, horizon)) * len(pts)
    return total / len(segs)


def _cast(model: DynamicsModel, dtype) -> DynamicsModel:
    m = model.copy()
    m.params = [p.astype(dtype) for p in m.params]
    if m.alpha is not None:
        m.alpha = m.alpha.astype(dtype)
    m.in_shift, m.in_scale, m.out_scale = (v.astype(dtype) for v in (m.in_shift, m.in_scale, m.out_scale))
    return m


def train(data, method: str, config: TrainConfig | dict | None = None, residual: bool = True,
          dtype=np.float32):
    """Fit a dynamics model with Adam on the multi-step simulation error.

    ``data`` is a list of :class:`LatentTrajectory`. Trajectories are split
    90/10 (by default) into train/test; the checkpoint with the lowest test
    loss is returned together with per-epoch ``(epoch, train_loss, test_loss)``.
    Optimization runs in ``dtype``; the returned parameters are float64.
    """
    cfg = config if isinstance(config, TrainConfig) else TrainConfig.from_dict(config or {})
    if not data:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    train_idx, test_idx = split(len(data), cfg.test_fraction, rng)
    train_set = [data[i] for i in train_idx]
    test_set = [data[i] for i in test_idx] or train_set
    K, P = data[0].points.shape[1:]
    z_dim = K * P + data[0].robot.shape[1]
    model = init_model(method, z_dim, rng, cfg.hidden, K, cfg.alpha_diag, residual,
                       data[0].actions.shape[1])
    norm_set = train_set
    if cfg.augment:
        norm_set = [augment(tr, rng, translation=cfg.aug_translation) for tr in train_set]
    _fit_normalizer(model, norm_set)
    model.meta = {"train_config": cfg.__dict__.copy()}

    segs = _segments(train_set, cfg.horizon)
    if not segs:
        raise ValueError("no trajectory is long enough for the training horizon")
    work = _cast(model, dtype)
    trainable = list(work.params) + ([work.alpha] if work.alpha is not None else [])
    opt = Adam(trainable, lr=cfg.lr)
    curves = []
    best = (evaluate_loss(model, test_set, cfg.horizon), model.copy())
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(segs))
        running = 0.0
        for k in range(0, len(order), cfg.batch_size):
            chunk = [segs[i] for i in order[k:k + cfg.batch_size]]
            pts, rob, act = _gather(train_set, chunk, cfg.horizon)
            if cfg.augment:
                pts, rob, act = augment_batch(pts, rob, act, rng, cfg.aug_translation)
            loss, grads = loss_and_grads(work, pts, rob, act, cfg.horizon, dtype)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss became {loss} at epoch {epoch}")
            opt.step(trainable, grads)
            running += loss * len(chunk)
        model.params = [p.astype(np.float64) for p in work.params]
        if work.alpha is not None:
            model.alpha = work.alpha.astype(np.float64)
        model._f32 = None
        test_loss = evaluate_loss(model, test_set, cfg.horizon)
        curves.append((epoch, running / len(segs), test_loss))
        if test_loss < best[0]:
            best = (test_loss, model.copy())
        if epoch % 20 == 0:
            log.debug("epoch %d train %.3e test %.3e", epoch, running / len(segs), test_loss)
    out = best[1]
    out.meta["best_test_loss"] = best[0]
    return out, curves
