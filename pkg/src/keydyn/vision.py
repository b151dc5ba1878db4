"""Synthetic descriptor images and descriptor-based keypoint localization.

The renderer stands in for a trained dense-correspondence network: each object
pixel carries the normalized body-frame coordinate of the visible surface
point, so a descriptor identifies one physical point on the object. Everything
downstream (heatmaps, spatial expectations, confidence, the training losses)
only sees the descriptor image.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import BehindCamera, CameraModel, Pose2

BACKGROUND = np.array([10.0, 10.0, 10.0])
DEFAULT_ETA = 0.05


class ObjectNotVisible(RuntimeError):
    pass


class DegenerateHeatmap(ValueError):
    pass


class NoValidDepth(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(eq=False)
class DescriptorImage:
    """``desc`` is (H, W, D); ``depth`` is (H, W) with NaN marking invalid depth."""

    desc: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    body: np.ndarray | None = None  # (H, W, 3) body-frame surface points, diagnostics only

    def __post_init__(self):
        if self.desc.shape[:2] != self.depth.shape or self.mask.shape != self.depth.shape:
            raise DimensionMismatch("descriptor, depth and mask sizes disagree")

    @property
    def height(self) -> int:
        return self.desc.shape[0]

    @property
    def width(self) -> int:
        return self.desc.shape[1]

    @property
    def dim(self) -> int:
        return self.desc.shape[2]

    @property
    def valid_depth(self) -> np.ndarray:
        return np.isfinite(self.depth)


# --------------------------------------------------------------------------- rendering

def _cast_prism(part, o, d):
    """Ray/prism slab test in the body frame. Returns entry distance (inf on miss)."""
    n_rays = len(o)
    s_in = np.zeros(n_rays)
    s_out = np.full(n_rays, np.inf)
    poly = part.polygon
    e = np.roll(poly, -1, axis=0) - poly
    normals = np.stack([e[:, 1], -e[:, 0]], axis=1)
    planes = [(np.array([0.0, 0.0, 1.0]), part.z1), (np.array([0.0, 0.0, -1.0]), -part.z0)]
    planes += [(np.array([nx, ny, 0.0]), nx * px + ny * py) for (nx, ny), (px, py) in zip(normals, poly)]
    ok = np.ones(n_rays, dtype=bool)
    for n, h in planes:
        # elementwise dot products keep each ray's result independent of the batch
        nd = d[:, 0] * n[0] + d[:, 1] * n[1] + d[:, 2] * n[2]
        rhs = h - (o[:, 0] * n[0] + o[:, 1] * n[1] + o[:, 2] * n[2])
        with np.errstate(divide="ignore", invalid="ignore"):
            s = rhs / nd
        enter = nd < 0
        leave = nd > 0
        s_in = np.where(enter, np.maximum(s_in, s), s_in)
        s_out = np.where(leave, np.minimum(s_out, s), s_out)
        ok &= ~((nd == 0) & (rhs < 0))
    hit = ok & (s_in <= s_out) & (s_in > 0)
    return np.where(hit, s_in, np.inf)


def _object_window(cam: CameraModel, shape, pose: Pose2):
    """Flat indices of the pixel rectangle around the object's projection.

    Each part is convex, so its image lies inside the hull of its projected
    vertices and no ray outside the rectangle can hit. None if a vertex is
    behind the camera (cast every ray then).
    """
    verts = np.vstack([np.column_stack([part.polygon, np.full(len(part.polygon), z)])
                       for part in shape.parts for z in (part.z0, part.z1)])
    try:
        uv, _ = cam.project(pose.to_world(verts))
    except BehindCamera:
        return None
    u0, v0 = np.maximum(np.floor(uv.min(axis=0)).astype(int) - 1, 0)
    u1 = min(int(np.ceil(uv[:, 0].max())) + 2, cam.width)
    v1 = min(int(np.ceil(uv[:, 1].max())) + 2, cam.height)
    vv, uu = np.mgrid[v0:max(v1, v0), u0:max(u1, u0)]
    return (vv * cam.width + uu).ravel()


def render(cam: CameraModel, shape, pose: Pose2, noise: float = 0.0,
           rng: np.random.Generator | None = None, require_visible: bool = True) -> DescriptorImage:
    """Ray-cast the object (z-buffered over its convex parts) and the table plane."""
    rays = cam.pixel_rays().reshape(-1, 3)
    eye = cam.center
    idx = _object_window(cam, shape, pose)
    if idx is None:
        idx = np.arange(len(rays))
    # move rays into the object frame
    o0 = pose.to_body(eye[None, :])[0]
    c, s = np.cos(pose.theta), np.sin(pose.theta)
    r = rays[idx]
    d = r.copy()
    d[:, 0] = c * r[:, 0] + s * r[:, 1]
    d[:, 1] = -s * r[:, 0] + c * r[:, 1]
    o = np.broadcast_to(o0, d.shape)
    hit = np.full(len(d), np.inf)
    for part in shape.parts:
        hit = np.minimum(hit, _cast_prism(part, o, d))
    best = np.full(len(rays), np.inf)
    best[idx] = hit
    mask = np.isfinite(best)
    d_full = np.zeros_like(rays)
    d_full[idx] = d
    d = d_full
    if require_visible and not mask.any():
        raise ObjectNotVisible("object covers no pixels")
    body = o0 + np.where(mask, best, 0.0)[:, None] * d
    desc = np.broadcast_to(BACKGROUND, d.shape).copy()
    desc[mask] = shape.descriptor(body[mask])
    if noise > 0.0:
        rng = rng if rng is not None else np.random.default_rng(0)
        desc[mask] += rng.normal(0.0, noise, size=(int(mask.sum()), desc.shape[1]))
    # table plane z = 0 behind the object
    with np.errstate(divide="ignore", invalid="ignore"):
        s_table = np.where(rays[:, 2] < 0, -eye[2] / rays[:, 2], np.nan)
    depth = np.where(mask, best, s_table)
    H, W = cam.height, cam.width
    return DescriptorImage(desc.reshape(H, W, -1), depth.reshape(H, W), mask.reshape(H, W),
                           np.where(mask[:, None], body, np.nan).reshape(H, W, 3))


# --------------------------------------------------------------------------- heatmaps

def _sq_dist(img_desc, d):
    return np.sum((img_desc - np.asarray(d, dtype=float)) ** 2, axis=-1)


def heatmap(img: DescriptorImage, d, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Unnormalized descriptor-match heatmap exp(-|I(p) - d|^2 / eta^2), shape (H, W)."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    return np.exp(-_sq_dist(img.desc, d) / eta ** 2)


def normalize(h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    total = h.sum()
    if not total > 0:
        raise DegenerateHeatmap("heatmap has no positive mass")
    return h / total


def _log_weights(img, d, eta):
    if eta <= 0:
        raise ValueError("eta must be positive")
    return -_sq_dist(img.desc, d) / eta ** 2


def _softmax_flat(logits, keep=None):
    lg = logits if keep is None else np.where(keep, logits, -np.inf)
    m = np.max(lg)
    if not np.isfinite(m):
        return None
    w = np.exp(lg - m)
    return w / w.sum()


def pixel_grid(height: int, width: int) -> np.ndarray:
    """(H, W, 2) grid of (u, v) = (column, row) pixel coordinates."""
    v, u = np.mgrid[0:height, 0:width].astype(float)
    return np.stack([u, v], axis=-1)


def spatial_expectation_pixel(img: DescriptorImage, d, eta: float = DEFAULT_ETA) -> np.ndarray:
    """Expected (u, v) under the normalized heatmap.

    Normalization is done in log space, which gives the same distribution as
    normalizing ``heatmap`` directly but does not underflow for far descriptors.
    """
    w = _softmax_flat(_log_weights(img, d, eta))
    if w is None:
        raise DegenerateHeatmap("heatmap has no positive mass")
    return np.tensordot(w, pixel_grid(img.height, img.width), axes=([0, 1], [0, 1]))


def spatial_expectation_z(img: DescriptorImage, d, eta: float = DEFAULT_ETA) -> float:
    valid = img.valid_depth
    if not valid.any():
        raise NoValidDepth("image has no valid depth")
    w = _softmax_flat(_log_weights(img, d, eta), valid)
    if w is None:
        raise NoValidDepth("no heatmap mass on valid-depth pixels")
    return float(np.sum(w * np.where(valid, img.depth, 0.0)))


@dataclass(frozen=True)
class Correspondence:
    uv: np.ndarray
    world: np.ndarray
    confidence: float
    depth: float


def _round_pixel(uv, width, height):
    u = int(np.clip(np.floor(uv[0] + 0.5), 0, width - 1))
    v = int(np.clip(np.floor(uv[1] + 0.5), 0, height - 1))
    return u, v


def correspond(img: DescriptorImage, d, eta: float, cam: CameraModel) -> Correspondence:
    uv = spatial_expectation_pixel(img, d, eta)
    z = spatial_expectation_z(img, d, eta)
    u, v = _round_pixel(uv, img.width, img.height)
    conf = float(np.exp(-np.sum((img.desc[v, u] - d) ** 2) / eta ** 2))
    return Correspondence(uv, cam.unproject(uv, z), conf, z)


def correspond_many(img: DescriptorImage, descs, eta: float, cam: CameraModel | None = None):
    """Vectorized ``correspond`` for K descriptors.

    Returns (uv (K, 2), depth (K,), world (K, 3) or None, confidence (K,)).
    """
    descs = np.atleast_2d(np.asarray(descs, dtype=float))
    flat = img.desc.reshape(-1, img.dim)
    valid = img.valid_depth.reshape(-1)
    if not valid.any():
        raise NoValidDepth("image has no valid depth")
    # Drop pixels whose weight underflows to exactly 0 for every descriptor. The
    # distance to the descriptors' bounding box lower-bounds each pixel's distance;
    # the pixel nearest that box upper-bounds every descriptor's best match.
    gap = np.maximum(descs.min(axis=0) - flat, 0.0) + np.maximum(flat - descs.max(axis=0), 0.0)
    lb = np.sum(gap ** 2, axis=1)
    ub = np.sum((flat[np.argmin(lb)] - descs) ** 2, axis=1).max()
    rows = np.flatnonzero(lb <= ub + 800.0 * eta ** 2)
    flat = flat[rows]
    sq = (np.sum(flat ** 2, axis=1)[:, None] - 2.0 * flat @ descs.T + np.sum(descs ** 2, axis=1)[None, :])
    logits = -np.maximum(sq, 0.0) / eta ** 2
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    grid = pixel_grid(img.height, img.width).reshape(-1, 2)[rows]
    uv = (w.T @ grid) / w.sum(axis=0)[:, None]
    keep = valid[rows]
    wv = w[keep]
    mass = wv.sum(axis=0)
    if np.any(mass <= 0):
        raise NoValidDepth("no heatmap mass on valid-depth pixels")
    depth = (wv.T @ img.depth.reshape(-1)[rows][keep]) / mass
    u = np.clip(np.floor(uv[:, 0] + 0.5), 0, img.width - 1).astype(int)
    v = np.clip(np.floor(uv[:, 1] + 0.5), 0, img.height - 1).astype(int)
    conf = np.exp(-np.sum((img.desc[v, u] - descs) ** 2, axis=1) / eta ** 2)
    world = cam.unproject(uv, depth) if cam is not None else None
    return uv, depth, world, conf


# --------------------------------------------------------------------------- losses

def gaussian_target(p_star, sigma: float, height: int, width: int) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    g = pixel_grid(height, width) - np.asarray(p_star, dtype=float)
    return np.exp(-np.sum(g ** 2, axis=-1) / sigma ** 2)


def heatmap_loss(pred, target):
    """Mean squared error over pixels; ``pred`` may be a traced Var."""
    if ad.value(pred).shape != np.shape(target):
        raise DimensionMismatch("prediction and target sizes differ")
    diff = ad.sub(pred, target)
    return ad.mean(ad.mul(diff, diff))


def _traced_heatmap(desc, d, eta):
    diff = ad.sub(desc, np.asarray(d, dtype=float))
    return ad.exp(ad.mul(ad.sum(ad.mul(diff, diff), axis=-1), -1.0 / eta ** 2))


def spatial_losses(desc, depth, d, eta, p_star, z_star):
    """(L1 pixel loss, L1 depth loss) for a descriptor image ``desc`` (array or Var).

    ``depth`` is a constant (H, W) array with NaN for invalid pixels.
    """
    h = _traced_heatmap(desc, d, eta)
    H, W = ad.value(h).shape
    hn = ad.div(h, ad.sum(h))
    grid = pixel_grid(H, W)
    uv = ad.sum(ad.sum(ad.mul(ad.reshape(hn, (H, W, 1)), grid), axis=0), axis=0)
    l_pix = ad.sum(ad.abs(ad.sub(uv, np.asarray(p_star, dtype=float))))
    valid = np.isfinite(depth)
    if not valid.any():
        raise NoValidDepth("image has no valid depth")
    hv = ad.mul(h, valid.astype(float))
    mass = ad.sum(hv)
    if not ad.value(mass) > 0:
        raise NoValidDepth("no heatmap mass on valid-depth pixels")
    jz = ad.div(ad.sum(ad.mul(hv, np.where(valid, depth, 0.0))), mass)
    l_z = ad.abs(ad.sub(jz, float(z_star)))
    return l_pix, l_z


def total_loss(parts, w_heatmap: float = 1.0, w_spatial: float = 1.0):
    """Weighted sum of (heatmap, spatial pixel, spatial depth) loss terms."""
    if w_heatmap < 0 or w_spatial < 0:
        raise ValueError("loss weights must be nonnegative")
    l_heat, l_pix, l_z = parts
    return ad.add(ad.mul(l_heat, w_heatmap), ad.mul(ad.add(l_pix, l_z), w_spatial))


def correspondence_loss(desc, depth, d, p_star, z_star, eta=DEFAULT_ETA, sigma=5.0,
                        w_heatmap=1.0, w_spatial=1.0):
    """Full dense-correspondence training loss for one descriptor match.

    ``desc`` plays the role of the network output and may be a traced Var, so
    gradients flow back to every descriptor-image entry.
    """
    h = _traced_heatmap(desc, d, eta)
    H, W = ad.value(h).shape
    l_heat = heatmap_loss(h, gaussian_target(p_star, sigma, H, W))
    l_pix, l_z = spatial_losses(desc, depth, d, eta, p_star, z_star)
    return total_loss((l_heat, l_pix, l_z), w_heatmap, w_spatial)
