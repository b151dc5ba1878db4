"""Latent states built from tracked descriptor keypoints (DS, SDS, WDS, WSDS)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .vision import DEFAULT_ETA, DimensionMismatch, correspond_many

METHODS = ("DS", "SDS", "WDS", "WSDS")
WEIGHTED = ("WDS", "WSDS")


class InsufficientMask(ValueError):
    pass


class SelectionInfeasible(ValueError):
    pass


class MissingWeights(ValueError):
    pass


@dataclass(eq=False)
class DescriptorSet:
    descriptors: np.ndarray  # (K, D)
    pixels: np.ndarray  # (K, 2) reference-frame pixel (u, v) of each descriptor
    body_points: np.ndarray  # (K, 3) source surface point, diagnostics only
    space: str = "world"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.descriptors) < 1:
            raise ValueError("a descriptor set needs at least one descriptor")
        if self.space not in ("world", "pixel"):
            raise ValueError("space must be 'world' or 'pixel'")

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def point_dim(self) -> int:
        return 3 if self.space == "world" else 2

    def subset(self, idx, **meta) -> "DescriptorSet":
        idx = np.asarray(idx, dtype=int)
        return DescriptorSet(self.descriptors[idx], self.pixels[idx], self.body_points[idx],
                             self.space, {**self.meta, **meta})

    def to_json(self) -> str:
        return json.dumps({
            "descriptors": self.descriptors.tolist(), "pixels": self.pixels.tolist(),
            "body_points": self.body_points.tolist(), "space": self.space, "meta": self.meta,
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DescriptorSet":
        d = json.loads(text)
        return cls(np.array(d["descriptors"], dtype=float), np.array(d["pixels"], dtype=float),
                   np.array(d["body_points"], dtype=float), d["space"], d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "DescriptorSet":
        return cls.from_json(Path(path).read_text())


def sample_ds(ref_img, K: int, rng: np.random.Generator, space: str = "world") -> DescriptorSet:
    """K descriptors drawn without replacement from the object pixels of a reference image."""
    idx = np.flatnonzero(ref_img.mask.ravel())
    if len(idx) < K:
        raise InsufficientMask(f"reference mask has {len(idx)} pixels, need {K}")
    pick = np.sort(rng.choice(idx, size=K, replace=False))
    W = ref_img.width
    pixels = np.stack([pick % W, pick // W], axis=1).astype(float)
    body = ref_img.body.reshape(-1, 3)[pick] if ref_img.body is not None else np.full((K, 3), np.nan)
    return DescriptorSet(ref_img.desc.reshape(-1, ref_img.dim)[pick].copy(), pixels, body, space,
                         {"method": "DS"})


def frame_confidences(candidates: DescriptorSet, frames, eta: float = DEFAULT_ETA) -> np.ndarray:
    """(n_frames, K) correspondence confidences."""
    return np.array([correspond_many(img, candidates.descriptors, eta)[3] for img in frames])


def confidence_stats(candidates: DescriptorSet, frames=None, eta: float = DEFAULT_ETA,
                     tau: float = 0.5, confidences=None):
    """Per-descriptor reliability over a dataset.

    Returns ``(fraction, mean)``: the fraction of frames whose correspondence
    confidence exceeds ``tau``, and the average confidence.
    """
    conf = confidences if confidences is not None else frame_confidences(candidates, frames, eta)
    conf = np.asarray(conf, dtype=float)
    if conf.ndim != 2 or len(conf) == 0:
        raise ValueError("need at least one frame")
    return (conf > tau).mean(axis=0), conf.mean(axis=0)


def select_sds(candidates: DescriptorSet, scores, K_star: int, min_sep: float,
               tiebreak=None) -> DescriptorSet:
    """Greedy selection by descending score under a reference-pixel separation constraint.

    Equal scores are ordered by ``tiebreak`` (descending) when given, then by
    candidate index.
    """
    scores = np.asarray(scores, dtype=float)
    if len(candidates) < K_star:
        raise SelectionInfeasible("fewer candidates than requested")
    tb = np.zeros_like(scores) if tiebreak is None else np.asarray(tiebreak, dtype=float)
    order = np.lexsort((np.arange(len(scores)), -tb, -scores))
    chosen = []
    for i in order:
        p = candidates.pixels[i]
        if all(np.linalg.norm(p - candidates.pixels[j]) >= min_sep for j in chosen):
            chosen.append(int(i))
            if len(chosen) == K_star:
                break
    if len(chosen) < K_star:
        raise SelectionInfeasible(f"only {len(chosen)} candidates satisfy the separation")
    return candidates.subset(chosen, method="SDS", scores=[float(scores[i]) for i in chosen],
                             candidate_index=chosen)


@dataclass(frozen=True)
class KeypointObservation:
    points: np.ndarray  # (K, B)
    confidence: np.ndarray  # (K,)


def observe(dset: DescriptorSet, img, cam, eta: float = DEFAULT_ETA) -> KeypointObservation:
    uv, _, world, conf = correspond_many(img, dset.descriptors, eta, cam)
    pts = world if dset.space == "world" else uv
    return KeypointObservation(pts, conf)


def row_softmax(alpha):
    return ad.softmax(alpha, axis=-1)


def init_alpha(K: int, diag: float = 3.0) -> np.ndarray:
    return np.eye(K) * diag


def wds_map(y, alpha):
    """Convex recombination of keypoints: row k of the output is sum_i softmax(alpha)[k, i] y_i.

    ``y`` has shape (..., K, B); either argument may be a traced Var.
    """
    K = ad.value(alpha).shape
    if len(K) != 2 or K[0] != K[1] or ad.value(y).shape[-2] != K[1]:
        raise DimensionMismatch("alpha must be K x K with K matching the keypoints")
    return ad.matmul(row_softmax(alpha), y)


def build_latent(method: str, y, alpha=None, o_robot=None):
    """Flattened latent (..., K*B + 2): object keypoints followed by the pusher position."""
    if method not in METHODS and method != "GT3D":
        raise ValueError(f"unknown method {method!r}")
    weighted = method in WEIGHTED
    if weighted and alpha is None:
        raise MissingWeights(f"{method} needs weight logits")
    if not weighted and alpha is not None:
        raise ValueError(f"{method} takes no weight logits")
    pts = wds_map(y, alpha) if weighted else y
    shape = ad.value(pts).shape
    flat = ad.reshape(pts, shape[:-2] + (shape[-2] * shape[-1],))
    if o_robot is None:
        return flat
    return ad.concat([flat, o_robot], axis=-1)


def latent_dim(n_points: int, point_dim: int = 3) -> int:
    return n_points * point_dim + 2
