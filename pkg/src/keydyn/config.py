"""JSON run configuration with dotted-key overrides."""
from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS = {
    "task": "top_down",
    "seed": 0,
    "sim": {
        "v_max": 0.2,
        "dt": 0.1,
        "episode_len": 40,
        "substeps": 10,
        "mu": 0.3,
        "pusher_radius": 0.01,
        "workspace": 0.2,
        "spawn": 0.05,
        "policy_noise": 0.8,
        "goal_steps": 15,
        "goal_min_pos_cm": 2.0,
        "goal_min_angle_deg": 10.0,
    },
    "data": {"n_traj": 50, "store_images": False},
    "vision": {
        "eta": 0.05,
        "sigma_px": 5.0,
        "w_heatmap": 1.0,
        "w_spatial": 1.0,
        "descriptor_noise": 0.0,
        # (width, height) per task; the angled views need the finer grid to keep
        # top-face descriptors confidently localized from every yaw
        "image_size": {"top_down": [160, 120], "mugs": [160, 120], "angled": [320, 240],
                       "occlusions": [320, 240]},
    },
    "latent": {
        "K": 50,
        "K_candidates": 100,
        "K_star": 4,
        "min_sep_px": None,  # None: 25 px at 640 wide, scaled to the task's image width
        "tau_conf": 0.9,
        "space": "world",
        "alpha_diag": 3.0,
    },
    "train": {
        "epochs": 200,
        "lr": 1e-4,
        "batch_size": 64,
        "horizon": 5,
        "augment": True,
        "aug_translation": 0.3,
        "hidden": 500,
        "test_fraction": 0.1,
        "seed": 0,
    },
    "planner": {
        "kind": "mppi",
        "N": 1000,
        "M": 3,
        "H": 10,
        "beta": 0.7,
        "sigma": 0.1,
        "gamma": 10.0,
        "select": "best",
        "elite_frac": 0.1,
    },
    "eval": {
        "methods": ["DS", "SDS", "GT3D"],
        "n_pairs": 20,
        "max_steps": 30,
        "workers": 1,
    },
    "imitate": {
        "demo_steps": 25,
        "extra_steps": 10,
        "angle_offsets_deg": [0.0, 30.0, 60.0, 90.0],
        "seeds": 5,
    },
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_dotted(cfg: dict, key: str, value) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the JSON file at ``path``, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = merge(cfg, json.loads(Path(path).read_text()))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override must look like key=value, got {item!r}")
        set_dotted(cfg, key.strip(), _parse_value(value.strip()))
    return cfg


def fingerprint(cfg: dict) -> str:
    import hashlib

    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
