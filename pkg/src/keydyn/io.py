"""On-disk formats: KDYN1 dataset records, KDYNM1 model checkpoints and CSV tables.

Both binary formats share one little-endian container::

    magic        ASCII, b"KDYN1" or b"KDYNM1"
    version      u32
    header_len   u32
    header       UTF-8 JSON, ``header_len`` bytes; ``header["arrays"]`` lists
                 {"name", "dtype", "shape"} in storage order
    payload      the arrays, row-major, concatenated in that order

Dtypes are ``<f8`` (float64), ``<f4`` (float32) and ``<i4`` (int32).

A dataset is a directory holding ``meta.json`` plus one ``traj_NNNNN.kdyn``
record per trajectory with arrays ``poses`` (T+1, 3), ``pushers`` (T+1, 2),
``actions`` (T, 2) and ``image_refs`` (T+1, 2) = (step, camera). Records
written with ``store_images`` also carry ``desc`` (T+1, H, W, 3) and
``depth`` (T+1, H, W) as float32; otherwise the images are re-rendered from
the stored states, which is exact because rendering is deterministic.
"""
from __future__ import annotations

import csv
import io as _io
import json
import struct
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"KDYN1"
MODEL_MAGIC = b"KDYNM1"
VERSION = 1
_DTYPES = ("<f8", "<f4", "<i4")

REPORT_COLUMNS = ("method", "task", "pos_cm", "angle_deg", "success_rate", "n")


class FormatError(ValueError):
    pass


def write_record(path, magic: bytes, header: dict, arrays: dict) -> None:
    header = dict(header)
    specs, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = "<i4" if arr.dtype.kind in "iu" else ("<f4" if arr.dtype == np.float32 else "<f8")
        specs.append({"name": name, "dtype": dt, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header["arrays"] = specs
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<II", VERSION, len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)


def read_record(path, magic: bytes):
    data = Path(path).read_bytes()
    if data[: len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    off = len(magic)
    if len(data) < off + 8:
        raise FormatError(f"{path}: truncated header")
    version, n = struct.unpack_from("<II", data, off)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off += 8
    if off + n > len(data):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[off:off + n].decode())
        specs = header["arrays"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from None
    off += n
    arrays = {}
    for spec in specs:
        if spec["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype {spec['dtype']}")
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = off + count * dt.itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated payload")
        arrays[spec["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=off).reshape(
            spec["shape"]).astype(dt.newbyteorder("="))
        off = end
    if off != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return header, arrays


# --------------------------------------------------------------------------- datasets

def save_dataset(directory, trajs, task, seed: int, config_fingerprint: str = "",
                 store_images: bool = False) -> Path:
    from .vision import render

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, tr in enumerate(trajs):
        name = f"traj_{i:05d}.kdyn"
        steps = np.arange(len(tr.poses))
        arrays = {"poses": tr.poses, "pushers": tr.pushers, "actions": tr.actions.reshape(-1, 2),
                  "image_refs": np.stack([steps, np.zeros_like(steps)], axis=1).astype(np.int32)}
        if store_images:
            imgs = [render(task.cameras[0], tr.shape, tr.state(t).object_pose) for t in steps]
            arrays["desc"] = np.stack([im.desc for im in imgs]).astype(np.float32)
            arrays["depth"] = np.stack([im.depth for im in imgs]).astype(np.float32)
        write_record(d / name, DATASET_MAGIC, {"index": i, "seed": int(tr.seed), "dt": tr.dt}, arrays)
        entries.append({"file": name, "length": len(tr), "seed": int(tr.seed), "shape": tr.shape.to_dict()})
    meta = {"format": "KDYN1", "version": VERSION, "task": task.name, "seed": seed,
            "config_fingerprint": config_fingerprint, "store_images": store_images,
            "cameras": [c.to_dict() for c in task.cameras], "trajectories": entries}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return d


def load_dataset(directory):
    """Returns (meta, trajectories); stored images, if any, are attached as ``images``."""
    from .sim import Trajectory, shape_from_dict
    from .vision import BACKGROUND, DescriptorImage

    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    if meta.get("format") != "KDYN1":
        raise FormatError(f"{d}: not a KDYN1 dataset")
    trajs = []
    for e in meta["trajectories"]:
        header, arr = read_record(d / e["file"], DATASET_MAGIC)
        tr = Trajectory(meta["task"], header["seed"], shape_from_dict(e["shape"]), arr["poses"],
                        arr["pushers"], arr["actions"], header["dt"])
        if "desc" in arr:
            tr.images = []
            for t in range(len(arr["desc"])):
                desc = arr["desc"][t].astype(float)
                mask = ~np.all(desc == BACKGROUND, axis=-1)
                tr.images.append(DescriptorImage(desc, arr["depth"][t].astype(float), mask))
        trajs.append(tr)
    return meta, trajs


# --------------------------------------------------------------------------- models

def save_model(path, model, config_fingerprint: str = "") -> None:
    arrays = {f"p{i}": p for i, p in enumerate(model.params)}
    arrays.update(in_shift=model.in_shift, in_scale=model.in_scale, out_scale=model.out_scale)
    if model.alpha is not None:
        arrays["alpha"] = model.alpha
    header = {"method": model.method, "z_dim": model.z_dim, "a_dim": model.a_dim,
              "residual": model.residual, "n_params": len(model.params),
              "config_fingerprint": config_fingerprint, "meta": model.meta}
    write_record(path, MODEL_MAGIC, header, arrays)


def load_model(path):
    from .dynamics import DynamicsModel

    header, arr = read_record(path, MODEL_MAGIC)
    params = [arr[f"p{i}"] for i in range(header["n_params"])]
    return DynamicsModel(header["method"], header["z_dim"], params, arr.get("alpha"),
                         arr["in_shift"], arr["in_scale"], arr["out_scale"], header["residual"],
                         header["a_dim"], header.get("meta", {}))


# --------------------------------------------------------------------------- CSV

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def csv_text(rows, columns) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns) -> None:
    Path(path).write_text(csv_text(rows, columns))


def read_csv(path_or_text, numeric=True) -> list:
    text = path_or_text if "\n" in str(path_or_text) else Path(path_or_text).read_text()
    rows = list(csv.DictReader(_io.StringIO(text)))
    if numeric:
        for r in rows:
            for k, v in r.items():
                try:
                    r[k] = int(v) if v.lstrip("-").isdigit() else float(v)
                except ValueError:
                    pass
    return rows
