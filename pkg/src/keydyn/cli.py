"""``keydyn`` command line.

Every subcommand reads the same JSON config (``--config`` plus ``--set k=v``
overrides) and works inside ``--out-dir``::

    out/dataset/            collect
    out/descriptors/        select-descriptors (candidate pool, DS/SDS sets, scores)
    out/models/<M>.kdynm    train, plus out/loss_<M>.csv
    out/results.csv         evaluate
    out/imitation.csv       imitate
    out/render.png          render
    out/report.csv          report

Each command also writes ``manifest_<command>.json``. No output embeds wall
clock time, so reruns with the same config and seeds give identical files.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import fingerprint, load_config

log = logging.getLogger("keydyn")

LOSS_COLUMNS = ("epoch", "train_loss", "test_loss")
SCORE_COLUMNS = ("index", "score", "mean_conf", "u", "v", "bx", "by", "bz", "in_ds", "in_sds")
IMITATION_COLUMNS = ("dx_cm", "dy_cm", "dtheta_deg", "seed", "pos_cm", "angle_deg", "cost", "success")
DIAG_COLUMNS = ("pair", "step", "iteration", "best", "mean", "ess")


class CliError(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers

def _paths(out: Path) -> dict:
    return {"dataset": out / "dataset", "descriptors": out / "descriptors", "models": out / "models"}


def _rel(p, out: Path) -> str:
    p = Path(p)
    return str(p.relative_to(out)) if p.is_relative_to(out) else str(p)


def _manifest(out: Path, command: str, cfg: dict, outputs, **extra) -> None:
    doc = {"command": command, "version": __version__, "config": cfg,
           "config_fingerprint": fingerprint(cfg), "outputs": sorted(_rel(p, out) for p in outputs), **extra}
    (out / f"manifest_{command}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_trajs(out: Path, cfg: dict):
    from .io import load_dataset

    d = _paths(out)["dataset"]
    if not (d / "meta.json").exists():
        raise CliError(f"no dataset in {d}; run `keydyn collect` first")
    meta, trajs = load_dataset(d)
    if meta["task"] != cfg["task"]:
        raise CliError(f"dataset task {meta['task']!r} does not match config task {cfg['task']!r}")
    return trajs


def _save_observations(path: Path, observations) -> None:
    from .io import write_record

    lengths = np.array([len(o[0]) for o in observations], dtype=np.int32)
    arrays = {"lengths": lengths}
    for k, name in enumerate(("world", "pixels", "conf")):
        arrays[name] = np.concatenate([o[k] for o in observations])
    write_record(path, b"KDYNO1", {"kind": "candidate observations"}, arrays)


def _load_observations(path: Path):
    from .io import read_record

    _, arr = read_record(path, b"KDYNO1")
    cuts = np.cumsum(arr["lengths"])[:-1]
    parts = [np.split(arr[n], cuts) for n in ("world", "pixels", "conf")]
    return list(zip(*parts))


def _load_selection(out: Path):
    from .harness import DescriptorSelection
    from .latent import DescriptorSet

    d = _paths(out)["descriptors"]
    if not (d / "candidates.json").exists():
        raise CliError(f"no descriptor selection in {d}; run `keydyn select-descriptors` first")
    cands = DescriptorSet.load(d / "candidates.json")
    ds, sds = DescriptorSet.load(d / "DS.json"), DescriptorSet.load(d / "SDS.json")
    extra = json.loads((d / "scores.json").read_text())
    sel = DescriptorSelection(cands, {"DS": ds, "WDS": ds, "SDS": sds, "WSDS": sds},
                              np.array(extra["scores"]), np.array(extra["mean_conf"]))
    return sel, _load_observations(d / "observations.kdyn")


def _load_models(out: Path, methods):
    from .io import load_model

    models = {}
    for m in methods:
        p = _paths(out)["models"] / f"{m}.kdynm"
        if not p.exists():
            raise CliError(f"no trained {m} model at {p}; run `keydyn train` first")
        models[m] = load_model(p)
    return models


def _bundle(out: Path, cfg: dict, methods):
    from .harness import TaskBundle
    from .sim import make_task

    task = make_task(cfg["task"], cfg)
    sel = _load_selection(out)[0] if any(m != "GT3D" for m in methods) else None
    return TaskBundle(task, [], sel, _load_models(out, methods), {}, cfg["vision"]["eta"])


def _methods(args, cfg) -> list:
    return list(args.methods.split(",")) if getattr(args, "methods", None) else list(cfg["eval"]["methods"])


def _plot_losses(path: Path, curves: dict) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for m, c in curves.items():
        c = np.asarray(c)
        ax.plot(c[:, 0], c[:, 2], label=f"{m} test")
        ax.plot(c[:, 0], c[:, 1], "--", alpha=0.6, label=f"{m} train")
    ax.set_xlabel("epoch")
    ax.set_ylabel("multi-step loss")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# --------------------------------------------------------------------------- commands

def cmd_collect(args, cfg, out: Path) -> list:
    from .io import save_dataset
    from .sim import collect_dataset, contact_rate, make_task

    task = make_task(cfg["task"], cfg)
    trajs = collect_dataset(task, cfg["data"]["n_traj"], task.episode_len, cfg["seed"])
    d = save_dataset(_paths(out)["dataset"], trajs, task, cfg["seed"], fingerprint(cfg),
                     cfg["data"]["store_images"])
    rate = contact_rate(trajs, task.pusher_radius)
    print(f"collected {len(trajs)} trajectories for {task.name} (contact rate {rate:.2f}) -> {d}")
    return [d]


def cmd_select(args, cfg, out: Path) -> list:
    from .harness import select_descriptors
    from .io import write_csv
    from .sim import make_task

    task = make_task(cfg["task"], cfg)
    trajs = _load_trajs(out, cfg)
    sel, obs = select_descriptors(task, trajs, cfg["latent"], cfg["seed"], eta=cfg["vision"]["eta"])
    d = _paths(out)["descriptors"]
    d.mkdir(parents=True, exist_ok=True)
    sel.candidates.save(d / "candidates.json")
    sel.sets["DS"].save(d / "DS.json")
    sel.sets["SDS"].save(d / "SDS.json")
    (d / "scores.json").write_text(json.dumps({"scores": sel.scores.tolist(),
                                               "mean_conf": sel.mean_conf.tolist()}))
    _save_observations(d / "observations.kdyn", obs)
    sds_idx = set(int(i) for i in sel.sets["SDS"].meta["candidate_index"])
    n_ds = len(sel.sets["DS"])
    rows = [{"index": i, "score": float(sel.scores[i]), "mean_conf": float(sel.mean_conf[i]),
             "u": float(sel.candidates.pixels[i, 0]), "v": float(sel.candidates.pixels[i, 1]),
             "bx": float(sel.candidates.body_points[i, 0]), "by": float(sel.candidates.body_points[i, 1]),
             "bz": float(sel.candidates.body_points[i, 2]), "in_ds": int(i < n_ds), "in_sds": int(i in sds_idx)}
            for i in range(len(sel.candidates))]
    write_csv(out / "descriptor_scores.csv", rows, SCORE_COLUMNS)
    print(f"selected SDS candidates {sorted(sds_idx)} from {len(sel.candidates)}; DS uses the first {n_ds}")
    return [d, out / "descriptor_scores.csv"]


def cmd_train(args, cfg, out: Path) -> list:
    from .dynamics import train
    from .harness import latent_trajectories, train_config
    from .io import save_model, write_csv

    methods = _methods(args, cfg)
    trajs = _load_trajs(out, cfg)
    sel = obs = None
    if any(m != "GT3D" for m in methods):
        sel, obs = _load_selection(out)
    tc = train_config(cfg)
    mdir = _paths(out)["models"]
    mdir.mkdir(parents=True, exist_ok=True)
    outputs, curves = [], {}
    for m in methods:
        data = latent_trajectories(trajs, m, sel, obs, cfg["latent"].get("space", "world"))
        model, curves[m] = train(data, m, tc)
        save_model(mdir / f"{m}.kdynm", model, fingerprint(cfg))
        rows = [dict(zip(LOSS_COLUMNS, c)) for c in curves[m]]
        write_csv(out / f"loss_{m}.csv", rows, LOSS_COLUMNS)
        outputs += [mdir / f"{m}.kdynm", out / f"loss_{m}.csv"]
        print(f"{m}: best test loss {model.meta['best_test_loss']:.5g}")
    if args.plot:
        _plot_losses(out / "loss_curves.png", curves)
        outputs.append(out / "loss_curves.png")
    return outputs


def cmd_evaluate(args, cfg, out: Path) -> list:
    from .harness import evaluate, report
    from .io import write_csv

    methods = _methods(args, cfg)
    bundle = _bundle(out, cfg, methods)
    diag = {} if args.diagnostics else None
    rows = evaluate(bundle, cfg, methods, args.n_pairs, diag)
    text, summary = report(rows)
    (out / "results.csv").write_text(text)
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    outputs = [out / "results.csv", out / "summary.txt"]
    for m, d in (diag or {}).items():
        p = out / f"planner_diagnostics_{m}.csv"
        write_csv(p, d, DIAG_COLUMNS)
        outputs.append(p)
    return outputs


def cmd_imitate(args, cfg, out: Path) -> list:
    from .harness import (imitation_sweep, planner_for, record_demonstration, scripted_push,
                          success_by_offset)
    from .io import write_csv
    from .sim import make_task

    method = args.method
    bundle = _bundle(out, cfg, [method])
    task = bundle.task
    model, observer = bundle.models[method], bundle.observer(method)
    icfg = cfg["imitate"]
    shape = task.make_shape(np.random.default_rng([cfg["seed"], 7]))
    start, actions = scripted_push(task, shape, icfg["demo_steps"])
    demo = record_demonstration(task, shape, start, actions, observer, model.encode)
    offsets = [(0.0, 0.0, math.radians(a)) for a in icfg["angle_offsets_deg"]]
    for dx in icfg.get("xy_offsets_cm", []):
        offsets.append((dx / 100.0, 0.0, 0.0))
    planner, pcfg = planner_for(cfg)
    rows = imitation_sweep(task, demo, offsets, model, observer, pcfg, range(icfg["seeds"]),
                           icfg["extra_steps"], planner)
    write_csv(out / "imitation.csv", rows, IMITATION_COLUMNS)
    for off, rate in success_by_offset(rows):
        print(f"dtheta {off:6.1f} deg: success {rate:.2f}")
    outputs = [out / "imitation.csv"]
    if args.plot:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 4))
        sc = ax.scatter([r["dtheta_deg"] for r in rows], [r["dx_cm"] for r in rows],
                        c=[r["cost"] for r in rows], vmin=0, vmax=1, cmap="viridis")
        fig.colorbar(sc, label="cost")
        ax.set_xlabel("orientation offset, deg")
        ax.set_ylabel("x offset, cm")
        fig.tight_layout()
        fig.savefig(out / "imitation.png", dpi=100, metadata={"Software": None})
        plt.close(fig)
        outputs.append(out / "imitation.png")
    return outputs


def cmd_render(args, cfg, out: Path) -> list:
    from .core import Pose2
    from .sim import make_task
    from .vision import heatmap, normalize, render

    task = make_task(cfg["task"], cfg)
    try:
        x, y, th = (float(v) for v in args.pose.split(","))
    except ValueError:
        raise CliError("--pose must look like x,y,theta") from None
    if not 0 <= args.camera < len(task.cameras):
        raise CliError(f"--camera must be in [0, {len(task.cameras) - 1}]")
    cam = task.cameras[args.camera]
    shape = task.make_shape(np.random.default_rng([cfg["seed"], 7]))
    img = render(cam, shape, Pose2(x, y, th), cfg["vision"]["descriptor_noise"],
                 rng=np.random.default_rng(cfg["seed"]))
    panels = [np.where(img.mask[..., None], np.clip(img.desc, 0, 1), 0.0)]
    if args.descriptor is not None:
        from .latent import DescriptorSet

        d = DescriptorSet.load(args.descriptor_file or _paths(out)["descriptors"] / "candidates.json")
        h = normalize(heatmap(img, d.descriptors[args.descriptor], cfg["vision"]["eta"]))
        h = h / max(h.max(), 1e-300)
        panels.append(_pyplot().get_cmap("magma")(h)[..., :3])
    pic = np.concatenate(panels, axis=1)
    path = out / "render.png"
    _pyplot().imsave(path, pic, metadata={"Software": None})
    print(f"wrote {path} ({img.width}x{img.height}, {int(img.mask.sum())} object pixels)")
    return [path]


def cmd_report(args, cfg, out: Path) -> list:
    from .harness import report
    from .io import read_csv

    inputs = args.inputs or [out / "results.csv"]
    rows = []
    for p in inputs:
        if not Path(p).exists():
            raise CliError(f"missing results file {p}")
        rows += read_csv(Path(p))
    text, summary = report(rows)
    (out / "report.csv").write_text(text)
    (out / "report.txt").write_text(summary)
    print(summary, end="")
    return [out / "report.csv", out / "report.txt"]


COMMANDS = {
    "collect": cmd_collect,
    "select-descriptors": cmd_select,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "imitate": cmd_imitate,
    "render": cmd_render,
    "report": cmd_report,
}


# --------------------------------------------------------------------------- parser

def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON config file")
    p.add_argument("--seed", type=int, default=d, help="override the top-level seed")
    p.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else "runs/default")
    p.add_argument("--set", dest="overrides", action="append", metavar="K=V",
                   default=argparse.SUPPRESS if suppress else [], help="dotted config override")
    p.add_argument("--diagnostics", action="store_true",
                   default=argparse.SUPPRESS if suppress else False,
                   help="write per-iteration planner diagnostics")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keydyn", description="Keypoint-latent dynamics and MPC for planar pushing.")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)
    parsers = {}
    for name in COMMANDS:
        parsers[name] = sp = sub.add_parser(name)
        _global_flags(sp, suppress=True)
    for name in ("train", "evaluate"):
        parsers[name].add_argument("--methods", help="comma-separated, default from config eval.methods")
    for name in ("train", "imitate"):
        parsers[name].add_argument("--plot", action="store_true", help="also write a PNG plot")
    parsers["evaluate"].add_argument("--n-pairs", type=int)
    parsers["imitate"].add_argument("--method", default="SDS")
    r = parsers["render"]
    r.add_argument("--pose", required=True, help="object pose x,y,theta (m, m, rad)")
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--descriptor", type=int, help="candidate index whose heatmap is shown alongside")
    r.add_argument("--descriptor-file", help="descriptor set JSON, default out/descriptors/candidates.json")
    parsers["report"].add_argument("inputs", nargs="*", help="results CSV files")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except (OSError, ValueError) as e:
        print(f"keydyn: bad config: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        outputs = COMMANDS[args.command](args, cfg, out)
    except CliError as e:
        print(f"keydyn {args.command}: {e}", file=sys.stderr)
        return 1
    _manifest(out, args.command, cfg, outputs, argv=list(sys.argv[1:] if argv is None else argv))
    return 0


if __name__ == "__main__":
    sys.exit(main())
