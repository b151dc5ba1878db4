"""The whole loop at toy scale, through the library API.

Collect random pushes, pick descriptors, train an SDS model and the ground-truth
baseline, then run a couple of closed-loop episodes. Sizes are cut down so this
finishes in seconds; the defaults in keydyn.config are the real ones.
"""
from keydyn.config import load_config
from keydyn.harness import evaluate, prepare_task, report

cfg = load_config(overrides=["data.n_traj=20", "train.epochs=40", "train.hidden=128", "planner.N=300",
                             "eval.n_pairs=3", "eval.max_steps=20"])
bundle = prepare_task(cfg, "top_down", ["SDS", "GT3D"])
print("SDS descriptors came from candidates", bundle.selection.sets["SDS"].meta["candidate_index"])
for m, curve in bundle.curves.items():
    print(f"{m}: test loss {curve[0][2]:.4g} -> {curve[-1][2]:.4g}")

rows = evaluate(bundle, cfg)
print(report(rows)[1])
