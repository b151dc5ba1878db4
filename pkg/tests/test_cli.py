import json

import pytest

from keydyn.cli import main
from keydyn.io import read_csv

SMALL = ["task=top_down", "data.n_traj=4", "sim.episode_len=10", "latent.K=10", "latent.K_candidates=20",
         "train.epochs=2", "train.hidden=8", "train.horizon=2", "planner.N=16", "planner.M=1", "planner.H=3",
         "eval.n_pairs=2", "eval.max_steps=2", "imitate.demo_steps=3", "imitate.extra_steps=1", "imitate.seeds=1",
         "imitate.angle_offsets_deg=[0,30]"]


def _run(out, *cmd):
    argv = list(cmd) + ["--out-dir", str(out), "--seed", "3"]
    for s in SMALL:
        argv += ["--set", s]
    return main(argv)


def _pipeline(out):
    assert _run(out, "collect") == 0
    assert _run(out, "select-descriptors") == 0
    assert _run(out, "train", "--methods", "DS,SDS,GT3D") == 0
    assert _run(out, "evaluate", "--methods", "DS,SDS,GT3D", "--diagnostics") == 0
    assert _run(out, "imitate", "--method", "SDS") == 0
    assert _run(out, "render", "--pose", "0.01,0,0.5", "--descriptor", "2") == 0
    assert _run(out, "report") == 0


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    _pipeline(a)
    _pipeline(b)
    return a, b


def test_pipeline_outputs(runs):
    out = runs[0]
    for name in ("results.csv", "summary.txt", "imitation.csv", "render.png", "report.csv", "descriptor_scores.csv",
                 "loss_DS.csv", "planner_diagnostics_SDS.csv", "models/SDS.kdynm", "dataset/meta.json"):
        assert (out / name).exists(), name
    rows = read_csv(out / "results.csv")
    assert [r["method"] for r in rows] == ["Avg. trajectory", "DS", "SDS", "GT3D"]
    assert all(r["n"] == 2 for r in rows)
    man = json.loads((out / "manifest_evaluate.json").read_text())
    assert man["config"]["seed"] == 3 and man["config"]["planner"]["N"] == 16
    assert len(read_csv(out / "imitation.csv")) == 2


def test_csv_outputs_are_byte_identical(runs):
    a, b = runs
    names = sorted(p.name for p in a.glob("*.csv"))
    assert len(names) >= 8
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes(), n
    for n in ("models/DS.kdynm", "descriptors/observations.kdyn"):
        assert (a / n).read_bytes() != b"" and (a / n).read_bytes() == (b / n).read_bytes(), n
    ma, mb = (json.loads((d / "manifest_train.json").read_text()) for d in runs)
    assert ma["config_fingerprint"] == mb["config_fingerprint"] and ma["outputs"] == mb["outputs"]


def test_missing_prerequisites(tmp_path, capsys):
    assert _run(tmp_path, "train") == 1
    assert "keydyn collect" in capsys.readouterr().err
    assert _run(tmp_path, "evaluate", "--methods", "GT3D") == 1
    assert _run(tmp_path, "report", str(tmp_path / "nope.csv")) == 1


def test_bad_config_and_arguments(tmp_path):
    assert main(["collect", "--out-dir", str(tmp_path), "--set", "oops"]) == 2
    assert main(["collect", "--out-dir", str(tmp_path), "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["render", "--out-dir", str(tmp_path), "--pose", "1,2"]) == 1
    assert main(["render", "--out-dir", str(tmp_path), "--pose", "0,0,0", "--camera", "5"]) == 1
    with pytest.raises(SystemExit):
        main(["fly"])


def test_report_merges_inputs(runs, tmp_path):
    src = runs[0] / "results.csv"
    assert main(["report", str(src), str(src), "--out-dir", str(tmp_path)]) == 0
    assert len(read_csv(tmp_path / "report.csv")) == 2 * len(read_csv(src))
