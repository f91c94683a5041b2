import json

import numpy as np
import pytest

from redundet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, default_config_path, main
from redundet.masks import mask_to_box
from redundet.model import Detection, DetectionSet, save_detection_set

TINY = """\
[generator]
image_size = 32
objects_min = 1
objects_max = 2
size_min = 5
size_max = 7
min_gap = 2
n_scenes = 10
n_novel = 2
seed = 3

[train]
epochs = {epochs}
batch_size = 4
lr = {lr}
channels = 8
seed = 1
"""


@pytest.fixture
def tiny_config(tmp_path):
    def make(epochs=1, lr=0.05):
        path = tmp_path / f"tiny_{epochs}_{lr}.ini"
        path.write_text(TINY.format(epochs=epochs, lr=lr))
        return str(path)
    return make


def _dset(sid="s0", cond="both"):
    m = np.zeros((16, 16), bool)
    m[2:9, 3:12] = True
    m2 = np.zeros((16, 16), bool)
    m2[11:15, 1:5] = True
    dets = [Detection(1, 0.9, mask_to_box(m), m), Detection(2, 0.6, mask_to_box(m2), m2)]
    return DetectionSet(sid, dets, cond, (16, 16))


def test_packaged_config_exists():
    from redundet.synthdata import GeneratorConfig
    from redundet.training import TrainConfig

    GeneratorConfig.from_file(default_config_path()).validate()
    TrainConfig.from_file(default_config_path()).validate()


def test_mc_score_identical_files(tmp_path, capsys):
    path = tmp_path / "d.json"
    save_detection_set(_dset(), path)
    csv = tmp_path / "classes.csv"
    code = main(["mc-score", "--output", str(path), "--modality", f"rgb={path}", "--modality", f"depth={path}",
                 "--csv", str(csv)])
    assert code == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["per_modality"]["mask"]["combined"] == 100.0
    assert rep["per_modality"]["box"]["combined"] == 100.0
    assert csv.read_text().startswith("class,n,")


def test_mc_score_scene_missing_from_modality(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_detection_set(_dset("s0"), a)
    save_detection_set(_dset("s1"), b)
    assert main(["mc-score", "--output", str(a), "--modality", f"rgb={b}"]) == EXIT_DATA
    assert "s0" in capsys.readouterr().err


def test_evaluate_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "model.ckpt"
    code = main(["evaluate", "--checkpoint", str(missing), "--data", str(tmp_path)])
    assert code == EXIT_DATA
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["evaluate"], ["frobnicate"], ["train", "--data", "x", "--out", "y", "--mode", "bagging"],
                                  ["mc-score", "--output", "o.json", "--modality", "rgb"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err.strip()


def test_report_without_artifacts(tmp_path):
    assert main(["report", "--artifacts", str(tmp_path / "missing")]) == EXIT_DATA
    assert main(["report", "--artifacts", str(tmp_path)]) == EXIT_DATA


def test_numeric_failure_exit_code(tmp_path, tiny_config, capsys):
    cfg = tiny_config(epochs=2, lr=1e30)
    assert main(["generate-data", "--config", cfg, "--out", str(tmp_path / "data")]) == EXIT_OK
    code = main(["train", "--config", cfg, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "m")])
    assert code == EXIT_NUMERIC
    assert "numerical" in capsys.readouterr().err


def test_full_flow(tmp_path, tiny_config, capsys):
    cfg = tiny_config()
    data, run = str(tmp_path / "data"), tmp_path / "run"
    assert main(["generate-data", "--config", cfg, "--out", data]) == EXIT_OK
    counts = json.loads(capsys.readouterr().out)["splits"]
    assert sum(counts.values()) == 12 and counts["test_novel"] == 2

    assert main(["train", "--config", cfg, "--data", data, "--out", str(run)]) == EXIT_OK
    ckpt = json.loads(capsys.readouterr().out)["checkpoint"]
    assert (run / "model.ckpt").exists() and (run / "train_log.jsonl").exists()

    for cond in ("both", "rgb_only", "depth_only"):
        assert main(["evaluate", "--checkpoint", ckpt, "--data", data, "--split", "train", "--condition", cond,
                     "--out", str(run / f"ap_{cond}.json"), "--detections", str(run / f"{cond}.json")]) == EXIT_OK
    ap = json.loads((run / "ap_both.json").read_text())
    assert 0.0 <= ap["box_map"] <= 1.0 and ap["condition"] == "both"
    dsets = json.loads((run / "both.json").read_text())
    assert len(dsets) == counts["train"]

    # an untrained-looking model may predict nothing; mc-score must still exit cleanly
    assert main(["mc-score", "--output", str(run / "both.json"), "--modality", f"rgb={run / 'rgb_only.json'}",
                 "--modality", f"depth={run / 'depth_only.json'}", "--out", str(run / "mc.json")]) == EXIT_OK
    assert "per_split" in json.loads((run / "mc.json").read_text())

    assert main(["ablate", "--checkpoint", ckpt, "--data", data, "--out", str(run / "ablation.json")]) == EXIT_OK
    abl = json.loads((run / "ablation.json").read_text())
    assert abl["model"] == "run" and set(abl["per_condition"]) == {"both", "rgb_only", "depth_only"}

    scene = json.loads((tmp_path / "data" / "manifest.json").read_text())["splits"]["test"][0]
    assert main(["gate-heatmap", "--checkpoint", ckpt, "--data", data, "--scene", scene,
                 "--out", str(run / "gates")]) == EXIT_OK
    assert len(list((run / "gates" / scene / "rgb_only").glob("*.png"))) == 6
    assert main(["gate-heatmap", "--checkpoint", ckpt, "--data", data, "--scene", "nope",
                 "--out", str(run / "g2")]) == EXIT_DATA

    art = tmp_path / "artifacts"
    assert main(["analyze", "--checkpoint", ckpt, "--baseline", ckpt, "--data", data, "--out", str(art)]) == EXIT_OK
    capsys.readouterr()
    assert main(["report", "--artifacts", str(art)]) == EXIT_OK
    md = (art / "report.md").read_text()
    assert "## Modality ablation" in md and "## Gate weights" in md and "## MC score against confidence" in md
    assert md.count("![](gates/") == 18
    assert (art / "mc_vs_confidence.json").exists() and (art / "mc_scatter.csv").exists()
