import json
import subprocess
import sys

import pytest

from timeline_bench.cli import main
from timeline_bench.train import Checkpoint

GT_DOC = {"example": [[f"v{i}" for i in range(5)], [f"v{i}" for i in range(5, 9)], ["v9"]]}
PRED_DOC = {"example": [1, 1, 1, 1, 3, 4, 2, 2, 4, 3]}
GEN_DOC = {
    "num_timelines": 12,
    "node_count_range": [2, 3],
    "videos_per_node_range": [1, 3],
    "embedding_dim": 4,
}
TRAIN_DOC = {"epochs": 2, "batch_size": 4, "model": {"d_model": 8, "num_heads": 2, "num_layers": 1, "feedforward_dim": 8}}


@pytest.fixture
def files(tmp_path):
    paths = {}
    for name, doc in (("gt", GT_DOC), ("pred", PRED_DOC), ("gen", GEN_DOC), ("train", TRAIN_DOC)):
        paths[name] = tmp_path / f"{name}.json"
        paths[name].write_text(json.dumps(doc))
    return paths


def test_score_worked_example_json(files, capsys):
    assert main(["score", "--gt", str(files["gt"]), "--pred", str(files["pred"]), "--sigma", "0.5", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    micro = doc["micro"]
    assert micro["precision"] == 0.75 and micro["recall"] == 1.0
    assert micro["hamming"] == pytest.approx(0.3) and micro["euclidean"] == pytest.approx(0.6)
    assert micro["agreement"] == pytest.approx(32 / 45)


def test_score_table_matches_json(files, capsys):
    args = ["score", "--gt", str(files["gt"]), "--pred", str(files["pred"])]
    assert main(args) == 0
    table = capsys.readouterr().out
    assert main(args + ["--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    for block in ("macro", "micro"):
        for value in doc[block].values():
            assert f"{value:.6g}" in table


def test_gen_is_deterministic(files, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for out in (a, b):
        assert main(["gen", "--config", str(files["gen"]), "--seed", "7", "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.json"
    assert main(["gen", "--config", str(files["gen"]), "--seed", "8", "--out", str(c)]) == 0
    assert c.read_bytes() != a.read_bytes()


def test_stats(files, capsys):
    assert main(["stats", "--data", str(files["gt"]), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert (doc["num_timelines"], doc["num_nodes"], doc["num_videos"]) == (1, 3, 10)


def test_train_eval_predict_ablation(files, tmp_path, capsys):
    data = tmp_path / "data.json"
    ckpt = tmp_path / "m.ckpt"
    preds = tmp_path / "p.json"
    assert main(["gen", "--config", str(files["gen"]), "--seed", "1", "--out", str(data)]) == 0
    argv = ["train", "--data", str(data), "--val", str(data), "--model", "tri", "--config", str(files["train"])]
    argv += ["--no-video-pe", "--no-encoders-23", "--out-ckpt", str(ckpt)]
    assert main(argv) == 0
    capsys.readouterr()
    model = Checkpoint.load(ckpt).model
    assert (model.use_video_pe, model.use_encoders_2_3) == (False, False)
    assert not any(k.startswith("enc2") for k in Checkpoint.load(ckpt).params)

    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--format", "json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert len(report["per_sample"]) == 12
    assert main(["predict", "--data", str(data), "--ckpt", str(ckpt), "--out", str(preds)]) == 0
    assert main(["score", "--gt", str(data), "--pred", str(preds), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["micro"] == report["micro"]


def test_grid(files, tmp_path, capsys):
    data = tmp_path / "data.json"
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"lr_grid": [0.01, 0.001], "dropout_grid": [0.0]}))
    assert main(["gen", "--config", str(files["gen"]), "--out", str(data)]) == 0
    argv = ["grid", "--data", str(data), "--val", str(data), "--model", "v", "--config", str(files["train"])]
    assert main(argv + ["--grid-config", str(grid)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert len(doc["cells"]) == 2
    assert doc["best"]["learning_rate"] in (0.01, 0.001)


def test_invalid_input_writes_nothing(files, tmp_path):
    bad_pred = tmp_path / "bad.json"
    bad_pred.write_text(json.dumps({"example": [1, 2]}))
    out = tmp_path / "report.json"
    assert main(["score", "--gt", str(files["gt"]), "--pred", str(bad_pred), "--out", str(out)]) == 1
    assert not out.exists()


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"node_count_range": [5, 2]}))
    out = tmp_path / "data.json"
    assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 1
    assert not out.exists()
    cfg.write_text("{not json")
    assert main(["gen", "--config", str(cfg), "--out", str(out)]) == 1


def test_missing_file_exit_code(tmp_path):
    assert main(["stats", "--data", str(tmp_path / "nope.json")]) == 2


def test_unknown_flag_rejected(files):
    assert main(["stats", "--data", str(files["gt"]), "--colour"]) == 1


def test_sigma_out_of_range(files):
    assert main(["score", "--gt", str(files["gt"]), "--pred", str(files["pred"]), "--sigma", "0"]) == 1


def test_threads_env(files, monkeypatch, capsys):
    monkeypatch.setenv("TLB_THREADS", "3")
    assert main(["score", "--gt", str(files["gt"]), "--pred", str(files["pred"])]) == 0
    monkeypatch.setenv("TLB_THREADS", "many")
    assert main(["score", "--gt", str(files["gt"]), "--pred", str(files["pred"])]) == 1


@pytest.mark.parametrize("command", ["gen", "stats", "score", "train", "predict", "eval", "grid"])
def test_every_subcommand_has_help(command):
    proc = subprocess.run([sys.executable, "-m", "timeline_bench", command, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "usage:" in proc.stdout
