import json

import numpy as np
import pytest

from aftkit.checkpoint import load_checkpoint, save_checkpoint
from aftkit.cli import main


SPEC = {"num_concepts": 4, "pairs_per_concept": 20, "image_size": 4,
        "noise_sigma": 0.05, "seed": 3}
CONFIG = {
    "model": {"vision_hidden": [16], "text_hidden": [8], "embed_dim": 8},
    "batch_size": 16,
    "lr0": 1e-3,
    "total_epochs": 2,
    "seed": 0,
    "attack": {"epsilon": 4 / 255, "step_size": 2 / 255, "steps": 2,
               "objective": "contrastive"},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Shared data dir + pretrained checkpoint built through the CLI."""
    ws = tmp_path_factory.mktemp("cliws")
    (ws / "spec.json").write_text(json.dumps(SPEC))
    (ws / "cfg.json").write_text(json.dumps(CONFIG))
    assert main(["synth", "--spec", str(ws / "spec.json"),
                 "--out", str(ws / "data")]) == 0
    assert main(["pretrain", "--data", str(ws / "data"),
                 "--config", str(ws / "cfg.json"),
                 "--out", str(ws / "pre.ckpt")]) == 0
    return ws


class TestSynth:
    def test_outputs(self, workspace):
        data = workspace / "data"
        for name in ("train.shard", "train_labels.tsv", "classes.txt"):
            assert (data / name).exists()
        assert (data / "eval" / "eval.shard").exists()
        labels = [line.split("\t") for line in
                  (data / "train_labels.tsv").read_text().splitlines()]
        assert len(labels) == 4 * 16   # 80% train split of 4 x 20 pairs

    def test_missing_spec_is_data_error(self, tmp_path):
        assert main(["synth", "--spec", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path / "d")]) == 3


class TestTraining:
    def test_pretrain_artifacts(self, workspace):
        assert (workspace / "pre.ckpt").exists()
        assert (workspace / "pre.ckpt.vocab").exists()
        log = [json.loads(line) for line in
               (workspace / "pre.ckpt.log.jsonl").read_text().splitlines()]
        assert len(log) == CONFIG["total_epochs"]
        assert set(log[0]) == {"epoch", "mean_loss", "loss_clip", "loss_logit",
                               "loss_feat", "proxy_robust_acc", "lr"}

    @pytest.mark.parametrize("method,extra", [
        ("advflyp", []),
        ("advflyp-full", ["--reg-feat"]),
        ("tecoa", []),
        ("fare", []),
    ])
    def test_finetune_methods(self, workspace, tmp_path, method, extra):
        out = tmp_path / f"{method}.ckpt"
        rc = main(["finetune", "--method", method,
                   "--data", str(workspace / "data"),
                   "--init", str(workspace / "pre.ckpt"),
                   "--config", str(workspace / "cfg.json"),
                   "--out", str(out)] + extra)
        assert rc == 0
        assert out.exists() and (tmp_path / f"{method}.ckpt.vocab").exists()

    def test_finetune_missing_checkpoint(self, workspace, tmp_path):
        rc = main(["finetune", "--method", "advflyp",
                   "--data", str(workspace / "data"),
                   "--init", str(tmp_path / "missing.ckpt"),
                   "--out", str(tmp_path / "out.ckpt")])
        assert rc == 3


class TestEval:
    def test_report_and_csv(self, workspace, tmp_path):
        report_path = tmp_path / "report.json"
        csv_path = tmp_path / "report.csv"
        rc = main(["eval", "--ckpt", str(workspace / "pre.ckpt"),
                   "--data", str(workspace / "data"),
                   "--attacks", "pgd:eps=0.0157,steps=2;cw:eps=0.0157,steps=2",
                   "--report", str(report_path), "--csv", str(csv_path)])
        assert rc == 0
        report = json.loads(report_path.read_text())
        assert set(report) >= {"dataset", "n", "clean_acc", "attacks", "phi"}
        assert len(report["attacks"]) == 2
        for a in report["attacks"]:
            assert 0.0 <= a["robust_acc"] <= 1.0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "metric,value"
        assert len(lines) == 4   # header + clean + two attacks

    def test_unknown_attack_is_config_error(self, workspace, tmp_path):
        rc = main(["eval", "--ckpt", str(workspace / "pre.ckpt"),
                   "--data", str(workspace / "data"),
                   "--attacks", "autoattack:eps=0.01",
                   "--report", str(tmp_path / "r.json")])
        assert rc == 2

    def test_corrupt_checkpoint_is_format_error(self, workspace, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + bytes(16))
        (tmp_path / "bad.ckpt.vocab").write_text("a\nb\n")
        rc = main(["eval", "--ckpt", str(bad),
                   "--data", str(workspace / "data"),
                   "--attacks", "pgd:eps=0.01,steps=1",
                   "--report", str(tmp_path / "r.json")])
        assert rc == 3

    def test_nan_checkpoint_is_numeric_error(self, workspace, tmp_path):
        state = load_checkpoint(str(workspace / "pre.ckpt"))
        for t in state.theta.values():
            t.data[:] = np.nan
        nan_ckpt = tmp_path / "nan.ckpt"
        save_checkpoint(state, str(nan_ckpt))
        (tmp_path / "nan.ckpt.vocab").write_text(
            (workspace / "pre.ckpt.vocab").read_text())
        rc = main(["eval", "--ckpt", str(nan_ckpt),
                   "--data", str(workspace / "data"),
                   "--attacks", "pgd:eps=0.01,steps=2",
                   "--report", str(tmp_path / "r.json")])
        assert rc == 4


class TestExport:
    def test_embeddings_tsv(self, workspace, tmp_path):
        out = tmp_path / "emb.tsv"
        rc = main(["export-embeddings", "--ckpt", str(workspace / "pre.ckpt"),
                   "--data", str(workspace / "data"),
                   "--eps", "0.0157", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0].split("\t")[:3] == ["index", "label", "kind"]
        # one clean and one adversarial row per eval image
        assert len(lines) == 1 + 2 * (4 * 4)
        kinds = {line.split("\t")[2] for line in lines[1:]}
        assert kinds == {"clean", "adv"}
