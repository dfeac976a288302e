import json
import os
from pathlib import Path

import numpy as np
import pytest

from nre import checkpoint, cli
from nre.config import SCHEMA, load_config
from nre.errors import ConfigError

BLOBS_CFG = """
data = blobs
blob_classes = 3
blob_per_class = 200
blob_dim = 16
arch = 16,10,6
n_train = 400
n_test = 150
n_substitute = 50
pretrain_epochs = 4
epochs = 3
k = 3
lr = 0.005
classifier_epochs = 8
substitute_epochs = 10
probe_epochs = 60
anomaly_holdout = 2
"""


@pytest.fixture
def cfg_file(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = tmp_path / "run.cfg"
    path.write_text(BLOBS_CFG)
    return path


def _run(args):
    return cli.main([str(a) for a in args])


class TestConfig:
    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("no_such_knob = 3\n")
        with pytest.raises(ConfigError, match="no_such_knob"):
            load_config(path)

    def test_precedence_cli_over_file_over_default(self, cfg_file):
        cfg = load_config(cfg_file, overrides=["epochs=9"])
        assert cfg.epochs == 9          # CLI wins
        assert cfg.pretrain_epochs == 4  # file wins
        assert cfg.batch_size == SCHEMA["batch_size"][1]  # default

    def test_env_seed_fallback(self, cfg_file):
        cfg = load_config(cfg_file, env={"NRE_SEED": "77"})
        assert cfg.seed == 77
        cfg = load_config(cfg_file, overrides=["seed=5"], env={"NRE_SEED": "77"})
        assert cfg.seed == 5

    def test_simplex_validated_at_parse(self, cfg_file):
        with pytest.raises(ConfigError, match="lambda"):
            load_config(cfg_file, overrides=["lambda1=0.9", "lambda2=0.9", "lambda3=0.9"])

    def test_bad_value_names_key(self, cfg_file):
        with pytest.raises(ConfigError, match="epochs"):
            load_config(cfg_file, overrides=["epochs=soon"])

    def test_hash_changes_with_config(self, cfg_file):
        a = load_config(cfg_file)
        b = load_config(cfg_file, overrides=["epochs=9"])
        assert a.config_hash() != b.config_hash()


class TestExitCodes:
    def test_missing_dataset_path_exit_2_names_key(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code = _run(["pretrain", "--set", "data=mnist"])
        assert code == 2
        assert "mnist_dir" in capsys.readouterr().err

    def test_unknown_key_exit_2(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        code = _run(["pretrain", "--set", "wat=1"])
        assert code == 2
        assert "wat" in capsys.readouterr().err

    def test_missing_checkpoint_exit_2(self, cfg_file, capsys):
        code = _run(["train", "--config", cfg_file])
        assert code == 2
        assert "pretrain_ckpt" in capsys.readouterr().err

    def test_divergent_training_exit_4(self, cfg_file, capsys):
        code = _run(["pretrain", "--config", cfg_file, "--set", "lr=1e12",
                     "--set", "pretrain_epochs=20"])
        assert code == 4


class TestPipeline:
    def test_full_pipeline_and_artifacts(self, cfg_file):
        assert _run(["pretrain", "--config", cfg_file]) == 0
        run_dirs = list(Path("runs").iterdir())
        assert len(run_dirs) == 1
        run_dir = run_dirs[0]
        ckpt = run_dir / "pretrain.ckpt"
        assert ckpt.exists()
        enc, dec, meta = checkpoint.load_ae(ckpt)
        assert meta["config"]["arch"] == [16, 10, 6]

        assert _run(["train", "--config", cfg_file]) == 0
        model = checkpoint.load_nre(run_dir / "nre.ckpt")
        assert model.config.epochs == 3

        metrics = [json.loads(line) for line in
                   (run_dir / "train_metrics.jsonl").read_text().splitlines()]
        assert [m["epoch"] for m in metrics] == [0, 1, 2]
        assert all(set(m) == {"epoch", "loss", "term1", "term2", "term3", "wall_ms"}
                   for m in metrics)

        assert _run(["eval", "probe", "--config", cfg_file]) == 0
        report = json.loads((run_dir / "probe_report.json").read_text())
        assert 0.0 <= report["metrics"]["nre_accuracy"] <= 1.0
        assert 0.0 <= report["metrics"]["ae_accuracy"] <= 1.0

        assert _run(["eval", "defense", "--config", cfg_file]) == 0
        csv_lines = (run_dir / "defense.csv").read_text().splitlines()
        assert csv_lines[0] == "epsilon,no_defense,plain_ae_refine,nre_refine"
        assert [float(l.split(",")[0]) for l in csv_lines[1:]] == [0.01, 0.1, 0.2, 0.3]

        assert _run(["eval", "anomaly", "--config", cfg_file]) == 0
        anomaly = json.loads((run_dir / "anomaly_report.json").read_text())
        assert {"nre_auc", "nre_eer", "ae_auc", "ae_eer"} <= set(anomaly["metrics"])

        assert _run(["export-latents", "--config", cfg_file]) == 0
        lines = (run_dir / "latents.csv").read_text().splitlines()
        assert len(lines) == 400 + 1

    def test_pretrain_rerun_byte_identical(self, cfg_file):
        assert _run(["pretrain", "--config", cfg_file]) == 0
        run_dir = next(Path("runs").iterdir())
        first = (run_dir / "pretrain.ckpt").read_bytes()
        assert _run(["pretrain", "--config", cfg_file]) == 0
        assert (run_dir / "pretrain.ckpt").read_bytes() == first

    def test_pure_reconstruction_logs_zero_neighbor_terms(self, cfg_file):
        overrides = ["--set", "lambda1=1", "--set", "lambda2=0", "--set", "lambda3=0"]
        assert _run(["pretrain", "--config", cfg_file, *overrides]) == 0
        assert _run(["train", "--config", cfg_file, *overrides]) == 0
        run_dir = next(Path("runs").iterdir())
        metrics = [json.loads(line) for line in
                   (run_dir / "train_metrics.jsonl").read_text().splitlines()]
        assert all(m["term2"] == 0.0 and m["term3"] == 0.0 for m in metrics)

    def test_interrupted_training_leaves_loadable_checkpoint(self, cfg_file, monkeypatch):
        assert _run(["pretrain", "--config", cfg_file]) == 0
        run_dir = next(Path("runs").iterdir())

        from nre import training

        real = checkpoint.save_nre
        calls = {"n": 0}

        def save_then_die(path, model):
            real(path, model)
            calls["n"] += 1
            if calls["n"] == 2:
                raise KeyboardInterrupt

        monkeypatch.setattr(checkpoint, "save_nre", save_then_die)
        with pytest.raises(KeyboardInterrupt):
            _run(["train", "--config", cfg_file])
        monkeypatch.setattr(checkpoint, "save_nre", real)
        model = checkpoint.load_nre(run_dir / "nre.ckpt")
        x = np.zeros((1, 16), dtype=np.float32)
        assert model.reconstruct(x).shape == (1, 16)

    def test_mine_check_passes(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert _run(["mine-check"]) == 0
