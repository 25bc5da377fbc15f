import json
from pathlib import Path

import numpy as np
import pytest

from letetcnn.cli import main

from conftest import parse_vtk_unstructured


TINY = [
    "--per-class", "3",
    "--resolution", "5",
    "--seed", "7",
]
FAST_TRAIN = [
    "--landmarks", "8",
    "--hidden-dim", "4",
    "--tetcnn-layers", "1",
    "--transformer-layers", "1",
    "--cheb-order", "2",
    "--eigenpairs", "8",
    "--epochs", "2",
    "--lr", "0.01",
    "--seed", "3",
]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", "--out", str(d)] + TINY) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = main(
        ["train", "--data", str(dataset_dir), "--out", str(out)] + FAST_TRAIN
    )
    assert code == 0
    return out


class TestSynth:
    def test_writes_dataset_and_manifest(self, dataset_dir):
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        assert len(manifest["samples"]) == 6
        assert (dataset_dir / "sample_000.node").is_file()
        assert (dataset_dir / "sample_000.ele").is_file()
        assert (dataset_dir / "synth_manifest.json").is_file()

    def test_rerun_identical_manifest(self, dataset_dir, tmp_path):
        other = tmp_path / "again"
        assert main(["synth", "--out", str(other)] + TINY) == 0
        assert (other / "manifest.json").read_text() == (
            dataset_dir / "manifest.json"
        ).read_text()

    def test_bad_amplitude_is_usage_style_error(self, tmp_path, capsys):
        code = main(
            ["synth", "--out", str(tmp_path / "x"), "--amplitude", "0.9"] + TINY
        )
        assert code == 2
        assert "amplitude" in capsys.readouterr().err

    def test_non_binary_rejected(self, tmp_path):
        code = main(
            ["synth", "--out", str(tmp_path / "x"), "--classes", "3"] + TINY
        )
        assert code == 1


class TestPrep:
    def test_prep_populates_cache_and_hits(self, dataset_dir, capsys):
        assert main(["prep", "--data", str(dataset_dir), "--landmarks", "8",
                     "--eigenpairs", "8"]) == 0
        cache = dataset_dir / "cache"
        assert len(list(cache.glob("*.lbo.npz"))) == 6
        assert len(list(cache.glob("*.landmarks-*.txt"))) == 6
        capsys.readouterr()
        assert main(["prep", "--data", str(dataset_dir), "--landmarks", "8",
                     "--eigenpairs", "8"]) == 0
        assert "cache hit" in capsys.readouterr().out

    def test_corrupted_cache_recomputed_with_warning(self, dataset_dir):
        cache = dataset_dir / "cache"
        victim = next(iter(cache.glob("*.lbo.npz")))
        victim.write_bytes(b"garbage")
        with pytest.warns(RuntimeWarning, match="unusable"):
            assert main(["prep", "--data", str(dataset_dir), "--landmarks", "8",
                         "--eigenpairs", "8"]) == 0
        # healthy again afterwards
        import numpy as np

        with np.load(victim) as z:
            assert "lumped_mass" in z

    def test_missing_data_dir(self, tmp_path):
        assert main(["prep", "--data", str(tmp_path / "nope")]) == 2


class TestTrain:
    def test_outputs_exist(self, run_dir):
        assert (run_dir / "checkpoint.npz").is_file()
        assert (run_dir / "history.csv").is_file()
        assert (run_dir / "history.png").is_file()
        assert (run_dir / "split.json").is_file()
        manifest = json.loads((run_dir / "train_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["config"]["epochs"] == 2

    def test_history_csv_shape(self, run_dir):
        lines = (run_dir / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,train_acc,val_acc"
        assert len(lines) == 3  # header + 2 epochs

    def test_variant_le_trains(self, dataset_dir, tmp_path):
        out = tmp_path / "le"
        code = main(
            ["train", "--data", str(dataset_dir), "--out", str(out),
             "--variant", "le"] + FAST_TRAIN
        )
        assert code == 0

    def test_fuse_biomarker_flag(self, dataset_dir, tmp_path):
        out = tmp_path / "fused"
        code = main(
            ["train", "--data", str(dataset_dir), "--out", str(out),
             "--fuse-biomarker"] + FAST_TRAIN
        )
        assert code == 0

    def test_config_file_with_flag_override(self, dataset_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"epochs": 1, "hidden_dim": 4, "landmarks": 8,
                                   "eigenpairs": 8, "tetcnn_layers": 1,
                                   "transformer_layers": 1, "cheb_order": 2}))
        out = tmp_path / "cfgrun"
        code = main(
            ["train", "--data", str(dataset_dir), "--out", str(out),
             "--config", str(cfg), "--epochs", "2", "--seed", "3"]
        )
        assert code == 0
        manifest = json.loads((out / "train_manifest.json").read_text())
        assert manifest["config"]["epochs"] == 2  # flag wins
        assert manifest["config"]["hidden_dim"] == 4  # config wins over default

    def test_unknown_config_key_rejected(self, dataset_dir, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"not_a_key": 1}))
        code = main(
            ["train", "--data", str(dataset_dir), "--out", str(tmp_path / "o"),
             "--config", str(cfg)]
        )
        assert code == 1


class TestEval:
    def test_metrics_csv_columns(self, dataset_dir, run_dir, tmp_path):
        out = tmp_path / "eval"
        code = main(
            ["eval", "--data", str(dataset_dir),
             "--checkpoint", str(run_dir / "checkpoint.npz"),
             "--out", str(out), "--subset", "all",
             "--landmarks", "8", "--eigenpairs", "8", "--seed", "3"]
        )
        assert code == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("ACC,SEN,SPE")
        assert (out / "metrics.png").is_file()

    def test_stratum_filter(self, dataset_dir, run_dir, tmp_path):
        out = tmp_path / "eval_med"
        code = main(
            ["eval", "--data", str(dataset_dir),
             "--checkpoint", str(run_dir / "checkpoint.npz"),
             "--out", str(out), "--subset", "all", "--stratum", "medium",
             "--landmarks", "8", "--eigenpairs", "8", "--seed", "3"]
        )
        manifest = json.loads((dataset_dir / "manifest.json").read_text())
        n_medium = sum(1 for r in manifest["samples"] if r["stratum"] == "medium")
        if n_medium:
            assert code == 0
            n = int((out / "metrics.csv").read_text().splitlines()[1].split(",")[-1])
            assert n == n_medium
        else:
            assert code == 2

    def test_missing_checkpoint(self, dataset_dir, tmp_path):
        code = main(
            ["eval", "--data", str(dataset_dir),
             "--checkpoint", str(tmp_path / "none.npz"),
             "--out", str(tmp_path / "e")]
        )
        assert code == 2


class TestGradcam:
    def test_emits_parseable_vtk_per_sample(self, dataset_dir, run_dir, tmp_path):
        out = tmp_path / "cam"
        code = main(
            ["gradcam", "--data", str(dataset_dir),
             "--checkpoint", str(run_dir / "checkpoint.npz"),
             "--out", str(out), "--subset", "all", "--limit", "2",
             "--landmarks", "8", "--eigenpairs", "8", "--seed", "3"]
        )
        assert code == 0
        files = sorted(out.glob("*_gradcam.vtk"))
        assert len(files) == 2
        points, cells, cell_types, scalars = parse_vtk_unstructured(
            files[0].read_text()
        )
        assert np.all(cell_types == 10)
        assert "gradcam" in scalars
        vals = scalars["gradcam"]
        assert vals.min() >= 0.0 and vals.max() <= 1.0

    def test_le_variant_documented_error(self, dataset_dir, tmp_path, capsys):
        out = tmp_path / "le"
        assert main(
            ["train", "--data", str(dataset_dir), "--out", str(out),
             "--variant", "le"] + FAST_TRAIN
        ) == 0
        code = main(
            ["gradcam", "--data", str(dataset_dir),
             "--checkpoint", str(out / "checkpoint.npz"),
             "--out", str(tmp_path / "cam"), "--subset", "all",
             "--landmarks", "8", "--eigenpairs", "8", "--seed", "3"]
        )
        assert code == 2
        assert "no convolutional feature map" in capsys.readouterr().err


class TestUsage:
    def test_no_command_is_usage_error(self):
        assert main([]) == 1

    def test_unknown_flag(self):
        assert main(["synth", "--nonsense", "1"]) == 1

    def test_missing_required_out(self):
        assert main(["synth"]) == 1
