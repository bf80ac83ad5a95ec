import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

REPO = Path(__file__).resolve().parents[1]


def run_cli(*args, cwd):
    env = dict(os.environ, PYTHONPATH=str(REPO / "src"))
    return subprocess.run(
        [sys.executable, "-m", "zinbvae.cli", *args],
        cwd=cwd,
        env=env,
        capture_output=True,
        text=True,
    )


def write_config(path, body):
    path.write_text(body)
    return str(path)


TOY = """
[run]
seed = 7

[simulate]
n_cells = 120
n_genes = 12
latent_dim = 2
n_groups = 2
group_separation = 3.0

[data]
heldout_fraction = 0.2

[model]
latent_dim = 2
hidden_width = 12
hidden_depth = 1
dropout_rate = 0.1

[training]
learning_rate = 0.003
batch_size = 32
epochs = 4

[eval]
metrics = ["heldout_ll", "imputation", "silhouette", "qc_correlation"]
n_importance_samples = 50

[de]
group_a = "group0"
group_b = "group1"
n_pairs = 500
"""


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """One simulate -> train pipeline shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "toy.toml", TOY)
    sim = run_cli("simulate", "--config", cfg, "--out", str(root / "sim"), cwd=root)
    assert sim.returncode == 0, sim.stderr
    tr = run_cli(
        "train",
        "--config",
        cfg,
        "--out",
        str(root / "train"),
        "--data.counts",
        str(root / "sim" / "counts.csv"),
        "--data.covariates",
        str(root / "sim" / "covariates.csv"),
        cwd=root,
    )
    assert tr.returncode == 0, tr.stderr
    return root, cfg


class TestPipeline:
    def test_simulate_outputs(self, toy_run):
        root, _ = toy_run
        assert (root / "sim" / "counts.csv").exists()
        assert (root / "sim" / "covariates.csv").exists()
        assert (root / "sim" / "truth.bin").exists()
        resolved = json.loads((root / "sim" / "resolved_config.json").read_text())
        assert resolved["seed"] == 7
        assert len(resolved["config_hash"]) == 12

    def test_train_outputs(self, toy_run):
        root, _ = toy_run
        assert (root / "train" / "checkpoint.bin").exists()
        trace = (root / "train" / "loss_trace.csv").read_text().splitlines()
        assert trace[0].startswith("# config_hash=")
        assert trace[1] == "epoch,mean_neg_elbo"
        assert len(trace) == 2 + 4
        assert (root / "train" / "heldout.csv").exists()
        assert (root / "train" / "heldout_covariates.csv").exists()

    def test_eval_end_to_end(self, toy_run):
        root, cfg = toy_run
        ev = run_cli(
            "eval",
            "--config",
            cfg,
            "--out",
            str(root / "eval"),
            "--data.counts",
            str(root / "train" / "heldout.csv"),
            "--data.covariates",
            str(root / "train" / "heldout_covariates.csv"),
            "--checkpoint.path",
            str(root / "train" / "checkpoint.bin"),
            cwd=root,
        )
        assert ev.returncode == 0, ev.stderr
        report = json.loads((root / "eval" / "report.json").read_text())
        metrics = {r["metric"] for r in report["reports"]}
        assert {"heldout_ll", "silhouette", "qc_correlation", "dropout_identification_bce"} <= metrics

    def test_impute_and_de(self, toy_run):
        root, cfg = toy_run
        im = run_cli(
            "impute",
            "--config",
            cfg,
            "--out",
            str(root / "impute"),
            "--data.counts",
            str(root / "sim" / "counts.csv"),
            "--data.covariates",
            str(root / "sim" / "covariates.csv"),
            "--checkpoint.path",
            str(root / "train" / "checkpoint.bin"),
            cwd=root,
        )
        assert im.returncode == 0, im.stderr
        assert (root / "impute" / "imputed_entries.csv").exists()
        de = run_cli(
            "de",
            "--config",
            cfg,
            "--out",
            str(root / "de"),
            "--data.counts",
            str(root / "sim" / "counts.csv"),
            "--data.covariates",
            str(root / "sim" / "covariates.csv"),
            "--checkpoint.path",
            str(root / "train" / "checkpoint.bin"),
            cwd=root,
        )
        assert de.returncode == 0, de.stderr
        lines = (root / "de" / "de_results.csv").read_text().splitlines()
        assert len(lines) == 2 + 12  # comment + header + one row per gene


class TestDeterminism:
    def test_rerun_is_byte_identical(self, tmp_path):
        # identical config + seed, run twice into the same paths
        cfg = write_config(tmp_path / "toy.toml", TOY)
        tracked = (
            "sim/counts.csv",
            "sim/covariates.csv",
            "sim/truth.bin",
            "train/checkpoint.bin",
            "train/loss_trace.csv",
            "train/heldout.csv",
        )
        snapshots = []
        for _ in range(2):
            sim = run_cli("simulate", "--config", cfg, "--out", str(tmp_path / "sim"), cwd=tmp_path)
            assert sim.returncode == 0, sim.stderr
            tr = run_cli(
                "train",
                "--config",
                cfg,
                "--out",
                str(tmp_path / "train"),
                "--data.counts",
                str(tmp_path / "sim" / "counts.csv"),
                "--data.covariates",
                str(tmp_path / "sim" / "covariates.csv"),
                cwd=tmp_path,
            )
            assert tr.returncode == 0, tr.stderr
            snapshots.append({rel: (tmp_path / rel).read_bytes() for rel in tracked})
        for rel in tracked:
            assert snapshots[0][rel] == snapshots[1][rel], f"{rel} differs between identical runs"

    def test_zero_epoch_train_emits_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path / "toy.toml", TOY)
        sim = run_cli("simulate", "--config", cfg, "--out", str(tmp_path / "sim"), cwd=tmp_path)
        assert sim.returncode == 0, sim.stderr
        tr = run_cli(
            "train",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "train0"),
            "--data.counts",
            str(tmp_path / "sim" / "counts.csv"),
            "--training.epochs",
            "0",
            "--data.heldout_fraction",
            "0",
            cwd=tmp_path,
        )
        assert tr.returncode == 0, tr.stderr
        assert (tmp_path / "train0" / "checkpoint.bin").exists()
        trace = (tmp_path / "train0" / "loss_trace.csv").read_text().splitlines()
        assert len(trace) == 2  # comment + header, no epochs


class TestErrorCodes:
    def test_malformed_config_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "bad.toml", "[run\nseed=")
        out = run_cli("simulate", "--config", cfg, cwd=tmp_path)
        assert out.returncode == 2
        assert "kind=config" in out.stderr

    def test_unknown_key_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "bad.toml", "[run]\nbogus = 1\n")
        out = run_cli("simulate", "--config", cfg, cwd=tmp_path)
        assert out.returncode == 2

    def test_missing_checkpoint_exits_2(self, tmp_path):
        cfg = write_config(tmp_path / "toy.toml", TOY)
        sim = run_cli("simulate", "--config", cfg, "--out", str(tmp_path / "sim"), cwd=tmp_path)
        assert sim.returncode == 0
        out = run_cli(
            "eval",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "eval"),
            "--data.counts",
            str(tmp_path / "sim" / "counts.csv"),
            "--data.covariates",
            str(tmp_path / "sim" / "covariates.csv"),
            "--checkpoint.path",
            str(tmp_path / "nope.bin"),
            cwd=tmp_path,
        )
        assert out.returncode == 2
        assert "kind=config" in out.stderr

    def test_bad_data_exits_3(self, tmp_path):
        cfg = write_config(tmp_path / "toy.toml", TOY)
        bad = tmp_path / "bad.csv"
        bad.write_text("cell_id,g1\nc0,-4\n")
        out = run_cli(
            "train",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "t"),
            "--data.counts",
            str(bad),
            "--data.heldout_fraction",
            "0",
            cwd=tmp_path,
        )
        assert out.returncode == 3
        assert "kind=data" in out.stderr

    def test_dimension_mismatch_exits_3(self, tmp_path):
        cfg = write_config(tmp_path / "toy.toml", TOY)
        sim = run_cli("simulate", "--config", cfg, "--out", str(tmp_path / "sim"), cwd=tmp_path)
        assert sim.returncode == 0
        tr = run_cli(
            "train",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "train"),
            "--data.counts",
            str(tmp_path / "sim" / "counts.csv"),
            "--data.heldout_fraction",
            "0",
            cwd=tmp_path,
        )
        assert tr.returncode == 0, tr.stderr
        sim2 = run_cli(
            "simulate",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "sim2"),
            "--simulate.n_genes",
            "9",
            cwd=tmp_path,
        )
        assert sim2.returncode == 0
        out = run_cli(
            "eval",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "eval"),
            "--data.counts",
            str(tmp_path / "sim2" / "counts.csv"),
            "--data.covariates",
            str(tmp_path / "sim2" / "covariates.csv"),
            "--checkpoint.path",
            str(tmp_path / "train" / "checkpoint.bin"),
            cwd=tmp_path,
        )
        assert out.returncode == 3
        assert "kind=data" in out.stderr

    def test_divergence_exits_4(self, tmp_path):
        cfg = write_config(tmp_path / "toy.toml", TOY)
        sim = run_cli("simulate", "--config", cfg, "--out", str(tmp_path / "sim"), cwd=tmp_path)
        assert sim.returncode == 0
        out = run_cli(
            "train",
            "--config",
            cfg,
            "--out",
            str(tmp_path / "t"),
            "--data.counts",
            str(tmp_path / "sim" / "counts.csv"),
            "--data.heldout_fraction",
            "0",
            "--training.learning_rate",
            "1e200",
            cwd=tmp_path,
        )
        assert out.returncode == 4
        assert "kind=numerical" in out.stderr


def test_bundled_toy_config_parses(tmp_path):
    out = run_cli(
        "simulate",
        "--config",
        str(REPO / "configs" / "toy.toml"),
        "--out",
        str(tmp_path / "toy"),
        cwd=tmp_path,
    )
    assert out.returncode == 0, out.stderr
    assert (tmp_path / "toy" / "counts.csv").exists()
