"""Tests for the icc-sensing command line."""

import json

import pandas as pd
import pytest

from icc_sensing.cli import EXIT_OK, EXIT_USAGE, main

SMALL = ["--set", "K=3", "--set", "M=8", "--set", "N=20", "--set", "snr_sense_db=-5"]


@pytest.mark.unit
class TestTheory:
    """Test cases for the closed-form subcommands."""

    def test_hdf_bound(self, capsys):
        """Test the majority-rule ceiling at -3 dB."""
        assert main(["theory", "hdf-bound", "--snr-report-db", "-3", "--k", "6"]) == EXIT_OK
        assert float(capsys.readouterr().out) == pytest.approx(0.9454, abs=1e-4)

    def test_hdf_bound_dead_link(self, capsys):
        """Test the coin-flip limit of a useless reporting link."""
        assert main(["theory", "hdf-bound", "--snr-report-db=-inf", "--k", "6"]) == EXIT_OK
        assert float(capsys.readouterr().out) == pytest.approx(0.34375, abs=1e-4)

    def test_ber(self, capsys):
        """Test the BPSK error rate at 3 dB."""
        assert main(["theory", "ber", "--snr-report-db", "3"]) == EXIT_OK
        assert float(capsys.readouterr().out) == pytest.approx(0.0229, abs=1e-4)

    def test_pd_table(self, capsys):
        """Test one row per reporting SNR after the header."""
        assert main(["theory", "pd-table", "--snr-report-db=-9,-3,3", "--k", "6"]) == EXIT_OK
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "snr_report_db,pd"
        assert len(lines) == 4
        assert float(lines[2].split(",")[1]) == pytest.approx(0.9454, abs=1e-4)


@pytest.mark.unit
class TestUsageErrors:
    """Test cases for exit code 2."""

    def test_unknown_command(self, capsys):
        """Test that argparse failures return the usage code."""
        assert main(["bogus"]) == EXIT_USAGE
        assert main(["eval", "roc"]) == EXIT_USAGE

    def test_missing_config(self, tmp_path, capsys):
        """Test that an unreadable config names its path."""
        missing = tmp_path / "missing.json"
        code = main(["eval", "roc", "--method", "ed-sdf", "--config", str(missing), "--out", str(tmp_path)])
        assert code == EXIT_USAGE
        assert "missing.json" in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        """Test that every validation error is listed."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"K": 0, "rho": 2.0}))
        code = main(["eval", "roc", "--method", "ed-sdf", "--config", str(path), "--out", str(tmp_path)])
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        assert "K" in err and "rho" in err

    def test_unknown_method(self, tmp_path, capsys):
        """Test that an unknown method is a usage error."""
        code = main(["eval", "roc", "--method", "xyz-sdf", *SMALL, "--out", str(tmp_path)])
        assert code == EXIT_USAGE

    def test_icc_without_checkpoint(self, tmp_path, capsys):
        """Test that ICC-CSS needs --checkpoint."""
        code = main(["eval", "roc", "--method", "icc", *SMALL, "--out", str(tmp_path)])
        assert code == EXIT_USAGE
        assert "checkpoint" in capsys.readouterr().err


@pytest.mark.unit
class TestTrain:
    """Test cases for the train subcommand."""

    def test_zero_epochs(self, tmp_path, capsys):
        """Test that an untrained run still writes every artifact."""
        out = tmp_path / "run"
        code = main(["train", *SMALL, "--architecture", "miniature", "--epochs", "0", "--out", str(out)])
        assert code == EXIT_OK
        assert "parameters 1165" in capsys.readouterr().out
        assert (out / "checkpoint.iccs").exists()
        assert (out / "loss.csv").read_text().splitlines() == ["epoch,mean_loss"]
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["train_config"]["epochs"] == 0
        assert manifest["scenario"]["K"] == 3

    def test_threads_flag_not_used_for_training(self, tmp_path, capsys):
        """Test that --threads only sizes the evaluation worker pool."""
        out = tmp_path / "run"
        args = ["train", *SMALL, "--architecture", "miniature", "--epochs", "0", "--threads", "4"]
        assert main([*args, "--out", str(out)]) == EXIT_OK
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["train_config"]["threads"] == 1

    @pytest.mark.slow
    def test_deterministic_loss(self, tmp_path, capsys):
        """Test that two runs with the same seed write the same loss curve."""
        train_config = tmp_path / "train.json"
        train_config.write_text(json.dumps({"epochs": 2, "batch_size": 8, "dataset_size": 24}))
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            args = ["train", *SMALL, "--architecture", "miniature", "--train-config", str(train_config)]
            assert main([*args, "--seed", "7", "--out", str(out)]) == EXIT_OK
            outputs.append((out / "loss.csv").read_text())
        assert outputs[0] == outputs[1]
        assert len(outputs[0].splitlines()) == 3


@pytest.mark.unit
class TestEval:
    """Test cases for the eval subcommands."""

    def test_roc(self, tmp_path, capsys):
        """Test ROC tables, sidecars and manifest."""
        code = main([
            "eval", "roc", "--method", "ed-sdf,simplified", *SMALL,
            "--trials", "100", "--pfa-grid", "0.1,1", "--out", str(tmp_path),
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / "roc_ed-sdf.csv")
        assert list(frame.columns) == [
            "target_pfa", "threshold", "empirical_pfa", "empirical_pd", "trials_h0", "trials_h1",
        ]
        assert len(frame) == 2
        assert (tmp_path / "roc_simplified.meta.json").exists()
        assert (tmp_path / "manifest.json").exists()
        assert capsys.readouterr().out.count("target_pfa=") == 4

    def test_roc_with_checkpoint(self, tmp_path, miniature_checkpoint, capsys):
        """Test the ICC-CSS curve from a saved checkpoint."""
        code = main([
            "eval", "roc", "--method", "icc", *SMALL, "--checkpoint", str(miniature_checkpoint),
            "--trials", "50", "--pfa-grid", "0.1", "--out", str(tmp_path),
        ])
        assert code == EXIT_OK
        metadata = json.loads((tmp_path / "roc_icc.meta.json").read_text())
        assert metadata["extra"]["subchannels"] == 2

    def test_sweep(self, tmp_path, capsys):
        """Test one row per sweep value."""
        code = main([
            "eval", "sweep", "--method", "ed-sdf", "--axis", "snr_sense_db", "--values=-10,0",
            *SMALL, "--trials", "50", "--out", str(tmp_path),
        ])
        assert code == EXIT_OK
        frame = pd.read_csv(tmp_path / "sweep_snr_sense_db.csv")
        assert frame["snr_sense_db"].tolist() == [-10.0, 0.0]

    def test_ablation(self, tmp_path, miniature_checkpoint, capsys):
        """Test the orthogonal-reporting ablation."""
        code = main([
            "eval", "ablation", *SMALL, "--checkpoint", str(miniature_checkpoint),
            "--trials", "50", "--pfa-grid", "0.1", "--out", str(tmp_path),
        ])
        assert code == EXIT_OK
        assert "subchannels 6" in capsys.readouterr().out
        assert (tmp_path / "roc_icc-no-aircomp.csv").exists()

    def test_constellation(self, tmp_path, miniature_checkpoint, capsys):
        """Test the constellation export row count."""
        code = main([
            "eval", "constellation", *SMALL, "--checkpoint", str(miniature_checkpoint),
            "--slots", "20", "--out", str(tmp_path),
        ])
        assert code == EXIT_OK
        assert len(pd.read_csv(tmp_path / "constellation.csv")) == 20 * 3 * 2

    def test_verify_prop3(self, tmp_path, capsys):
        """Test the equivalence report."""
        code = main(["eval", "verify-prop3", *SMALL, "--trials", "200", "--out", str(tmp_path)])
        assert code == EXIT_OK
        report = json.loads((tmp_path / "verify_prop3.json").read_text())
        assert report["passed"] is True
        assert "passed True" in capsys.readouterr().out
