"""Tests for the feeder-stgnn command line."""

import json

import pandas as pd
import pytest

from src import cli
from src.cli import DATASET_FILE, SPLIT_FILE, build_parser, main
from src.tools.datagen import load_cache
from src.tools.models import ExperimentManifest


@pytest.fixture
def out(tmp_path):
    return tmp_path / "artifacts"


@pytest.fixture
def data_dir(out):
    """Two fault positions with one fault type: 2 runs, 80 windows."""
    code = main(["--out", str(out), "gen-data", "--locations", "2", "--types", "1"])
    assert code == 0
    return out / "data" / "default"


class TestParser:
    """Tests for argument handling."""

    def test_unknown_strategy_exits_2(self, out, capsys):
        """Test argparse rejects a strategy outside the enumeration."""
        with pytest.raises(SystemExit) as excinfo:
            main(["--out", str(out), "build-graph", "--strategy", "everything"])
        assert excinfo.value.code == 2
        assert "invalid choice" in capsys.readouterr().err

    def test_command_required(self):
        """Test a bare invocation is a usage error."""
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args([])
        assert excinfo.value.code == 2

    def test_topology_alias(self):
        """Test --strategy is accepted as a spelling of --topology."""
        args = build_parser().parse_args(["train", "--strategy", "full"])
        assert args.topology == "full"
        assert args.arch == "rgcn"


class TestFeederCommands:
    """Tests for validation and graph export."""

    def test_validate_default(self, out, capsys):
        """Test the shipped feeder validates cleanly."""
        assert main(["--out", str(out), "validate-feeder"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["orphan_buses"] == []

    @pytest.mark.parametrize(("strategy", "nodes"), [("measured-only", 25), ("full", 128)])
    def test_build_graph(self, out, capsys, strategy, nodes):
        """Test both strategies write a graph export and a DOT file."""
        assert main(["--out", str(out), "build-graph", "--strategy", strategy]) == 0
        assert f"{nodes} nodes" in capsys.readouterr().out
        export = (out / "graphs" / f"default_{strategy}.graph").read_text(encoding="utf-8")
        assert export.startswith("# fingerprint ")
        assert (out / "graphs" / f"default_{strategy}.dot").exists()

    def test_bad_switch_op_exits_1(self, out):
        """Test a library error becomes exit code 1."""
        args = ["--out", str(out), "build-graph", "--strategy", "full"]
        code = main(args + ["--switch-op", "open:1-999"])
        assert code == 1


class TestDataCommands:
    """Tests for dataset generation."""

    def test_gen_data(self, data_dir, capsys):
        """Test 40 windows per run, half of them fault-free, and a persisted split."""
        dataset = load_cache(data_dir / DATASET_FILE)
        assert len(dataset) == 80
        assert (dataset.labels == 0).sum() == 40
        info = json.loads((data_dir / SPLIT_FILE).read_text(encoding="utf-8"))
        sizes = [len(info["keys"][name]) for name in ("train", "val", "test")]
        assert sizes == [56, 12, 12]
        assert info["fingerprint"] == dataset.metadata["fingerprint"]

    def test_gen_data_is_reproducible(self, data_dir, out, tmp_path):
        """Test the same seed writes a byte-identical cache."""
        other = tmp_path / "again"
        args = ["--out", str(out), "gen-data", "--data", str(other)]
        main(args + ["--locations", "2", "--types", "1"])
        assert (other / DATASET_FILE).read_bytes() == (data_dir / DATASET_FILE).read_bytes()

    def test_csv_export_and_ingest(self, out, tmp_path):
        """Test exported runs re-ingest to the same windows."""
        first = tmp_path / "csv"
        args = ["--out", str(out), "gen-data", "--data", str(first), "--locations", "2"]
        assert main(args + ["--types", "1", "--csv"]) == 0
        second = tmp_path / "ingested"
        args = ["--out", str(out), "gen-data", "--data", str(second), "--locations", "2"]
        assert main(args + ["--types", "1", "--from-csv", str(first / "runs.csv")]) == 0
        generated = load_cache(first / DATASET_FILE)
        ingested = load_cache(second / DATASET_FILE)
        assert ingested.labels.tolist() == generated.labels.tolist()
        assert ingested.features.shape == generated.features.shape

    def test_workers_forwarded(self, out, mocker):
        """Test --workers reaches the run generator."""
        spy = mocker.spy(cli, "build_dataset")
        args = ["--out", str(out), "gen-data", "--locations", "1", "--types", "1"]
        assert main(args + ["--workers", "3"]) == 0
        assert spy.call_args.kwargs["workers"] == 3
        assert len(spy.spy_return) == 40

    def test_output_root_from_environment(self, tmp_path, monkeypatch):
        """Test $STGNN_OUTPUT_ROOT is used when --out is absent."""
        monkeypatch.setenv("STGNN_OUTPUT_ROOT", str(tmp_path / "env"))
        assert main(["build-graph", "--strategy", "measured-only"]) == 0
        assert (tmp_path / "env" / "graphs" / "default_measured-only.graph").exists()

    def test_train_without_data_exits_1(self, out, tmp_path):
        """Test a missing dataset directory is reported, not raised."""
        assert main(["--out", str(out), "train", "--data", str(tmp_path / "none")]) == 1


@pytest.mark.slow
class TestTrainCommands:
    """End-to-end training, evaluation and timing on a small dataset."""

    def test_train_then_eval(self, data_dir, out):
        """Test train writes a checkpoint and report that eval reproduces."""
        args = ["--out", str(out), "train", "--epochs", "1", "--arch", "rgatv2"]
        assert main(args) == 0
        run = out / "runs" / "default_measured-only_rgatv2"
        report = json.loads((run / "report.json").read_text(encoding="utf-8"))
        assert report["sample_count"] == 12
        assert "train_seconds" not in report
        assert len(pd.read_csv(run / "loss.csv")) == 2
        assert len(pd.read_csv(out / "reports.csv")) == 1

        assert main(["--out", str(out), "eval", "--checkpoint", str(run / "model.stgm")]) == 0
        again = json.loads((run / "model.test.json").read_text(encoding="utf-8"))
        assert again["macro_f1"] == report["macro_f1"]

    def test_full_topology_train(self, data_dir, out):
        """Test training on the full topology aligns the dataset to 128 nodes."""
        args = ["--out", str(out), "train", "--epochs", "1", "--topology", "full"]
        assert main(args) == 0
        assert (out / "runs" / "default_full_rgcn" / "model.stgm").exists()

    def test_bench(self, data_dir, out):
        """Test the timing table has a row per architecture and strategy."""
        args = ["--out", str(out), "bench", "--epochs", "1", "--archs", "rgcn", "--repeats", "1"]
        assert main(args) == 0
        frame = pd.read_csv(out / "bench" / "default_timing.csv")
        assert sorted(frame["strategy"]) == ["full", "measured-only"]


def _manifest(path, **overrides):
    payload = {
        "configurations": ["default"],
        "datagen": {"fault_buses": ["13", "97"], "fault_types": ["ABC"]},
        "train": [
            {"architecture": "gru", "epochs": 1, "gru_hidden": 4},
            {"architecture": "rgcn", "epochs": 1, "gru_hidden": 4, "gnn_hidden": 4},
        ],
        "seeds": [0],
        "output_dir": "results",
    }
    payload.update(overrides)
    path.write_text(json.dumps(payload), encoding="utf-8")
    return path


class TestManifest:
    """Tests for experiment manifests."""

    def test_relative_paths_resolve(self, tmp_path):
        """Test output_dir is taken relative to the manifest file."""
        manifest = ExperimentManifest.load(_manifest(tmp_path / "m.json"))
        assert manifest.output_dir == tmp_path / "results"
        assert manifest.seeds == [0]

    def test_missing_feeder_exits_1(self, tmp_path):
        """Test a manifest naming an absent feeder file is reported."""
        path = _manifest(tmp_path / "m.json", feeder="missing.feeder")
        assert main(["run", "--manifest", str(path)]) == 1

    @pytest.mark.slow
    def test_run_summary(self, tmp_path):
        """Test the sweep skips the baseline on the full topology and writes a summary."""
        assert main(["run", "--manifest", str(_manifest(tmp_path / "m.json"))]) == 0
        summary = pd.read_csv(tmp_path / "results" / "summary.csv")
        pairs = sorted(zip(summary["strategy"], summary["architecture"], strict=True))
        assert pairs == [("full", "rgcn"), ("measured-only", "gru"), ("measured-only", "rgcn")]
        assert summary["half_width"].tolist() == [0.0, 0.0, 0.0]
        assert summary["fingerprint"].nunique() == 1
