"""End-to-end tests of the gallat command line."""
import io
import json

import pandas as pd
import pytest
from rich.console import Console

from gallat.cli import error_line, get_available_commands, run

SMALL_TRAIN = [
    "--d-e", "2", "--P", "1", "--epochs", "1", "--pretrain-epochs", "1", "--test-days", "7",
    "--node-embed-dim", "2", "--slot-embed-dim", "2", "--dow-embed-dim", "2", "--batch-size", "16",
]


def quiet():
    return Console(file=io.StringIO())


def gallat(*argv):
    return run([str(a) for a in argv], console=quiet())


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A 3 x 3 synthetic city of 21 days at 4 slots per day, and a model trained on it."""
    root = tmp_path_factory.mktemp("cli")
    data, run_dir = root / "data", root / "run"
    assert gallat("synth", "--output-dir", data, "--days", 21, "--slots-per-day", 4,
                  "--n-rows", 3, "--n-cols", 3, "--seed", 3) == 0
    assert gallat("train", "--dataset", data, "--output-dir", run_dir, *SMALL_TRAIN) == 0
    return root


def error_fields(stderr):
    line = stderr.strip().splitlines()[-1]
    assert line.startswith("error=")
    return dict(part.split("=", 1) for part in line.split(" ")[:2])


class TestPipeline:
    def test_synth_outputs(self, workspace):
        data = workspace / "data"
        for name in ("snapshots.csv", "dataset.json", "rates.csv", "surge.csv", "manifest.json"):
            assert (data / name).exists(), name
        meta = json.loads((data / "dataset.json").read_text())
        assert meta["n_slots"] == 84
        manifest = json.loads((data / "manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["seed"] == 3

    def test_train_outputs(self, workspace):
        run_dir = workspace / "run"
        assert (run_dir / "checkpoint.zip").exists()
        log = pd.read_csv(run_dir / "train_log.csv")
        assert list(log.columns) == ["epoch", "phase", "train_loss", "val_loss", "seconds"]
        assert list(log["phase"]) == ["pretrain", "pretrain", "train", "train"]
        losses = pd.read_csv(run_dir / "loss_log.csv")
        assert list(losses.columns) == ["epoch", "phase", "train_loss", "val_loss"]
        assert len(losses) == len(log)

    def test_train_is_reproducible(self, workspace):
        again = workspace / "again"
        assert gallat("train", "--dataset", workspace / "data", "--output-dir", again, *SMALL_TRAIN) == 0
        assert (again / "checkpoint.zip").read_bytes() == (workspace / "run" / "checkpoint.zip").read_bytes()
        first = pd.read_csv(workspace / "run" / "train_log.csv").drop(columns="seconds")
        second = pd.read_csv(again / "train_log.csv").drop(columns="seconds")
        pd.testing.assert_frame_equal(first, second)
        assert (again / "loss_log.csv").read_bytes() == (workspace / "run" / "loss_log.csv").read_bytes()

    def test_evaluate_with_baseline(self, workspace):
        out = workspace / "eval"
        assert gallat("evaluate", "--checkpoint", workspace / "run" / "checkpoint.zip",
                      "--dataset", workspace / "data", "--output-dir", out, "--baseline", "ha") == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert set(metrics) == {"gallat", "ha"}
        for source in metrics.values():
            for key in ("od.mape.0", "od.mape.3", "od.mape.5", "demand.mae.0", "od.count.0"):
                assert key in source
        rows = pd.read_csv(out / "metrics.csv")
        assert len(rows) == 2 * 2 * 3

    def test_evaluate_baseline_only(self, workspace):
        out = workspace / "ha"
        assert gallat("evaluate", "--dataset", workspace / "data", "--output-dir", out,
                      "--baseline", "ha") == 0
        assert set(json.loads((out / "metrics.json").read_text())) == {"ha"}

    def test_predict(self, workspace):
        out = workspace / "pred"
        assert gallat("predict", "--checkpoint", workspace / "run" / "checkpoint.zip",
                      "--dataset", workspace / "data", "--output-dir", out, "--top-k", 5) == 0
        demand = pd.read_csv(out / "demand.csv")
        od = pd.read_csv(out / "od.csv")
        flows = pd.read_csv(out / "top_flows.csv")
        assert len(demand) == 9 and set(demand["slot"]) == {84}
        assert len(od) == 81
        sums = od.groupby("origin")["value"].sum().reindex(range(9), fill_value=0.0).to_numpy()
        assert sums == pytest.approx(demand["value"].to_numpy(), abs=1e-9)
        assert list(flows["rank"]) == [1, 2, 3, 4, 5]
        assert list(flows["value"]) == sorted(flows["value"], reverse=True)

    def test_predict_floor(self, workspace):
        full, floored = workspace / "pred_all", workspace / "pred_floor"
        args = ["--checkpoint", workspace / "run" / "checkpoint.zip", "--dataset", workspace / "data"]
        assert gallat("predict", *args, "--output-dir", full) == 0
        values = pd.read_csv(full / "od.csv")["value"]
        floor = float(values.median())
        assert gallat("predict", *args, "--output-dir", floored, "--floor", floor) == 0
        od = pd.read_csv(floored / "od.csv")
        assert list(od.columns) == ["slot", "origin", "dest", "value"]
        assert len(od) == int((values > floor).sum())
        assert (od["value"] > floor).all()

    def test_reduced_layers(self, workspace):
        run_dir = workspace / "reduced"
        assert gallat("train", "--dataset", workspace / "data", "--output-dir", run_dir, *SMALL_TRAIN,
                      "--spatial-layer", "gat", "--transfer-layer", "dense") == 0
        assert gallat("predict", "--checkpoint", run_dir / "checkpoint.zip", "--dataset", workspace / "data",
                      "--output-dir", run_dir / "pred") == 0
        report_dir = run_dir / "params"
        assert gallat("params", "--checkpoint", run_dir / "checkpoint.zip", "--output-dir", report_dir) == 0
        counts = json.loads((report_dir / "params.json").read_text())["counts"]
        assert counts["attention_total"] == counts["attention_formula"]

    def test_params(self, workspace):
        out = workspace / "params"
        assert gallat("params", "--checkpoint", workspace / "run" / "checkpoint.zip", "--output-dir", out) == 0
        report = json.loads((out / "params.json").read_text())
        assert report["counts"]["total"] == report["stored_elements"]
        assert report["counts"]["attention_total"] == report["counts"]["attention_formula"]


class TestFailures:
    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            gallat("train")
        assert e.value.code == 2
        assert error_fields(capsys.readouterr().err) == {"error": "usage", "exit": "2"}

    def test_invalid_value(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as e:
            gallat("synth", "--output-dir", tmp_path, "--days", 0)
        assert e.value.code == 2
        assert error_fields(capsys.readouterr().err)["error"] == "usage"

    def test_missing_input(self, capsys, tmp_path):
        with pytest.raises(SystemExit) as e:
            gallat("params", "--checkpoint", tmp_path / "absent.zip", "--output-dir", tmp_path)
        assert e.value.code == 3
        assert error_fields(capsys.readouterr().err) == {"error": "missing_input", "exit": "3"}

    def test_nothing_to_evaluate(self, capsys, workspace, tmp_path):
        with pytest.raises(SystemExit) as e:
            gallat("evaluate", "--dataset", workspace / "data", "--output-dir", tmp_path)
        assert e.value.code == 2
        assert error_fields(capsys.readouterr().err)["error"] == "config"

    def test_insufficient_history(self, capsys, tmp_path):
        data = tmp_path / "short"
        assert gallat("synth", "--output-dir", data, "--days", 8, "--slots-per-day", 4,
                      "--n-rows", 2, "--n-cols", 2) == 0
        with pytest.raises(SystemExit) as e:
            gallat("train", "--dataset", data, "--output-dir", tmp_path / "run", *SMALL_TRAIN)
        assert e.value.code == 4
        assert error_fields(capsys.readouterr().err)["error"] == "insufficient_history"

    def test_one_slot_per_day_rejected_at_ingest(self, capsys, tmp_path):
        trips = tmp_path / "trips.csv"
        trips.write_text("start_time,origin_lat,origin_lon,dest_lat,dest_lon\n2024-01-01 08:12:00,39.905,116.305,39.915,116.33\n")
        with pytest.raises(SystemExit) as e:
            gallat("ingest", "--trips", trips, "--output-dir", tmp_path / "data", "--min-lat", 39.90,
                   "--min-lon", 116.30, "--max-lat", 39.92, "--max-lon", 116.335, "--n-rows", 2, "--n-cols", 3,
                   "--slot-minutes", 1440)
        assert e.value.code == 2
        err = capsys.readouterr().err
        assert error_fields(err)["error"] == "config"
        assert "slot-minutes" in err and "slots per day" in err
        assert not (tmp_path / "data" / "snapshots.csv").exists()

    def test_error_line_is_single_line(self):
        line = error_line("data_format", 5, 'row 3: bad "value"\nsecond line')
        assert line == "error=data_format exit=5 message=\"row 3: bad 'value' second line\""


def test_every_command_is_registered():
    assert sorted(c.name for c in get_available_commands()) == [
        "evaluate", "ingest", "params", "predict", "synth", "train",
    ]


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        gallat("--version")
    assert e.value.code == 0
    assert "gallat" in capsys.readouterr().out


def test_ingest(tmp_path):
    trips = tmp_path / "trips.csv"
    trips.write_text(
        "start_time,origin_lat,origin_lon,dest_lat,dest_lon\n"
        "2024-01-01 08:12:00,39.905,116.305,39.915,116.33\n"
        "2024-01-01 08:40:00,39.905,116.305,45.0,116.33\n"
        "garbage,1,2,3,4\n"
    )
    out = tmp_path / "data"
    assert gallat("ingest", "--trips", trips, "--output-dir", out, "--min-lat", 39.90, "--min-lon", 116.30,
                  "--max-lat", 39.92, "--max-lon", 116.335, "--n-rows", 2, "--n-cols", 3) == 0
    meta = json.loads((out / "dataset.json").read_text())
    assert meta["n_slots"] == 24
    assert meta["start_dow"] == 0
    snapshots = pd.read_csv(out / "snapshots.csv")
    assert snapshots.to_dict("records") == [{"slot": 8, "origin": 0, "dest": 5, "count": 1}]
    assert json.loads((out / "manifest.json").read_text())["inputs"] == [str(trips)]
