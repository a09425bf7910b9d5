import pytest

from mdsgnn.config import Method, SweepAxis
from mdsgnn.experiments import Summary, SweepRow, SweepTable
from mdsgnn.reporting import (
    METRICS_FILE,
    TIMING_FILE,
    MetricsWriter,
    read_records,
    read_table,
    sweep_rows,
    write_table,
)
from mdsgnn.training import EpochLosses, RunMetrics
from tests.factories import TrainConfigFactory


def metrics(seed: int = 0, seconds: float = 1.5) -> RunMetrics:
    losses = EpochLosses(l_ce=1.0, l_ce_prime=0.9, l_rec=0.5, l_cl=2.0, total=2.7)
    return RunMetrics(
        dataset="toy",
        seed=seed,
        method=Method.MDSGNN,
        losses=[losses, losses],
        val_accs=[0.5, 0.75],
        test_accs=[0.4, 0.7],
        best_epoch=2,
        best_val_acc=0.75,
        test_acc=0.7,
        seconds=seconds,
    )


def test_run_records(tmp_path):
    writer = MetricsWriter(tmp_path / "out")
    writer.add_run(metrics(seed=4), TrainConfigFactory(seed=0), "mdsgnn")

    records = read_records(tmp_path / "out" / METRICS_FILE)

    assert [record["record"] for record in records] == ["epoch", "epoch", "run"]
    assert records[1]["epoch"] == 2
    assert records[1]["l_cl"] == 2.0
    assert records[1]["val_acc"] == 0.75
    run = records[-1]
    assert (run["seed"], run["best_epoch"], run["test_acc"]) == (4, 2, 0.7)
    assert run["config"]["seed"] == "4"
    assert "seconds" not in run


def test_timing_kept_apart_from_metrics(tmp_path):
    writer = MetricsWriter(tmp_path)
    writer.add_run(metrics(seconds=3.25), TrainConfigFactory(), "mdsgnn")

    timing = read_records(tmp_path / TIMING_FILE)

    assert timing == [
        {"dataset": "toy", "method": "mdsgnn", "tag": "mdsgnn", "seed": 0, "seconds": 3.25}
    ]


def test_metrics_do_not_depend_on_wall_clock(tmp_path):
    cfg = TrainConfigFactory(seed=0)
    MetricsWriter(tmp_path / "a").add_run(metrics(seconds=1.0), cfg, "mdsgnn")
    MetricsWriter(tmp_path / "b").add_run(metrics(seconds=9.0), cfg, "mdsgnn")

    first = (tmp_path / "a" / METRICS_FILE).read_bytes()
    assert first == (tmp_path / "b" / METRICS_FILE).read_bytes()


def test_summary_record_follows_runs(tmp_path):
    summary = Summary.of("w/o rec", Method.MDSGNN, [metrics(0), metrics(1)])
    writer = MetricsWriter(tmp_path)

    writer.add_summary(summary, TrainConfigFactory())

    records = read_records(tmp_path / METRICS_FILE)
    assert [r["record"] for r in records].count("run") == 2
    assert records[-1]["record"] == "summary"
    assert records[-1]["tag"] == "w/o rec"
    assert records[-1]["seeds"] == [0, 1]
    assert records[-1]["std"] == 0.0


def test_writer_truncates_previous_output(tmp_path):
    MetricsWriter(tmp_path).add_run(metrics(), TrainConfigFactory(), "mdsgnn")

    MetricsWriter(tmp_path)

    assert read_records(tmp_path / METRICS_FILE) == []


def test_read_records_names_bad_line(tmp_path):
    path = tmp_path / METRICS_FILE
    path.write_text('{"record": "run"}\nnot json\n', encoding="utf-8")

    with pytest.raises(ValueError, match="metrics.jsonl:2"):
        read_records(path)


def test_table_round_trip(tmp_path):
    path = tmp_path / "table.tsv"

    write_table(path, [("mdsgnn", 0.8125, 0.01), ("gcn", 0.75, 0.0)], header="method")

    assert path.read_text(encoding="utf-8").splitlines()[0] == "method\tmean\tstd"
    assert read_table(path) == [("mdsgnn", 0.8125, 0.01), ("gcn", 0.75, 0.0)]


def test_sweep_rows():
    table = SweepTable(
        axis=SweepAxis.K,
        rows=[
            SweepRow(value=5, summary=Summary.of("k=5", Method.MDSGNN, [metrics()])),
            SweepRow(value=10, summary=Summary.of("k=10", Method.MDSGNN, [metrics()])),
        ],
    )

    assert sweep_rows(table) == [(5, 0.7, 0.0), (10, 0.7, 0.0)]


def test_read_table_rejects_short_rows(tmp_path):
    path = tmp_path / "table.tsv"
    path.write_text("value\tmean\tstd\n0.1\t0.5\n", encoding="utf-8")

    with pytest.raises(ValueError, match="table.tsv:2"):
        read_table(path)
