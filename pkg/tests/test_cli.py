import pytest

from mdsgnn.cli import ExitCode, build_parser, main
from mdsgnn.config import load_config
from mdsgnn.graphdata import load_dataset, load_incomplete_dataset
from mdsgnn.reporting import METRICS_FILE, TABLE_FILE, TIMING_FILE, read_records, read_table
from mdsgnn.training import accuracy, load_checkpoint, predict


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.cfg"
    path.write_text(
        "epochs=3\nhidden=8\nproj_dim=4\nheads=2\nknn_k=3\nppr_steps=3\n", encoding="utf-8"
    )
    return path


def test_corrupt_counts(sbm_dir, tmp_path, capsys):
    out = tmp_path / "corrupted"

    code = main(["corrupt", "--in", str(sbm_dir), "--out", str(out), "--seed", "4"])

    assert code == ExitCode.OK
    clean = load_dataset(sbm_dir)
    observed = load_incomplete_dataset(out)
    assert observed.mask.num_missing == 30
    assert observed.graph.num_edges == clean.num_edges - clean.num_edges // 2
    printed = capsys.readouterr().out.splitlines()
    assert printed[0] == "masked 30 of 60 nodes"
    assert printed[1] == f"dropped {clean.num_edges // 2} of {clean.num_edges} edges"
    assert (out / "meta.txt").read_text(encoding="utf-8").startswith("# corrupted from sbm")


def test_corrupt_is_deterministic(sbm_dir, tmp_path):
    for name in ("a", "b"):
        main(["corrupt", "--in", str(sbm_dir), "--out", str(tmp_path / name), "--seed", "9"])

    for name in ("edges.tsv", "features.tsv", "mask.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_corrupt_without_missing_rates_writes_full_mask(sbm_dir, tmp_path):
    out = tmp_path / "full"

    main(
        [
            "corrupt",
            "--in",
            str(sbm_dir),
            "--out",
            str(out),
            "--feature-missing",
            "0",
            "--edge-missing",
            "0",
        ]
    )

    assert load_incomplete_dataset(out).mask.num_missing == 0
    assert (out / "mask.tsv").is_file()


def test_train_twice_gives_identical_metrics(sbm_dir, tmp_path, config_file):
    for name in ("first", "second"):
        code = main(
            [
                "train",
                "--data",
                str(sbm_dir),
                "--config",
                str(config_file),
                "--out",
                str(tmp_path / name),
                "--feature-missing",
                "0.5",
                "--edge-missing",
                "0.5",
                "--checkpoint",
                str(tmp_path / name / "model.bin"),
            ]
        )
        assert code == ExitCode.OK

    first = (tmp_path / "first" / METRICS_FILE).read_bytes()
    assert first == (tmp_path / "second" / METRICS_FILE).read_bytes()
    assert (tmp_path / "first" / TIMING_FILE).is_file()
    assert (tmp_path / "first" / "model.bin").is_file()
    records = read_records(tmp_path / "first" / METRICS_FILE)
    assert [r["record"] for r in records] == ["epoch"] * 3 + ["run"]


def test_run_over_seeds(sbm_dir, tmp_path, config_file, capsys):
    out = tmp_path / "run"

    code = main(
        [
            "run",
            "--data",
            str(sbm_dir),
            "--config",
            str(config_file),
            "--out",
            str(out),
            "--seeds",
            "2",
            "--seed",
            "10",
            "--method",
            "gcn",
        ]
    )

    assert code == ExitCode.OK
    records = read_records(out / METRICS_FILE)
    assert [r["seed"] for r in records if r["record"] == "run"] == [10, 11]
    assert records[-1]["record"] == "summary"
    assert read_table(out / TABLE_FILE)[0][0] == "gcn"
    assert capsys.readouterr().out.startswith("gcn: ")


def test_ablate_writes_tag(sbm_dir, tmp_path, config_file):
    out = tmp_path / "ablate"

    code = main(
        [
            "ablate",
            "--data",
            str(sbm_dir),
            "--config",
            str(config_file),
            "--out",
            str(out),
            "--seeds",
            "1",
            "--drop",
            "rec",
        ]
    )

    assert code == ExitCode.OK
    assert read_table(out / TABLE_FILE)[0][0] == "w/o rec"


def test_sweep_table_rows(sbm_dir, tmp_path, config_file):
    out = tmp_path / "sweep"

    code = main(
        [
            "sweep",
            "--data",
            str(sbm_dir),
            "--config",
            str(config_file),
            "--out",
            str(out),
            "--seeds",
            "1",
            "--axis",
            "missing_rate",
            "--values",
            "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
            "--method",
            "gcn",
        ]
    )

    assert code == ExitCode.OK
    rows = read_table(out / TABLE_FILE)
    assert [value for value, _, _ in rows] == [f"0.{i}" for i in range(1, 10)]
    assert (out / TABLE_FILE).read_text(encoding="utf-8").startswith("missing_rate\t")


def test_sweep_rejects_bad_values(sbm_dir, tmp_path):
    code = main(
        [
            "sweep",
            "--data",
            str(sbm_dir),
            "--out",
            str(tmp_path),
            "--axis",
            "k",
            "--values",
            "5,zero",
        ]
    )

    assert code == ExitCode.USAGE


def test_compare_table(sbm_dir, tmp_path, config_file):
    out = tmp_path / "compare"

    code = main(
        [
            "compare",
            "--data",
            str(sbm_dir),
            "--config",
            str(config_file),
            "--out",
            str(out),
            "--seeds",
            "1",
            "--methods",
            "gcn,gat",
        ]
    )

    assert code == ExitCode.OK
    assert [row[0] for row in read_table(out / TABLE_FILE)] == ["gcn", "gat"]


def test_gradcheck_command(capsys):
    code = main(["gradcheck", "--components", "classifier,projection"])

    assert code == ExitCode.OK
    lines = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in lines] == ["classifier", "projection"]
    assert all(line.endswith("\tok") for line in lines)


def test_gradcheck_unknown_component():
    assert main(["gradcheck", "--components", "nothing"]) == ExitCode.USAGE


def test_synth_writes_loadable_dataset(tmp_path):
    out = tmp_path / "synth"

    code = main(["synth", "--out", str(out), "--nodes", "180", "--features", "20"])

    assert code == ExitCode.OK
    graph = load_dataset(out)
    assert (graph.n, graph.f, graph.c) == (180, 20, 3)


def test_missing_config_is_usage_error(sbm_dir, tmp_path):
    code = main(
        [
            "train",
            "--data",
            str(sbm_dir),
            "--config",
            str(tmp_path / "nope.cfg"),
            "--out",
            str(tmp_path),
        ]
    )

    assert code == ExitCode.USAGE


def test_bad_config_is_usage_error(sbm_dir, tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("widht=3\n", encoding="utf-8")

    code = main(["train", "--data", str(sbm_dir), "--config", str(path), "--out", str(tmp_path)])

    assert code == ExitCode.USAGE


def test_bad_dataset_is_data_error(sbm_dir, tmp_path):
    (sbm_dir / "edges.tsv").write_text("0\t999\n", encoding="utf-8")

    code = main(["train", "--data", str(sbm_dir), "--out", str(tmp_path / "out")])

    assert code == ExitCode.DATA


def test_argument_errors_exit_with_usage_code():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["corrupt", "--in", "x", "--out", "y", "--feature-missing", "2"])

    assert info.value.code == ExitCode.USAGE


def test_threads_variable_must_be_positive(sbm_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("MDSGNN_THREADS", "0")

    code = main(["run", "--data", str(sbm_dir), "--out", str(tmp_path), "--seeds", "1"])

    assert code == ExitCode.USAGE


@pytest.mark.parametrize(
    "command",
    [
        ["train", "--edge-missing", "0.1"],
        ["sweep", "--axis", "missing_rate", "--values", "0.2"],
    ],
)
def test_corrupting_an_incomplete_dataset_is_data_error(sbm_dir, tmp_path, capsys, command):
    observed = tmp_path / "observed"
    main(["corrupt", "--in", str(sbm_dir), "--out", str(observed), "--seed", "1"])

    code = main([*command, "--data", str(observed), "--out", str(tmp_path / "out")])

    assert code == ExitCode.DATA
    assert "already missing" in capsys.readouterr().err


def test_corrupt_refuses_incomplete_dataset(sbm_dir, tmp_path):
    main(["corrupt", "--in", str(sbm_dir), "--out", str(tmp_path / "once"), "--seed", "1"])

    code = main(["corrupt", "--in", str(tmp_path / "once"), "--out", str(tmp_path / "twice")])

    assert code == ExitCode.DATA
    assert not (tmp_path / "twice").exists()


def test_full_mask_dataset_can_be_corrupted(sbm_dir, tmp_path, config_file):
    full = tmp_path / "full"
    main(
        ["corrupt", "--in", str(sbm_dir), "--out", str(full)]
        + ["--feature-missing", "0", "--edge-missing", "0"]
    )

    code = main(
        ["train", "--data", str(full), "--config", str(config_file), "--out", str(tmp_path)]
        + ["--feature-missing", "0.5"]
    )

    assert code == ExitCode.OK


def test_checkpoint_reproduces_reported_accuracy(sbm_dir, tmp_path, config_file):
    out = tmp_path / "train"
    main(
        ["train", "--data", str(sbm_dir), "--config", str(config_file), "--out", str(out)]
        + ["--checkpoint", str(out / "model.bin")]
    )
    observed = load_incomplete_dataset(sbm_dir)
    cfg = load_config(config_file)

    state = load_checkpoint(out / "model.bin", observed, cfg)

    run = next(r for r in read_records(out / METRICS_FILE) if r["record"] == "run")
    predictions = predict(state, observed, cfg)
    assert accuracy(predictions, observed.graph.labels, observed.graph.test_idx) == run["test_acc"]
    assert state.epoch == run["best_epoch"]
