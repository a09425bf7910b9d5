import json
import logging
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from mdsgnn.config import TrainConfig, config_items
from mdsgnn.experiments import Summary, SweepTable
from mdsgnn.training import RunMetrics

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
TABLE_FILE = "table.tsv"


def epoch_records(metrics: RunMetrics, tag: str) -> Iterable[dict[str, Any]]:
    for epoch, (losses, val_acc, test_acc) in enumerate(
        zip(metrics.losses, metrics.val_accs, metrics.test_accs), start=1
    ):
        yield {
            "record": "epoch",
            "dataset": metrics.dataset,
            "method": str(metrics.method),
            "tag": tag,
            "seed": metrics.seed,
            "epoch": epoch,
            **losses.as_dict(),
            "val_acc": val_acc,
            "test_acc": test_acc,
        }


def run_record(metrics: RunMetrics, cfg: TrainConfig, tag: str) -> dict[str, Any]:
    return {
        "record": "run",
        "dataset": metrics.dataset,
        "method": str(metrics.method),
        "tag": tag,
        "seed": metrics.seed,
        "config": config_items(cfg.replace(seed=metrics.seed)),
        "epochs": len(metrics.losses),
        "best_epoch": metrics.best_epoch,
        "val_acc": metrics.best_val_acc,
        "test_acc": metrics.test_acc,
    }


def summary_record(summary: Summary) -> dict[str, Any]:
    return {
        "record": "summary",
        "tag": summary.tag,
        "method": str(summary.method),
        "seeds": summary.seeds,
        "accuracies": summary.accuracies,
        "mean": summary.mean,
        "std": summary.std,
    }


@dataclass
class MetricsWriter:
    """
    Appends metrics records to ``metrics.jsonl`` and wall-clock times to
    ``timing.jsonl`` in ``directory``. Both files are truncated on creation, so
    rerunning a command overwrites them.
    """

    directory: Path

    def __post_init__(self):
        self.directory = Path(self.directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        (self.directory / METRICS_FILE).write_text("", encoding="utf-8")
        (self.directory / TIMING_FILE).write_text("", encoding="utf-8")

    def _append(self, name: str, records: Iterable[dict[str, Any]]):
        with open(self.directory / name, "a", encoding="utf-8") as out:
            for record in records:
                out.write(json.dumps(record) + "\n")

    def add_run(self, metrics: RunMetrics, cfg: TrainConfig, tag: str):
        self._append(METRICS_FILE, [*epoch_records(metrics, tag), run_record(metrics, cfg, tag)])
        self._append(
            TIMING_FILE,
            [
                {
                    "dataset": metrics.dataset,
                    "method": str(metrics.method),
                    "tag": tag,
                    "seed": metrics.seed,
                    "seconds": metrics.seconds,
                }
            ],
        )

    def add_summary(self, summary: Summary, cfg: TrainConfig):
        for metrics in summary.runs:
            self.add_run(metrics, cfg, summary.tag)
        self._append(METRICS_FILE, [summary_record(summary)])


def read_records(path: str | Path) -> list[dict[str, Any]]:
    records = []
    with open(path, encoding="utf-8") as source:
        for number, line in enumerate(source, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{number}: not a metrics record: {exc}") from exc
    return records


def write_table(path: str | Path, rows: Iterable[tuple[Any, float, float]], header: str = "value"):
    lines = [f"{header}\tmean\tstd"]
    lines.extend(f"{value}\t{mean!r}\t{std!r}" for value, mean, std in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sweep_rows(table: SweepTable) -> list[tuple[Any, float, float]]:
    return [(row.value, row.summary.mean, row.summary.std) for row in table.rows]


def read_table(path: str | Path) -> list[tuple[str, float, float]]:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for number, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{number}: expected three columns")
        rows.append((parts[0], float(parts[1]), float(parts[2])))
    return rows
