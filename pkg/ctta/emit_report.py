import csv
import logging
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel

from .model_report import BatchRecord, RunReport

logger = logging.getLogger(__name__)

ReportFormat = Literal["json", "csv"]

CSV_FIELDS = list(BatchRecord.model_fields)


def emit_report(report: RunReport, fmt: ReportFormat, path: Union[str, Path]) -> Path:
    """Write the full nested report as JSON, or one CSV row per batch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_text(report.model_dump_json(indent=2))
    elif fmt == "csv":
        with path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_FIELDS)
            writer.writeheader()
            for rec in report.records:
                writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                                 for k, v in rec.model_dump().items()})
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    logger.info("report written to %s", path)
    return path


def emit_table(table: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(table.model_dump_json(indent=2))
    logger.info("table written to %s", path)
    return path


def load_report(path: Union[str, Path]) -> RunReport:
    return RunReport.model_validate_json(Path(path).read_text())


def read_csv_records(path: Union[str, Path]) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))
