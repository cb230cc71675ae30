"""Merge per-run metrics CSVs into one long-format table for plotting."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

from .errors import ContractViolation, SchemaMismatchError

logger = logging.getLogger(__name__)

LONG_HEADER = ["run", "step", "metric", "value"]


@dataclass
class ExportSummary:
    rows: int
    skipped: int
    runs: List[str]


def _run_ids(inputs: Sequence[Path], run_ids: Optional[Sequence[str]]) -> List[str]:
    if run_ids:
        if len(run_ids) != len(inputs):
            raise ContractViolation(f"{len(run_ids)} run ids given for {len(inputs)} inputs")
        return list(run_ids)
    ids = [path.parent.name or path.stem for path in inputs]
    if len(set(ids)) != len(ids):
        ids = [f"{name}-{index}" for index, name in enumerate(ids)]
    return ids


def export_curves(inputs: Sequence[Union[str, Path]], output: Union[str, Path],
                  run_ids: Optional[Sequence[str]] = None) -> ExportSummary:
    """Write (run, step, metric, value) rows; empty cells are dropped and counted"""
    if not inputs:
        raise ContractViolation("at least one metrics file is required")
    paths = [Path(p) for p in inputs]
    names = _run_ids(paths, run_ids)

    header: Optional[List[str]] = None
    rows: List[List[str]] = []
    skipped = 0
    for path, run in zip(paths, names):
        with path.open(newline="") as handle:
            reader = csv.reader(handle)
            columns = next(reader, None)
            if columns is None or "step" not in columns:
                raise SchemaMismatchError(f"{path}: missing header or 'step' column")
            if header is None:
                header = columns
            elif columns != header:
                raise SchemaMismatchError(f"{path}: columns {columns} differ from {header}")
            step_index = columns.index("step")
            for record in reader:
                if not record:
                    continue
                for index, metric in enumerate(columns):
                    if index == step_index:
                        continue
                    value = record[index] if index < len(record) else ""
                    if value == "":
                        skipped += 1
                        continue
                    rows.append([run, record[step_index], metric, value])

    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    with output.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LONG_HEADER)
        writer.writerows(rows)

    if skipped:
        logger.warning(f"Omitted {skipped} empty metric values while exporting curves")
    return ExportSummary(rows=len(rows), skipped=skipped, runs=names)
