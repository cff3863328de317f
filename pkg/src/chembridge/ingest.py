"""Loading and cleaning of ChEMBL-style drug/mechanism tables."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .errors import DataError, EmptyDatasetError, SchemaError

log = logging.getLogger(__name__)

TEXT_SEPARATOR = " | "
DEFAULT_MIN_TEXT_LEN = 20

_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class DrugRecord:
    molecule_id: str
    canonical_smiles: str
    mechanism: str
    target_id: str
    target_name: str
    action_type: str
    drug_name: str
    max_phase: int

    @property
    def key(self) -> str:
        """Unique row id: one record per (molecule, target) pair."""
        return f"{self.molecule_id}|{self.target_id}"


REQUIRED_COLUMNS = tuple(f.name for f in fields(DrugRecord))


@dataclass(frozen=True)
class Dataset:
    records: tuple[DrugRecord, ...]
    source: str
    min_text_len: int

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def keys(self) -> list[str]:
        return [r.key for r in self.records]

    @property
    def target_ids(self) -> list[str]:
        return [r.target_id for r in self.records]


def _normalize(text: str) -> str:
    return _WS.sub(" ", text).strip()


def _parse_phase(raw: str, line: int) -> int:
    raw = raw.strip()
    if not raw:
        return 0
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"line {line}: max_phase {raw!r} is not a number") from None
    if value != int(value):
        raise DataError(f"line {line}: max_phase {raw!r} is not an integer")
    return int(value)


def load_dataset(path: str | Path, min_text_len: int = DEFAULT_MIN_TEXT_LEN) -> Dataset:
    """Read, clean and deduplicate a drug/mechanism CSV.

    Rows with an empty SMILES or a mechanism shorter than ``min_text_len``
    characters are dropped, then duplicate ``(molecule_id, target_id)`` pairs
    are removed keeping the first occurrence. Extra columns are ignored.
    """
    path = Path(path)
    records: list[DrugRecord] = []
    seen: set[tuple[str, str]] = set()
    dropped = {"smiles": 0, "short_text": 0, "duplicate": 0}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise SchemaError(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        reader.fieldnames = header
        for col in REQUIRED_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing required column {col!r}")
        for row in reader:
            line = reader.line_num
            values = {c: _normalize(row.get(c) or "") for c in REQUIRED_COLUMNS}
            if not values["canonical_smiles"]:
                dropped["smiles"] += 1
                continue
            if len(values["mechanism"]) < min_text_len:
                dropped["short_text"] += 1
                continue
            pair = (values["molecule_id"], values["target_id"])
            if pair in seen:
                dropped["duplicate"] += 1
                continue
            seen.add(pair)
            values["canonical_smiles"] = values["canonical_smiles"].replace(" ", "")
            values["max_phase"] = _parse_phase(values["max_phase"], line)
            records.append(DrugRecord(**values))
    log.info("loaded %d records from %s (dropped %s)", len(records), path, dropped)
    if not records:
        raise EmptyDatasetError(f"{path}: no rows survived cleaning")
    return Dataset(tuple(records), str(path), min_text_len)


def build_text_rich(record: DrugRecord, include_drug_name: bool = False) -> str:
    parts = [record.mechanism, record.target_name, record.action_type]
    if include_drug_name:
        parts.append(record.drug_name)
    return TEXT_SEPARATOR.join(p for p in (_normalize(x) for x in parts) if p)


def write_dataset(
    dataset: Dataset | Iterable[DrugRecord],
    path: str | Path,
    include_drug_name: bool = False,
) -> None:
    """Write records in the input schema plus a ``text_rich`` column."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*REQUIRED_COLUMNS, "text_rich"])
        for rec in dataset:
            writer.writerow(
                [getattr(rec, c) for c in REQUIRED_COLUMNS]
                + [build_text_rich(rec, include_drug_name)]
            )
