"""RFC 4180 CSV rendering of records, using the canonical column names."""

from __future__ import annotations

import csv
import io
from typing import Iterable

from wattline.records import FIELD_ORDER, ProcessRecord, record_from_dict, record_to_dict

CSV_HEADER = ",".join(FIELD_ORDER)

_INT_COLUMNS = {"process_id"}
_FLOAT_COLUMNS = {"cpu_fraction", "memory_bytes", "disk_bytes_per_s", "network_bytes_per_s",
                  "io_ops_per_s", "energy_j"}


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records: Iterable[ProcessRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(FIELD_ORDER)
    for rec in records:
        d = record_to_dict(rec)
        writer.writerow([_cell(d.get(k)) for k in FIELD_ORDER])
    return buf.getvalue()


def csv_to_records(text: str) -> list[ProcessRecord]:
    """Parse export CSV back into records (empty cell = absent field)."""
    reader = csv.reader(io.StringIO(text, newline=""))
    header = next(reader, None)
    if header != list(FIELD_ORDER):
        raise ValueError("unexpected CSV header")
    out = []
    for row in reader:
        if len(row) != len(FIELD_ORDER):
            raise ValueError(f"row has {len(row)} cells, expected {len(FIELD_ORDER)}")
        obj = {}
        for key, cell in zip(FIELD_ORDER, row):
            if cell == "":
                continue
            if key in _INT_COLUMNS:
                obj[key] = int(cell)
            elif key in _FLOAT_COLUMNS:
                obj[key] = float(cell)
            else:
                obj[key] = cell
        out.append(record_from_dict(obj))
    return out
