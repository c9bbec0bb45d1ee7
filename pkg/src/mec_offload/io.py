"""Atomic file output and the per-episode metrics CSV schema."""

from __future__ import annotations

import csv
import io
import numbers
import os
import tempfile
from pathlib import Path
from typing import Iterable, List, Mapping

METRICS_FIELDS = ["episode", "reward_sum", "tasks_completed", "tasks_failed",
                  "energy_j", "mean_loss", "epsilon"]


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _fmt(v):
    # repr round-trips floats exactly, so reruns compare byte-for-byte;
    # numpy scalars are unwrapped first so their repr stays a bare number
    if isinstance(v, numbers.Integral):
        return int(v)
    if isinstance(v, numbers.Real):
        return repr(float(v))
    return v


def rows_to_csv(rows: Iterable[Mapping], fields: List[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in fields})
    return buf.getvalue()


def write_csv(path, rows: Iterable[Mapping], fields: List[str]) -> None:
    atomic_write_text(path, rows_to_csv(rows, fields))


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != METRICS_FIELDS:
            raise ValueError(f"{path}: columns {reader.fieldnames} do not match "
                             f"metrics schema {METRICS_FIELDS}")
        rows = []
        for r in reader:
            rows.append({
                "episode": int(r["episode"]),
                "reward_sum": float(r["reward_sum"]),
                "tasks_completed": int(r["tasks_completed"]),
                "tasks_failed": int(r["tasks_failed"]),
                "energy_j": float(r["energy_j"]),
                "mean_loss": float(r["mean_loss"]),
                "epsilon": float(r["epsilon"]),
            })
    return rows
