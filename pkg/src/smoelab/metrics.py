"""Append-only CSV metric sinks."""

from __future__ import annotations

import csv
import io
from pathlib import Path

SCHEMA_VERSION = 1


class MetricsSink:
    """CSV writer with a fixed column schema; the header is written exactly once.

    Rows are flushed every ``flush_every`` writes. A reader tolerates a
    truncated final line, so an abrupt stop loses at most the unflushed rows.
    """

    def __init__(self, path: str | Path, columns: list[str], flush_every: int = 1):
        self.path = Path(path)
        self.columns = list(columns)
        self.flush_every = max(1, flush_every)
        self._pending = 0
        exists = self.path.exists() and self.path.stat().st_size > 0
        if exists:
            with open(self.path, newline="") as fh:
                header = next(csv.reader(fh), None)
            if header != self.columns:
                raise ValueError(f"{self.path}: existing header {header} does not match schema {self.columns}")
        self._fh = open(self.path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.columns, extrasaction="raise")
        if not exists:
            self._writer.writeheader()
            self._fh.flush()

    def write(self, row: dict) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"row missing columns {sorted(missing)}")
        self._writer.writerow(row)
        self._pending += 1
        if self._pending >= self.flush_every:
            self.flush()

    def flush(self) -> None:
        self._fh.flush()
        self._pending = 0

    def close(self) -> None:
        if not self._fh.closed:
            self.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path: str | Path) -> list[dict]:
    """Parse a metrics CSV, dropping a trailing partial row if present."""
    text = Path(path).read_text()
    if not text:
        return []
    complete = text if text.endswith("\n") else text[: text.rfind("\n") + 1]
    rows = list(csv.DictReader(io.StringIO(complete)))
    return rows


ROUTING_COLUMNS = ["method", "layer", "token", "selected", "weights", "entropy"]


def write_routing_records(path: str | Path, method: str, records) -> None:
    """Write per-token routing rows ``(layer, selected, weights)`` for one method."""
    import numpy as np

    with MetricsSink(path, ROUTING_COLUMNS, flush_every=1000) as sink:
        counters: dict[int, int] = {}
        for layer, selected, weights in records:
            tok = counters.get(layer, 0)
            counters[layer] = tok + 1
            w = np.asarray(weights, dtype=float)
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = float(np.where(w > 0, -w * np.log(w), 0.0).sum())
            sink.write({"method": method, "layer": layer, "token": tok,
                        "selected": " ".join(str(int(i)) for i in selected),
                        "weights": " ".join(f"{x:.6g}" for x in w), "entropy": f"{ent:.6f}"})
