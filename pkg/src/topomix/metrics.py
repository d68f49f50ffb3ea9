"""Per-episode training metrics and their CSV form."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

from .domain import N_ACTIONS

COLUMNS = (["episode", "epsilon", "reward", "accuracy", "tokens_used", "td_loss"]
           + [f"count_{a}" for a in range(N_ACTIONS)] + ["mean_density"])


@dataclass
class MetricsRecord:
    episode: int
    epsilon: float
    reward: float
    accuracy: float
    tokens_used: float
    td_loss: float          # nan until the buffer can fill a batch
    action_counts: tuple    # selections per action code, sums to N*T
    mean_density: float

    def row(self) -> list:
        return ([str(self.episode), repr(self.epsilon), repr(self.reward), repr(self.accuracy),
                 repr(self.tokens_used), repr(self.td_loss)]
                + [str(c) for c in self.action_counts] + [repr(self.mean_density)])

    @classmethod
    def from_row(cls, row) -> "MetricsRecord":
        if len(row) != len(COLUMNS):
            raise ValueError(f"metrics row has {len(row)} fields, expected {len(COLUMNS)}")
        return cls(int(row[0]), float(row[1]), float(row[2]), float(row[3]), float(row[4]),
                   float(row[5]), tuple(int(c) for c in row[6:6 + N_ACTIONS]),
                   float(row[6 + N_ACTIONS]))

    def __eq__(self, other):
        if not isinstance(other, MetricsRecord):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, float) and math.isnan(a) and math.isnan(b):
                continue
            if a != b:
                return False
        return True


class MetricsWriter:
    """Append-only CSV log; flushed after every record."""

    def __init__(self, path, append=False):
        self._fh = open(path, "a" if append else "w", newline="")
        self._w = csv.writer(self._fh)
        if not append:
            self._w.writerow(COLUMNS)
            self._fh.flush()

    def write(self, rec: MetricsRecord):
        self._w.writerow(rec.row())
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != COLUMNS:
        raise ValueError(f"{path}: missing or unexpected metrics header")
    return [MetricsRecord.from_row(r) for r in rows[1:]]
