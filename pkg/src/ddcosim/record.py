"""Time-stamped waveform records and their CSV serialization.

CSV layout: header row `time,<signal names>`, one row per accepted step,
full double precision (17 significant digits) so a read-back reproduces the
in-memory waveforms exactly.
"""

from __future__ import annotations

import numpy as np


class TransientRecord:
    """Column-oriented waveform store; first column is always `time`."""

    def __init__(self, signal_names):
        self.columns = ["time"] + list(signal_names)
        self.rows: list[list[float]] = []

    def append(self, time: float, values) -> None:
        row = [float(time)] + [float(v) for v in values]
        if len(row) != len(self.columns):
            raise ValueError(
                f"row has {len(row)} values, record has {len(self.columns)} columns")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        try:
            k = self.columns.index(name)
        except ValueError:
            raise KeyError(f"no signal named {name!r}; have {self.columns}")
        return np.array([r[k] for r in self.rows])

    @property
    def times(self) -> np.ndarray:
        return self.column("time")

    def as_array(self) -> np.ndarray:
        return np.array(self.rows, dtype=np.float64)

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.rows:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @staticmethod
    def read_csv(path) -> "TransientRecord":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            if header[0] != "time":
                raise ValueError("first CSV column must be `time`")
            rec = TransientRecord(header[1:])
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec.rows.append([float(tok) for tok in line.split(",")])
        return rec
