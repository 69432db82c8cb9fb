"""Step-indexed diagnostic series with per-point standard errors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class DiagnosticSeries:
    name: str
    steps: np.ndarray
    values: np.ndarray
    stderr: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.stderr is None:
            self.stderr = np.full(self.values.shape, np.nan)
        else:
            self.stderr = np.asarray(self.stderr, dtype=np.float64)
        if not (self.steps.shape == self.values.shape == self.stderr.shape):
            raise ValueError("steps, values and stderr must have matching shapes")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("n,value,stderr\n")
            for n, v, s in zip(self.steps, self.values, self.stderr):
                fh.write(f"{int(n)},{float(v)!r},{float(s)!r}\n")

    def value_at(self, step):
        idx = np.where(self.steps == step)[0]
        if idx.size == 0:
            raise ValueError(f"step {step} not present in series {self.name!r}")
        return float(self.values[idx[0]])


def from_csv(path, name=None):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return DiagnosticSeries(
        name=name or str(path),
        steps=rows[:, 0].astype(np.int64),
        values=rows[:, 1],
        stderr=rows[:, 2],
    )
