"""Per-run output container and its CSV form."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import OutputError


@dataclass
class RunRecord:
    """Estimates and diagnostics of one filter run, one row per time point.

    Row 0 describes the initial ensemble.  ``innovations`` are the
    standardised innovation increments (nan at row 0).
    """

    filter_name: str
    seed: int
    times: np.ndarray
    estimates: np.ndarray
    stds: np.ndarray
    truth: np.ndarray
    ks_stat: np.ndarray
    ks_pass: np.ndarray
    beta1: np.ndarray
    innovations: np.ndarray
    ess: Optional[np.ndarray] = None
    events: dict = field(default_factory=dict)
    state_names: tuple = ()

    @property
    def dim_state(self) -> int:
        return self.estimates.shape[1]

    def columns(self) -> list:
        n = self.dim_state
        cols = (["t"] + [f"est_{k}" for k in range(1, n + 1)]
                + [f"truth_{k}" for k in range(1, n + 1)]
                + [f"std_{k}" for k in range(1, n + 1)] + ["ks_stat", "beta1_used"])
        if self.ess is not None:
            cols.append("ess")
        return cols

    def rows(self):
        for i in range(len(self.times)):
            row = [self.times[i], *self.estimates[i], *self.truth[i], *self.stds[i],
                   self.ks_stat[i], self.beta1[i]]
            if self.ess is not None:
                row.append(self.ess[i])
            yield row

    def to_csv(self, path) -> Path:
        path = Path(path)
        try:
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(self.columns())
                for row in self.rows():
                    w.writerow([repr(float(v)) for v in row])
        except OSError as exc:
            raise OutputError(f"cannot write run record {path}: {exc}") from exc
        return path

    def position_rmse(self, idx=(0, 2)) -> float:
        idx = list(idx)
        diff = self.estimates[1:, idx] - self.truth[1:, idx]
        return float(np.sqrt(np.mean(np.sum(diff ** 2, axis=1))))


def read_run_csv(path):
    """Load a run CSV as ``(columns, data)``."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
