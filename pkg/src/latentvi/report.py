"""Append-only training logs shared by every training loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field


@dataclass
class ReportRow:
    iteration: int
    objective: float
    oracle_loglik: float | None = None
    wall_ms: float = 0.0


@dataclass
class TrainReport:
    """Rows of (iteration, objective, oracle log-likelihood, wall time) plus a summary block.

    Wall time is recorded only when ``record_wall_time`` is set; otherwise the
    column is written as zero so seeded runs produce identical files.
    """

    seed: int
    record_wall_time: bool = False
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    extras: list = field(default_factory=list)

    def __post_init__(self):
        self._t0 = time.perf_counter()

    def log(self, iteration: int, objective: float, oracle_loglik: float | None = None) -> ReportRow:
        wall = (time.perf_counter() - self._t0) * 1e3 if self.record_wall_time else 0.0
        row = ReportRow(int(iteration), float(objective), None if oracle_loglik is None else float(oracle_loglik), wall)
        self.rows.append(row)
        return row

    def note(self, iteration: int, **values):
        """Side diagnostics that do not belong in the metrics columns."""
        self.extras.append({"iter": int(iteration), **values})

    @property
    def objectives(self) -> list[float]:
        return [r.objective for r in self.rows]

    @property
    def has_oracle(self) -> bool:
        return any(r.oracle_loglik is not None for r in self.rows)
