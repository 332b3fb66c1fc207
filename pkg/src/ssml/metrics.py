"""Run metrics: per-outer-step training records and evaluation records.

The CSV schema is fixed: ``phase,step,episodes,loss,accuracy,ci95,seed,
temperature,init`` — exactly these columns, in this order. Numeric fields
use 6 significant digits with dot decimals; accuracies are fractions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

CSV_COLUMNS = ["phase", "step", "episodes", "loss", "accuracy", "ci95", "seed", "temperature", "init"]


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    accuracy: float


@dataclass(frozen=True)
class EvalRecord:
    step: int            # outer step at which the evaluation ran
    episodes: int
    accuracy: float
    ci95: float          # normal-approximation 95% half-width


@dataclass
class RunMetrics:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def add_step(self, step: int, loss: float, accuracy: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        self.steps.append(StepRecord(step, loss, accuracy))

    def add_eval(self, step: int, episodes: int, accuracy: float, ci95: float) -> None:
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy {accuracy} outside [0, 1]")
        if ci95 < 0.0:
            raise ValueError(f"ci95 {ci95} negative")
        self.evals.append(EvalRecord(step, episodes, accuracy, ci95))

    @property
    def final_eval(self) -> EvalRecord | None:
        return self.evals[-1] if self.evals else None


def fmt(x: float | int | None) -> str:
    """6-significant-digit, locale-independent numeric formatting."""
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    return format(float(x), ".6g")


class MetricsWriter:
    """Append-only CSV emitter; writes the header exactly once per file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._started = self.path.exists() and self.path.stat().st_size > 0

    def write_row(self, phase: str, step: int, episodes: int | None, loss: float | None,
                  accuracy: float | None, ci95: float | None, seed: int,
                  temperature: float | None, init: str) -> None:
        new_header = not self._started
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new_header:
                w.writerow(CSV_COLUMNS)
                self._started = True
            w.writerow([
                phase, step,
                "" if episodes is None else episodes,
                fmt(loss), fmt(accuracy), fmt(ci95),
                seed, fmt(temperature), init,
            ])

    def write_run(self, phase: str, metrics: RunMetrics, seed: int,
                  temperature: float | None, init: str) -> None:
        """Step rows interleaved with the evaluation rows taken at each step."""
        evals = list(metrics.evals)
        for r in metrics.steps:
            self.write_row(phase, r.step, None, r.loss, r.accuracy, None, seed, temperature, init)
            while evals and evals[0].step == r.step + 1:
                e = evals.pop(0)
                self.write_row("eval", e.step, e.episodes, None, e.accuracy, e.ci95, seed, temperature, init)
        for e in evals:
            self.write_row("eval", e.step, e.episodes, None, e.accuracy, e.ci95, seed, temperature, init)
