"""Accuracy under attack, iteration sweeps, intermediate curves and the summary table."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackConfig, bim
from .data import Split
from .errors import ValidationError
from .model import Model, predict

EVAL_BATCH = 500
RANDOM_GUESS = 0.10

REPORT_COLUMNS = ("clean", "fgsm", "bim10", "bim30", "seconds_per_epoch")


@dataclass(frozen=True)
class EvalPoint:
    model_tag: str
    attack: str
    iteration: int
    correct: int
    evaluated: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.evaluated if self.evaluated else 0.0


def _chunks(split: Split, size=EVAL_BATCH):
    for start in range(0, len(split), size):
        yield split.images[start:start + size], split.labels[start:start + size]


def _correct(model, images, labels) -> int:
    return int((predict(model, images).argmax(axis=1) == labels).sum())


def accuracy(model: Model, split: Split, attack: AttackConfig | None = None, model_tag: str = "") -> EvalPoint:
    """Accuracy on ``split``, on BIM outputs when ``attack`` is given (FGSM is BIM with N=1, step=eps)."""
    correct = 0
    for images, labels in _chunks(split):
        if attack is not None:
            images, _ = bim(model, images, labels, attack)
        correct += _correct(model, images, labels)
    return EvalPoint(model_tag, attack.describe() if attack else "clean",
                     attack.iterations if attack else 0, correct, len(split))


def sweep_iterations(models: dict, split: Split, epsilon: float, n_list) -> list[EvalPoint]:
    """One point per (model, N) with the BIM config ``(epsilon, epsilon / N, N)``."""
    points = []
    for tag, model in models.items():
        for n in n_list:
            points.append(accuracy(model, split, AttackConfig.bim(epsilon, n), tag))
    return points


def intermediate_curve(model: Model, split: Split, epsilon: float, iterations: int = 10,
                       model_tag: str = "") -> list[EvalPoint]:
    """Accuracy after each of ``iterations`` BIM steps of size ``epsilon / iterations``."""
    config = AttackConfig.bim(epsilon, iterations)
    correct = np.zeros(iterations, dtype=np.int64)
    for images, labels in _chunks(split):
        _, snapshots = bim(model, images, labels, config, capture=True)
        for i, snap in enumerate(snapshots):
            correct[i] += _correct(model, snap, labels)
    desc = config.describe()
    return [EvalPoint(model_tag, desc, i + 1, int(c), len(split)) for i, c in enumerate(correct)]


class MissingCellError(ValidationError):
    def __init__(self, row, column):
        super().__init__(f"report cell ({row}, {column}) has no run or evaluation")
        self.row, self.column = row, column


@dataclass
class RunEntry:
    """What the report needs from one training run."""

    evals: dict = field(default_factory=dict)  # column -> EvalPoint
    epoch_seconds: list = field(default_factory=list)


@dataclass
class ReportTable:
    rows: dict  # model tag -> {column: value}

    def cell(self, row, column):
        return self.rows[row][column]

    def render(self) -> str:
        header = ["model", "clean", "FGSM", "BIM(10)", "BIM(30)", "s/epoch"]
        lines = []
        body = []
        for tag, cells in self.rows.items():
            body.append([tag] + [f"{100 * cells[c]:.2f}%" for c in REPORT_COLUMNS[:4]]
                        + [f"{cells['seconds_per_epoch']:.2f}"])
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda row: " | ".join(v.rjust(w) if i else v.ljust(w) for i, (v, w) in enumerate(zip(row, widths)))
        lines.append(fmt(header))
        lines.append("-+-".join("-" * w for w in widths))
        lines.extend(fmt(r) for r in body)
        return "\n".join(lines) + "\n"


def build_report(registry: dict, row_order=None) -> ReportTable:
    """Assemble clean / FGSM / BIM(10) / BIM(30) accuracy and mean seconds per epoch per run.

    ``registry`` maps a model tag to a :class:`RunEntry` whose evals are
    EvalPoints or plain accuracies (as read back from CSV). Nothing is
    recomputed.
    """
    rows = {}
    for tag in row_order or registry:
        entry = registry.get(tag)
        if entry is None:
            raise MissingCellError(tag, "*")
        cells = {}
        for column in REPORT_COLUMNS[:4]:
            point = entry.evals.get(column)
            if point is None:
                raise MissingCellError(tag, column)
            cells[column] = float(getattr(point, "accuracy", point))
        if not entry.epoch_seconds:
            raise MissingCellError(tag, "seconds_per_epoch")
        cells["seconds_per_epoch"] = float(np.mean(entry.epoch_seconds))
        rows[tag] = cells
    return ReportTable(rows)


def table1_attacks(epsilon: float) -> dict:
    """The attack for each accuracy column of the summary table (None = clean)."""
    return {
        "clean": None,
        "fgsm": AttackConfig.fgsm(epsilon),
        "bim10": AttackConfig.bim(epsilon, 10),
        "bim30": AttackConfig.bim(epsilon, 30),
    }
