"""Checkpoint and epoch-budget selection from validation-task curves.

The turning point is the global argmax of the per-epoch validation Dice
(earliest epoch on ties); across budgets the best selected Dice wins, with
ties going to the smaller budget.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_BUDGETS = (100, 50, 20, 10, 5)


@dataclass(frozen=True)
class MetricCurve:
    budget: int
    epochs: tuple[int, ...]
    dice: tuple[float, ...]
    loss: tuple[float, ...] | None = None

    def __post_init__(self):
        epochs = tuple(int(e) for e in self.epochs)
        dice = tuple(float(d) for d in self.dice)
        if len(epochs) != len(dice):
            raise ValueError("epochs and dice must have equal length")
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("epochs must be strictly increasing")
        if epochs and not (1 <= epochs[0] and epochs[-1] <= self.budget):
            raise ValueError(f"epochs must lie in [1, {self.budget}]")
        if not all(0.0 <= d <= 1.0 for d in dice):
            raise ValueError("dice values must lie in [0, 1]")
        object.__setattr__(self, "epochs", epochs)
        object.__setattr__(self, "dice", dice)
        if self.loss is not None:
            loss = tuple(float(x) for x in self.loss)
            if len(loss) != len(epochs):
                raise ValueError("loss must align with epochs")
            object.__setattr__(self, "loss", loss)

    def to_dict(self) -> dict:
        return {
            "budget": self.budget,
            "epochs": list(self.epochs),
            "dice": list(self.dice),
            "loss": None if self.loss is None else list(self.loss),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricCurve":
        return cls(int(d["budget"]), d["epochs"], d["dice"], d.get("loss"))


@dataclass(frozen=True)
class SelectionResult:
    budget: int
    epoch: int
    dice: float
    curves: tuple[MetricCurve, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "budget": self.budget,
            "epoch": self.epoch,
            "dice": self.dice,
            "curves": [c.to_dict() for c in self.curves],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionResult":
        if d.get("schema_version") != 1:
            raise ValueError(f"unsupported selection schema {d.get('schema_version')!r}")
        return cls(d["budget"], d["epoch"], d["dice"], tuple(MetricCurve.from_dict(c) for c in d["curves"]))


def moving_average(values: Sequence[float], window: int = 3) -> np.ndarray:
    """Centred moving average; the window shrinks at the ends."""
    v = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([v[max(0, i - half) : i + half + 1].mean() for i in range(v.size)])


def select_epoch(curve: MetricCurve, smooth: int | None = None) -> tuple[int, float]:
    if not curve.epochs:
        raise ValueError("cannot select from an empty curve")
    score = moving_average(curve.dice, smooth) if smooth else np.asarray(curve.dice)
    k = int(np.argmax(score))  # first maximum
    return curve.epochs[k], curve.dice[k]


def select_budget(
    curves: Iterable[MetricCurve],
    candidates: Sequence[int] = DEFAULT_BUDGETS,
    smooth: int | None = None,
) -> SelectionResult:
    curves = tuple(curves)
    if not curves:
        raise ValueError("no curves to select from")
    budgets = [c.budget for c in curves]
    if len(set(budgets)) != len(budgets):
        raise ValueError(f"duplicate budgets {budgets}")
    unknown = set(budgets) - set(candidates)
    if unknown:
        raise ValueError(f"budgets {sorted(unknown)} not among candidates {list(candidates)}")
    best = None
    for curve in sorted(curves, key=lambda c: c.budget):
        epoch, d = select_epoch(curve, smooth)
        score = float(np.max(moving_average(curve.dice, smooth))) if smooth else d
        if best is None or score > best[0]:
            best = (score, curve.budget, epoch, d)
    _, budget, epoch, d = best
    return SelectionResult(budget, epoch, d, curves)


def curves_to_csv(curves: Iterable[MetricCurve]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["budget", "epoch", "val_dice", "train_loss"])
    for c in curves:
        for k, (e, d) in enumerate(zip(c.epochs, c.dice)):
            w.writerow([c.budget, e, repr(d), "" if c.loss is None else repr(c.loss[k])])
    return buf.getvalue()


def load_curves(paths) -> list[MetricCurve]:
    curves = []
    for p in paths:
        d = json.loads(Path(p).read_text())
        if d.get("schema_version", 1) != 1:
            raise ValueError(f"{p}: unsupported curve schema {d.get('schema_version')!r}")
        curves.append(MetricCurve.from_dict(d))
    return curves
