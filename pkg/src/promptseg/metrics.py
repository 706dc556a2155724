"""Voxelwise Dice / precision / recall, aggregation and paired t-tests.

Empty-mask conventions:

=================  ==================  ====  =========  ======
pred               truth               dice  precision  recall
=================  ==================  ====  =========  ======
empty              empty               1     1          1
empty              non-empty           0     0          0
non-empty          empty               0     0          0
=================  ==================  ====  =========  ======
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .volume import BinaryMask

METRICS = ("dice", "precision", "recall")


class DegenerateVarianceError(ValueError):
    """Paired differences have zero variance; t is undefined."""


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    dice: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int


def metrics_from_counts(tp: int, fp: int, fn: int, case_id: str = "") -> CaseMetrics:
    n_pred, n_true = tp + fp, tp + fn
    if n_pred == 0 and n_true == 0:
        return CaseMetrics(case_id, 1.0, 1.0, 1.0, tp, fp, fn)
    if n_pred == 0 or n_true == 0:
        return CaseMetrics(case_id, 0.0, 0.0, 0.0, tp, fp, fn)
    return CaseMetrics(
        case_id,
        2 * tp / (2 * tp + fp + fn),
        tp / n_pred,
        tp / n_true,
        tp,
        fp,
        fn,
    )


def compute_case_metrics(pred: BinaryMask, truth: BinaryMask, case_id: str = "") -> CaseMetrics:
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch: {pred.dims} vs {truth.dims}")
    p, t = pred.data, truth.data
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return metrics_from_counts(tp, fp, fn, case_id)


def dice(pred: BinaryMask, truth: BinaryMask) -> float:
    return compute_case_metrics(pred, truth).dice


# --------------------------------------------------------------------------
# t distribution


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-15) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def regularized_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to ~1e-12 for moderate a, b."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return regularized_beta(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired Student's t-test on ``a - b``; returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1D sequences of equal length")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        raise DegenerateVarianceError("differences have zero variance")
    t = float(d.mean()) / (sd / math.sqrt(n))
    return t, t_two_sided_p(t, n - 1)


# --------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class PairedTest:
    metric: str
    t: float
    p: float
    n: int


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]
    mean: dict[str, float]
    std: dict[str, float]
    tests: list[PairedTest] = field(default_factory=list)

    def summary_lines(self, label: str = "") -> list[str]:
        """Means and standard deviations in percent, as ``mean ± std``."""
        head = f"{label} " if label else ""
        lines = [f"{head}n={len(self.cases)}"]
        for m in METRICS:
            lines.append(f"{m:>9}: {100 * self.mean[m]:.2f} ± {100 * self.std[m]:.2f}")
        for t in self.tests:
            lines.append(f"{t.metric:>9}: paired t={t.t:.4f}, p={t.p:.4g} (n={t.n})")
        return lines

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["case_id", "dice", "precision", "recall", "tp", "fp", "fn"])
        for c in self.cases:
            w.writerow([c.case_id, repr(c.dice), repr(c.precision), repr(c.recall), c.tp, c.fp, c.fn])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "cases": [asdict(c) for c in self.cases],
            "mean": self.mean,
            "std": self.std,
            "tests": [asdict(t) for t in self.tests],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        if d.get("schema_version") != 1:
            raise ValueError(f"unsupported metrics schema {d.get('schema_version')!r}")
        return cls(
            [CaseMetrics(**c) for c in d["cases"]],
            dict(d["mean"]),
            dict(d["std"]),
            [PairedTest(**t) for t in d.get("tests", [])],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def values(self, metric: str) -> list[float]:
        return [getattr(c, metric) for c in self.cases]


def aggregate(cases: Sequence[CaseMetrics]) -> MetricsReport:
    cases = list(cases)
    if not cases:
        raise ValueError("cannot aggregate an empty set of cases")
    mean, std = {}, {}
    for m in METRICS:
        v = np.array([getattr(c, m) for c in cases], dtype=np.float64)
        mean[m] = float(v.mean())
        std[m] = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return MetricsReport(cases, mean, std)


def compare(report: MetricsReport, baseline: MetricsReport) -> MetricsReport:
    """Attach paired t-tests against ``baseline``, matching cases by id."""
    base = {c.case_id: c for c in baseline.cases}
    missing = [c.case_id for c in report.cases if c.case_id not in base]
    if missing:
        raise ValueError(f"baseline lacks cases {missing[:5]}")
    tests = []
    for m in METRICS:
        a = [getattr(c, m) for c in report.cases]
        b = [getattr(base[c.case_id], m) for c in report.cases]
        try:
            t, p = paired_t_test(a, b)
        except DegenerateVarianceError:
            t, p = float("nan"), float("nan")
        tests.append(PairedTest(m, t, p, len(a)))
    return MetricsReport(report.cases, report.mean, report.std, tests)
