"""Fuse the base-form and supplement-form judgments; calibrate the two thresholds.

The base judgment stands unless it is INCONCLUSIVE, or it is unsure (confidence below
``delta1``) while the supplement is very sure (confidence above ``delta2``).

Calibration scans quantile pairs ``q1 <= q2`` on a 0.05 grid, maps them to thresholds
through the base and supplement confidence distributions and keeps the pair with the
best average of TPR and TNR on a labelled validation set.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptySamplesError, InsufficientSamplesError
from .prompt_library import FORMS
from .verdict import CORRECT, INCONCLUSIVE, INCORRECT, Judgment

logger = logging.getLogger(__name__)

GRID_STEP = 0.05
GRID = tuple(round(i * GRID_STEP, 2) for i in range(1, 20))

_SEVERITY = {CORRECT: _kernels.SEV_CORRECT, INCONCLUSIVE: _kernels.SEV_INCONCLUSIVE,
             INCORRECT: _kernels.SEV_INCORRECT}


@dataclass(frozen=True)
class Thresholds:
    delta1: float
    delta2: float
    base_form: str = "unstructured"
    q1: float | None = None
    q2: float | None = None

    def __post_init__(self):
        if self.base_form not in FORMS:
            raise ValueError(f"unknown base form {self.base_form!r}")
        if not (0.0 <= self.delta1 <= 1.0 and 0.0 <= self.delta2 <= 1.0):
            raise ValueError("thresholds must lie in [0, 1]")
        if self.q1 is not None and self.q2 is not None and self.q2 < self.q1:
            raise ValueError("q2 must be >= q1")

    @property
    def supplement_form(self) -> str:
        return FORMS[1 - FORMS.index(self.base_form)]

    def to_dict(self) -> dict:
        return {"base_form": self.base_form, "delta1": self.delta1, "delta2": self.delta2,
                "q1": self.q1, "q2": self.q2}

    @classmethod
    def from_dict(cls, d: dict) -> Thresholds:
        return cls(float(d["delta1"]), float(d["delta2"]), d.get("base_form", "unstructured"),
                   d.get("q1"), d.get("q2"))


def aggregate(base: Judgment, supplement: Judgment, t: Thresholds) -> Judgment:
    if base.form != t.base_form:
        raise ValueError(f"base judgment form {base.form!r} != configured base form {t.base_form!r}")
    if base.label == INCONCLUSIVE:
        return supplement
    if base.confidence < t.delta1 and supplement.confidence > t.delta2:
        return supplement
    return base


def quantile(samples: Sequence[float], q: float) -> float:
    if len(samples) == 0:
        raise EmptySamplesError("quantile of an empty sample")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    s = np.sort(np.asarray(samples, dtype=np.float64))
    return float(_kernels.linear_quantiles(s, np.array([q]))[0])


@dataclass(frozen=True)
class CalibrationSample:
    item_id: str
    base: Judgment
    supplement: Judgment
    gold: str

    def __post_init__(self):
        if self.gold not in ("hallucinated", "faithful"):
            raise ValueError(f"gold must be hallucinated or faithful, got {self.gold!r}")
        if self.base.form == self.supplement.form:
            raise ValueError("base and supplement judgments must come from different forms")


@dataclass(frozen=True)
class CalibrationResult:
    thresholds: Thresholds
    validation_avg_acc: float
    grid: tuple[tuple[float, float, float], ...] = field(default=())

    def to_dict(self) -> dict:
        d = self.thresholds.to_dict()
        d["validation_avg_acc"] = self.validation_avg_acc
        d["grid"] = [{"q1": a, "q2": b, "avg_acc": c} for a, b, c in self.grid]
        return d


def _group(samples: Sequence[CalibrationSample], task: str):
    """Order samples into contiguous groups: one per sample for QA, one per item for summaries."""
    if task == "summary":
        order: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            order.setdefault(s.item_id, []).append(i)
        groups = list(order.values())
    else:
        groups = [[i] for i in range(len(samples))]
    idx, starts, gold = [], [0], []
    for g in groups:
        golds = {samples[i].gold for i in g}
        if len(golds) != 1:
            raise ValueError(f"item {samples[g[0]].item_id!r} has mixed gold labels")
        idx.extend(g)
        starts.append(len(idx))
        gold.append(1 if golds.pop() == "hallucinated" else 0)
    return idx, np.array(starts, dtype=np.int64), np.array(gold, dtype=np.int64)


def calibrate(samples: Sequence[CalibrationSample], task: str = "qa") -> CalibrationResult:
    """Exhaustive search over the 190 quantile pairs; ties keep the smaller q1, then q2.

    Summaries are scored per item: a segment-level sample set is grouped by ``item_id``
    and an item counts as flagged when any aggregated segment is not CORRECT.
    """
    if not samples:
        raise InsufficientSamplesError("calibration needs samples")
    base_forms = {s.base.form for s in samples}
    if len(base_forms) != 1:
        raise ValueError("all samples must share one base form")
    base_form = base_forms.pop()
    idx, starts, gold = _group(samples, task)
    n_pos = int(gold.sum())
    n_neg = int(len(gold) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise InsufficientSamplesError("calibration needs both hallucinated and faithful items")
    ordered = [samples[i] for i in idx]
    base_sev = np.array([_SEVERITY[s.base.label] for s in ordered])
    supp_sev = np.array([_SEVERITY[s.supplement.label] for s in ordered])
    base_conf = np.array([s.base.confidence for s in ordered], dtype=np.float64)
    supp_conf = np.array([s.supplement.confidence for s in ordered], dtype=np.float64)

    qs = np.array(GRID)
    d1_all = _kernels.linear_quantiles(np.sort(base_conf), qs)
    d2_all = _kernels.linear_quantiles(np.sort(supp_conf), qs)
    cells = [(i, j) for i in range(len(GRID)) for j in range(i, len(GRID))]
    d1 = np.array([d1_all[i] for i, _ in cells])
    d2 = np.array([d2_all[j] for _, j in cells])
    tp, tn = _kernels.grid_counts(base_sev, base_conf, supp_sev, supp_conf, starts, gold,
                                  task == "summary", d1, d2)

    # compare tp/n_pos + tn/n_neg exactly via a common denominator
    score = tp * n_neg + tn * n_pos
    best = int(np.argmax(score))  # first maximum = smallest (q1, q2) in cell order
    grid = tuple(
        (GRID[i], GRID[j], float(100.0 * (tp[c] / n_pos + tn[c] / n_neg) / 2))
        for c, (i, j) in enumerate(cells)
    )
    bi, bj = cells[best]
    thresholds = Thresholds(float(d1[best]), float(d2[best]), base_form, GRID[bi], GRID[bj])
    logger.info("calibrated q1=%.2f q2=%.2f delta1=%.6f delta2=%.6f avg_acc=%.2f",
                GRID[bi], GRID[bj], d1[best], d2[best], grid[best][2])
    return CalibrationResult(thresholds, grid[best][2], grid)
