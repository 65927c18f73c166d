"""HaluEval loading, balanced test-set construction and abstention-aware metrics.

Sampling uses :class:`random.Random` (Mersenne Twister) seeded with an integer, so a
seed selects the same pairs on every platform and Python version that keeps
``Random.sample`` stable.
"""

from __future__ import annotations

import json
import random
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

from .errors import DegenerateClassError, NotEnoughRecordsError, ParseError

REQUIRED_FIELDS = {
    "qa": ("knowledge", "question", "right_answer", "hallucinated_answer"),
    "summary": ("document", "right_summary", "hallucinated_summary"),
}
OUTCOMES = ("hallucinated", "faithful", "abstain")


@dataclass(frozen=True)
class DatasetItem:
    id: str
    task: str
    question: str
    candidate: str
    gold: str
    knowledge: str | None = None

    def __post_init__(self):
        if not self.candidate.strip():
            raise ValueError(f"item {self.id}: empty candidate")
        if self.gold not in ("hallucinated", "faithful"):
            raise ValueError(f"item {self.id}: bad gold label {self.gold!r}")

    def to_dict(self) -> dict:
        return {"id": self.id, "task": self.task, "question": self.question, "candidate": self.candidate,
                "gold": self.gold, "knowledge": self.knowledge}

    @classmethod
    def from_dict(cls, d: dict) -> DatasetItem:
        return cls(d["id"], d["task"], d.get("question", ""), d["candidate"], d["gold"], d.get("knowledge"))


def load_dataset(path: str | Path, task: str) -> list[dict]:
    if task not in REQUIRED_FIELDS:
        raise ValueError(f"unknown task {task!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError(f"{path}: expected a JSON object", lineno)
            missing = [f for f in REQUIRED_FIELDS[task] if not isinstance(rec.get(f), str) or not rec[f].strip()]
            if missing:
                raise ParseError(f"{path}: missing or empty field(s) {', '.join(missing)}", lineno)
            records.append(rec)
    return records


def build_balanced_testset(records: Sequence[dict], n_pairs: int, seed: int, task: str = "qa") -> list[DatasetItem]:
    """Sample ``n_pairs`` records; each yields a faithful item followed by a hallucinated one."""
    if n_pairs < 0:
        raise ValueError("n_pairs must be >= 0")
    if n_pairs > len(records):
        raise NotEnoughRecordsError(f"asked for {n_pairs} pairs, only {len(records)} records")
    chosen = random.Random(seed).sample(range(len(records)), n_pairs)
    items = []
    for idx in chosen:
        rec = records[idx]
        if task == "qa":
            context, right, wrong, knowledge = rec["question"], rec["right_answer"], rec["hallucinated_answer"], rec["knowledge"]
        else:
            context, right, wrong, knowledge = rec["document"], rec["right_summary"], rec["hallucinated_summary"], None
        items.append(DatasetItem(f"{task}-{idx:05d}-faithful", task, context, right, "faithful", knowledge))
        items.append(DatasetItem(f"{task}-{idx:05d}-hallucinated", task, context, wrong, "hallucinated", knowledge))
    return items


def _pct(x: Fraction) -> Decimal:
    return (Decimal(x.numerator) * 100 / Decimal(x.denominator)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    fn_wrong: int
    fn_abstain: int
    tn: int
    fp_wrong: int
    fp_abstain: int

    @property
    def n_pos(self) -> int:
        return self.tp + self.fn_wrong + self.fn_abstain

    @property
    def n_neg(self) -> int:
        return self.tn + self.fp_wrong + self.fp_abstain

    # exact rates as fractions of 1
    @property
    def tpr(self) -> Fraction:
        return Fraction(self.tp, self.n_pos)

    @property
    def tnr(self) -> Fraction:
        return Fraction(self.tn, self.n_neg)

    @property
    def arp(self) -> Fraction:
        return Fraction(self.fn_abstain, self.n_pos)

    @property
    def arn(self) -> Fraction:
        return Fraction(self.fp_abstain, self.n_neg)

    @property
    def avg_acc(self) -> Fraction:
        return (self.tpr + self.tnr) / 2

    def percentages(self) -> dict[str, str]:
        return {name: str(_pct(getattr(self, name))) for name in ("tpr", "tnr", "avg_acc", "arp", "arn")}

    def to_dict(self) -> dict:
        d = {"n_pos": self.n_pos, "n_neg": self.n_neg, "tp": self.tp, "fn_wrong": self.fn_wrong,
             "fn_abstain": self.fn_abstain, "tn": self.tn, "fp_wrong": self.fp_wrong, "fp_abstain": self.fp_abstain}
        d.update({k: float(v) for k, v in self.percentages().items()})
        return d

    def to_text(self) -> str:
        p = self.percentages()
        cols = ["TPR", "TNR", "Avg Acc"]
        vals = [p["tpr"], p["tnr"], p["avg_acc"]]
        if self.fn_abstain or self.fp_abstain:
            cols += ["ARP", "ARN"]
            vals += [p["arp"], p["arn"]]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        head = "  ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{head}\n{row}\n(n_pos={self.n_pos}, n_neg={self.n_neg})"


def score(outcomes: Iterable[tuple[str, str]]) -> MetricsReport:
    counts = dict.fromkeys(("tp", "fn_wrong", "fn_abstain", "tn", "fp_wrong", "fp_abstain"), 0)
    for gold, final in outcomes:
        if final not in OUTCOMES:
            raise ValueError(f"unknown outcome {final!r}")
        if gold == "hallucinated":
            key = {"hallucinated": "tp", "faithful": "fn_wrong", "abstain": "fn_abstain"}[final]
        elif gold == "faithful":
            key = {"faithful": "tn", "hallucinated": "fp_wrong", "abstain": "fp_abstain"}[final]
        else:
            raise ValueError(f"unknown gold label {gold!r}")
        counts[key] += 1
    report = MetricsReport(**counts)
    if report.n_pos == 0 or report.n_neg == 0:
        raise DegenerateClassError("scoring needs both hallucinated and faithful items")
    return report
