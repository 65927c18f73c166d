from __future__ import annotations

import json

import pytest

from haludetect.aggregator import (
    GRID,
    CalibrationSample,
    Thresholds,
    aggregate,
    calibrate,
    quantile,
)
from haludetect.errors import EmptySamplesError, InsufficientSamplesError
from haludetect.verdict import CORRECT, INCONCLUSIVE, INCORRECT, Judgment

T = Thresholds(0.9, 0.95, "unstructured")


def j(label, conf, form="unstructured"):
    return Judgment(label, conf, "", form)


def s(label, conf):
    return j(label, conf, "structured")


class TestAggregate:
    def test_inconclusive_base_defers(self):
        assert aggregate(j(INCONCLUSIVE, 0.99), s(CORRECT, 0.1), T).form == "structured"

    def test_unsure_base_confident_supplement(self):
        assert aggregate(j(CORRECT, 0.5), s(INCORRECT, 0.96), T).label == INCORRECT

    def test_thresholds_are_strict(self):
        assert aggregate(j(CORRECT, 0.9), s(INCORRECT, 0.99), T).label == CORRECT
        assert aggregate(j(CORRECT, 0.5), s(INCORRECT, 0.95), T).label == CORRECT

    def test_confident_base_kept(self):
        assert aggregate(j(INCORRECT, 0.95), s(CORRECT, 1.0), T).label == INCORRECT

    def test_form_mismatch(self):
        with pytest.raises(ValueError):
            aggregate(s(CORRECT, 0.5), j(CORRECT, 0.5), T)

    def test_default_thresholds_only_defer_on_inconclusive(self):
        t = Thresholds(1.0, 1.0)
        assert aggregate(j(CORRECT, 0.0), s(INCORRECT, 1.0), t).label == CORRECT
        assert aggregate(j(INCONCLUSIVE, 0.0), s(INCORRECT, 0.2), t).label == INCORRECT


class TestThresholds:
    def test_validation(self):
        with pytest.raises(ValueError):
            Thresholds(1.2, 0.5)
        with pytest.raises(ValueError):
            Thresholds(0.5, 0.5, "graph")
        with pytest.raises(ValueError):
            Thresholds(0.5, 0.5, q1=0.5, q2=0.4)

    def test_supplement_form_and_roundtrip(self):
        t = Thresholds(0.1, 0.2, "structured", 0.05, 0.1)
        assert t.supplement_form == "unstructured"
        assert Thresholds.from_dict(json.loads(json.dumps(t.to_dict()))) == t


class TestQuantile:
    def test_known_values(self):
        assert quantile([3, 1, 2], 0.5) == 2.0
        assert quantile([0, 10], 0.25) == 2.5
        assert quantile([4.0], 0.7) == 4.0
        assert quantile([1, 2, 3, 4], 0.0) == 1.0 and quantile([1, 2, 3, 4], 1.0) == 4.0

    def test_errors(self):
        with pytest.raises(EmptySamplesError):
            quantile([], 0.5)
        with pytest.raises(ValueError):
            quantile([1.0], 1.5)


def sample(i, gold, base, supp, item=None):
    return CalibrationSample(item or f"i{i}", j(*base), s(*supp), gold)


class TestCalibrate:
    def test_grid_shape(self):
        assert len(GRID) == 19 and GRID[0] == 0.05 and GRID[-1] == 0.95

    def test_errors(self):
        with pytest.raises(InsufficientSamplesError):
            calibrate([])
        with pytest.raises(InsufficientSamplesError):
            calibrate([sample(0, "faithful", (CORRECT, 0.5), (CORRECT, 0.5))])
        with pytest.raises(ValueError):
            CalibrationSample("x", j(CORRECT, 0.5), j(CORRECT, 0.5), "faithful")
        with pytest.raises(ValueError):
            CalibrationSample("x", j(CORRECT, 0.5), s(CORRECT, 0.5), "yes")

    def test_result_fields(self):
        samples = [sample(i, "hallucinated" if i % 2 else "faithful",
                          (INCORRECT if i % 2 else CORRECT, 0.5 + i / 100), (CORRECT, 0.9)) for i in range(20)]
        r = calibrate(samples)
        assert len(r.grid) == 190 and r.validation_avg_acc == 100.0
        # every cell scores 100, so the first cell is kept
        assert (r.thresholds.q1, r.thresholds.q2) == (0.05, 0.05)
        assert r.thresholds.base_form == "unstructured"
        d = r.to_dict()
        assert set(d) == {"base_form", "delta1", "delta2", "q1", "q2", "validation_avg_acc", "grid"}

    def test_summary_groups_by_item(self):
        # one hallucinated item with a single bad segment; an INCONCLUSIVE supplement counts as bad
        samples = [
            sample(0, "hallucinated", (CORRECT, 0.99), (CORRECT, 0.99), "h"),
            sample(1, "hallucinated", (INCONCLUSIVE, 0.5), (INCONCLUSIVE, 0.5), "h"),
            sample(2, "faithful", (CORRECT, 0.99), (CORRECT, 0.99), "f"),
            sample(3, "faithful", (CORRECT, 0.99), (INCORRECT, 0.2), "f"),
        ]
        r = calibrate(samples, task="summary")
        assert r.validation_avg_acc == 100.0
        with pytest.raises(ValueError):
            calibrate(samples[:1] + [sample(9, "faithful", (CORRECT, 0.9), (CORRECT, 0.9), "h")] + samples[2:],
                      task="summary")

    def test_mixed_base_forms_rejected(self):
        a = sample(0, "faithful", (CORRECT, 0.5), (CORRECT, 0.5))
        b = CalibrationSample("x", s(CORRECT, 0.5), j(CORRECT, 0.5), "hallucinated")
        with pytest.raises(ValueError):
            calibrate([a, b])
