"""Two-phase hallucination detection for question answering and summarization.

Phase one asks whether an answer names the specific thing the question asks for.
Phase two fact-checks it with step-wise sub-queries, retrieved knowledge in two forms
(prose and triplets) and a confidence-gated fusion of the two judgments.
"""

from __future__ import annotations

from .aggregator import CalibrationResult, CalibrationSample, Thresholds, aggregate, calibrate, quantile
from .evaluator import DatasetItem, MetricsReport, build_balanced_testset, load_dataset, score
from .fabrication import ExtractionResult, check_specificity, parse_extraction
from .knowledge import NO_INFORMATION, OptimizedKnowledge, Triplet, detect_no_information, parse_triplets
from .pipeline import DetectConfig, DetectionRecord, Detector, write_outputs
from .query_engine import ReasoningStep, ReasoningTrace, SubQuery, parse_query_line, run_reasoning
from .retrieval import Chunk, DenseIndex, Passage, build_index, chunk_document, merge_formulation_results, search
from .verdict import Judgment, compose_summary_verdict, judge, parse_label, segment_summary

__version__ = "0.1.0"

__all__ = [
    "CalibrationResult", "CalibrationSample", "Chunk", "DatasetItem", "DenseIndex", "DetectConfig",
    "DetectionRecord", "Detector", "ExtractionResult", "Judgment", "MetricsReport", "NO_INFORMATION",
    "OptimizedKnowledge", "Passage", "ReasoningStep", "ReasoningTrace", "SubQuery", "Thresholds", "Triplet",
    "aggregate", "build_balanced_testset", "build_index", "calibrate", "check_specificity", "chunk_document",
    "compose_summary_verdict", "detect_no_information", "judge", "load_dataset", "merge_formulation_results",
    "parse_extraction", "parse_label", "parse_query_line", "parse_triplets", "quantile", "run_reasoning",
    "score", "search", "segment_summary", "write_outputs",
]
