import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from pydantic import ValidationError
from scipy.stats import rankdata

from config import config
from errors import DatasetError, ShapeError
from models import (
    ClassRecord,
    ComparisonRow,
    DetectorComparison,
    EvaluationReport,
    LrpConfig,
    format_ranking,
)
from relevance import Heatmap, explain

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def map_samples(fn: Callable[[T], R], items: Sequence[T], threads: Optional[int] = None) -> List[R]:
    """Apply fn to every item, in order, on up to `threads` worker threads"""
    threads = threads or config.THREADS
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(fn, items))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic.

    Counts (outlier, inlier) pairs where the outlier scores higher, ties
    counting one half, divided by the number of pairs.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    positive = labels == 1
    n_pos = int(positive.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DatasetError("ROC needs both inliers and outliers")
    ranks = rankdata(scores, method="average")
    u = float(np.sum(ranks[positive])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def explanation_accuracy(heatmap: Union[Heatmap, np.ndarray], mask: np.ndarray) -> float:
    """Cosine similarity between the rectified heatmap and a binary mask"""
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    mask = np.asarray(mask, dtype=np.float64)
    if values.shape != mask.shape:
        raise ShapeError(f"heatmap shape {values.shape} does not match mask shape {mask.shape}")
    if not mask.any():
        raise DatasetError("explanation accuracy needs a nonempty mask")
    rectified = np.maximum(values.astype(np.float64), 0.0).reshape(-1)
    mask = mask.reshape(-1)
    heat_norm = np.dot(rectified, rectified)
    if heat_norm == 0.0:
        return 0.0
    cosine = np.dot(rectified, mask) / np.sqrt(heat_norm * np.dot(mask, mask))
    return float(np.clip(cosine, 0.0, 1.0))


def clever_hans_score(detection_accuracy: float, explanation_accuracy: float) -> float:
    """Detection accuracy minus explanation accuracy"""
    for name, value in (("detection", detection_accuracy), ("explanation", explanation_accuracy)):
        if not (np.isfinite(value) and 0.0 <= value <= 1.0):
            raise ValueError(f"{name} accuracy must lie in [0, 1], got {value}")
    return detection_accuracy - explanation_accuracy


def evaluate_class(detector, dataset, explainer: Callable[..., Heatmap] = explain,
                   lrp: Optional[LrpConfig] = None, threads: Optional[int] = None) -> ClassRecord:
    """
    Detection and explanation accuracy of one detector on one class.

    Args:
        detector: Detector fitted on the class's train split
        dataset: ClassDataset with a labelled test split
        explainer: Function (detector, x, lrp, sample_id) -> Heatmap
        lrp: Relevance rule parameters
        threads: Worker threads for per-sample work

    Returns:
        ClassRecord; explanation fields are absent when no test outlier has a mask
    """
    test = list(dataset.test)
    scores = map_samples(lambda s: detector.score(s.image), test, threads)
    detection = roc_auc(scores, [s.label for s in test])

    masked = [s for s in test if s.label == 1 and s.mask is not None and s.mask.any()]
    explanation = None
    hans = None
    if masked:
        heatmaps = map_samples(lambda s: explainer(detector, s.image, lrp, s.sample_id), masked, threads)
        accuracies = np.array([explanation_accuracy(h, s.mask) for h, s in zip(heatmaps, masked)])
        explanation = float(np.mean(accuracies))
        hans = clever_hans_score(detection, explanation)
    else:
        logger.warning("Class %s has no masked test outliers; explanation accuracy is undefined",
                       dataset.class_name)

    record = ClassRecord(
        class_name=dataset.class_name, detector=detector.kind,
        detection_accuracy=detection, explanation_accuracy=explanation,
        clever_hans_score=hans, n_test=len(test), n_explained=len(masked),
    )
    logger.info("Class %s (%s): ROC %.4f expl %s CH %s", record.class_name, detector.kind, detection,
                "-" if explanation is None else f"{explanation:.4f}",
                "-" if hans is None else f"{hans:.4f}")
    return record


def evaluate_detector(pairs: Sequence[Tuple[object, object]], explainer: Callable[..., Heatmap] = explain,
                      lrp: Optional[LrpConfig] = None, threads: Optional[int] = None) -> EvaluationReport:
    """Evaluate (detector, dataset) pairs of one detector kind"""
    if not pairs:
        raise ValueError("nothing to evaluate")
    kinds = {detector.kind for detector, _ in pairs}
    if len(kinds) != 1:
        raise ValueError(f"one detector kind per report, got {sorted(kinds)}")
    records = [evaluate_class(d, ds, explainer, lrp, threads) for d, ds in pairs]
    return EvaluationReport(detector=kinds.pop(), classes=records)


def rank_classes(records: Sequence[ClassRecord], k: int) -> List[ClassRecord]:
    """Top-k records by Clever Hans score, ties broken by class name"""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    scored = [r for r in records if r.clever_hans_score is not None]
    return sorted(scored, key=lambda r: (-r.clever_hans_score, r.class_name))[:k]


def write_report(report: EvaluationReport, directory: Union[str, Path],
                 top: Optional[Sequence[ClassRecord]] = None) -> List[Path]:
    """Write report.json and the aligned report.txt table, followed by the ranking when given"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "report.json"
    text_path = directory / "report.txt"
    json_path.write_text(report.to_json())
    text = report.format_table()
    if top is not None:
        text += "\n" + format_ranking(report.detector, list(top))
    text_path.write_text(text)
    return [json_path, text_path]


def load_report(path: Union[str, Path]) -> EvaluationReport:
    """Read a report.json, or the one inside an evaluate output directory"""
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise DatasetError(f"no evaluation report at {path}")
    try:
        return EvaluationReport.model_validate_json(path.read_text())
    except ValidationError as e:
        raise DatasetError(f"{path}: {e}") from e


def compare_reports(reports: Sequence[EvaluationReport], k: int) -> DetectorComparison:
    """Line up several detectors' reports class by class and rank each detector's classes"""
    if not reports:
        raise ValueError("nothing to compare")
    detectors = [report.detector for report in reports]
    if len(set(detectors)) != len(detectors):
        raise ValueError(f"each detector may appear once, got {detectors}")
    by_detector = {r.detector: {c.class_name: c for c in r.classes} for r in reports}
    names = sorted({c.class_name for r in reports for c in r.classes})
    rows = [
        ComparisonRow(class_name=name, results={d: by_detector[d].get(name) for d in detectors})
        for name in names
    ]
    top = {r.detector: [c.class_name for c in rank_classes(r.classes, k)] for r in reports}
    return DetectorComparison(detectors=detectors, rows=rows, top=top)


def write_comparison(comparison: DetectorComparison, directory: Union[str, Path]) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / "comparison.json"
    text_path = directory / "comparison.txt"
    json_path.write_text(comparison.to_json())
    text_path.write_text(comparison.format_table())
    return [json_path, text_path]
