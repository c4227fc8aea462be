import csv
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from dataset_processor import ClassDataset, generate_synthetic, load_manifest, write_heatmap
from detectors import (
    AnomalyDetector,
    KdeModel,
    fit_autoencoder,
    fit_bag,
    fit_deep_one_class,
    fit_kde,
    kde_mean_approx,
    load_backbone,
    load_detector,
    mean_pairwise_distance,
    save_detector,
)
from errors import DatasetError, OutputExistsError
from evaluation import (
    compare_reports,
    evaluate_detector,
    load_report,
    map_samples,
    rank_classes,
    write_comparison,
    write_report,
)
from models import DetectorComparison, EvaluationReport, LrpConfig, RunConfig, RunMetadata, SynthSpec
from neural_network import random_backbone
from relevance import Heatmap, explain

logger = logging.getLogger(__name__)

BAG_KINDS = ("kde", "autoencoder", "deep")
DIAG_KDE_FACTORS = (1.0, 0.3, 0.1, 0.03, 0.01)


class AuditSystem:
    """Main orchestrator for one run: fitting, scoring, explaining and evaluating detectors"""

    def __init__(self, config, run: RunConfig, explainer: Optional[Callable[..., Heatmap]] = None):
        self.config = config
        self.run = run
        self.out = Path(run.out)
        self.explainer = explainer or explain
        self.lrp = LrpConfig(
            gamma=run.lrp_gamma if run.lrp_gamma is not None else config.LRP_GAMMA,
            epsilon=config.LRP_EPSILON,
        )
        self.artifacts: List[Path] = []

    # --- run bookkeeping ---------------------------------------------------

    def prepare_output(self):
        """Create the output directory, refusing to reuse a non-empty one without force"""
        if self.out.exists() and any(self.out.iterdir()) and not self.run.force:
            raise OutputExistsError(f"output directory {self.out} is not empty (use --force)")
        self.out.mkdir(parents=True, exist_ok=True)

    def _record(self, paths: Sequence[Path]):
        self.artifacts.extend(Path(p) for p in paths)

    def write_metadata(self) -> Path:
        """Write run.json listing config, seed, version and the artifacts"""
        artifacts = sorted(str(p.relative_to(self.out)) for p in self.artifacts)
        metadata = RunMetadata(config=self.run, seed=self.run.seed,
                               version=self.config.VERSION, artifacts=artifacts)
        path = self.out / "run.json"
        path.write_text(metadata.model_dump_json(indent=2))
        logger.info("Run complete: %d artifacts in %s", len(artifacts), self.out)
        return path

    def load_dataset(self) -> ClassDataset:
        if not self.run.data:
            raise DatasetError("this command needs --data")
        return load_manifest(self.run.data)

    def load_model(self) -> AnomalyDetector:
        if not self.run.model:
            raise DatasetError("this command needs --model pointing at a fitted model directory")
        return load_detector(self.run.model)

    # --- commands ----------------------------------------------------------

    def synth(self, spec: SynthSpec) -> ClassDataset:
        _, dataset = generate_synthetic(spec, self.out)
        self._record(sorted(p for p in self.out.rglob("*") if p.is_file()))
        return dataset

    def fit_detector(self, kind: str, dataset: ClassDataset, backbone_path: Optional[str] = None) -> AnomalyDetector:
        """
        Fit one detector kind on a dataset's train split.

        Args:
            kind: "kde", "autoencoder" or "deep"
            dataset: Class to fit on
            backbone_path: HLW1 feature extractor for the deep model; a seeded random one otherwise

        Returns:
            The fitted detector
        """
        shape = dataset.image_shape
        train = dataset.train_matrix()
        if kind == "kde":
            return fit_kde(train, dataset.validation_matrix(), self.run.gamma_grid, shape, dataset.class_name)
        if kind == "autoencoder":
            epochs = self.run.epochs if self.run.epochs is not None else self.config.EPOCHS
            return fit_autoencoder(
                train, dataset.validation_matrix(),
                hidden=self.config.AE_HIDDEN, bottleneck=self.config.AE_BOTTLENECK,
                epochs=epochs, batch_size=self.config.BATCH_SIZE, step=self.config.ADAM_STEP,
                seed=self.run.seed, input_shape=shape, class_name=dataset.class_name,
            )
        if kind == "deep":
            input_dim = int(np.prod(shape))
            if backbone_path:
                backbone = load_backbone(backbone_path, input_dim)
            else:
                backbone = random_backbone(input_dim, self.config.BACKBONE_WIDTHS, self.run.seed)
            validation, labels = dataset.tuning_set()
            return fit_deep_one_class(backbone, train, validation, labels, self.run.lambda_grid,
                                      shape, dataset.class_name)
        raise ValueError(f"unknown detector kind {kind!r}")

    def fit(self, kind: str, backbone_path: Optional[str] = None) -> AnomalyDetector:
        dataset = self.load_dataset()
        detector = self.fit_detector(kind, dataset, backbone_path)
        self._record(save_detector(detector, self.out))
        return detector

    def bag(self, member_dirs: Optional[Sequence[str]] = None, backbone_path: Optional[str] = None) -> AnomalyDetector:
        """Bag fitted members, or fit all three kinds first; members are standardized as stored"""
        dataset = self.load_dataset()
        if member_dirs:
            members = [load_detector(path) for path in member_dirs]
        else:
            members = []
            for index, kind in enumerate(BAG_KINDS):
                detector = self.fit_detector(kind, dataset, backbone_path)
                member_dir = self.out / f"member_{index}_{kind}"
                save_detector(detector, member_dir)
                members.append(load_detector(member_dir))
        bag = fit_bag(members, dataset.train_matrix(), dataset.class_name)
        self._record(save_detector(bag, self.out))
        return bag

    def score(self, split: str = "test") -> Path:
        """Write scores.csv (sample_id,score) for one split"""
        dataset = self.load_dataset()
        detector = self.load_model()
        samples = dataset.splits()[split]
        scores = map_samples(lambda s: detector.score(s.image), samples, self.config.THREADS)
        path = self.out / "scores.csv"
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["sample_id", "score"])
            for sample, value in zip(samples, scores):
                writer.writerow([sample.sample_id, f"{value:.17g}"])
        self._record([path])
        return path

    def explain(self, split: str = "test") -> List[Path]:
        """Write a heatmap sidecar and rendering per sample of one split"""
        dataset = self.load_dataset()
        detector = self.load_model()
        samples = dataset.splits()[split]
        heatmaps = map_samples(
            lambda s: self.explainer(detector, s.image, self.lrp, s.sample_id), samples, self.config.THREADS
        )
        directory = self.out / "heatmaps"
        directory.mkdir(parents=True, exist_ok=True)
        written: List[Path] = []
        for sample, heatmap in zip(samples, heatmaps):
            written += write_heatmap(heatmap, directory / sample.sample_id)
        self._record(written)
        return written

    @property
    def top_k(self) -> int:
        return self.run.top_k if self.run.top_k is not None else self.config.TOP_K

    def evaluation_pairs(self) -> List[Tuple[str, str]]:
        """(dataset, model) paths to evaluate; the single --data/--model pair otherwise"""
        datasets = self.run.datasets or ([self.run.data] if self.run.data else [])
        models = self.run.models or ([self.run.model] if self.run.model else [])
        if not datasets:
            raise DatasetError("this command needs --data")
        if not models:
            raise DatasetError("this command needs --model pointing at a fitted model directory")
        if len(datasets) != len(models):
            raise ValueError(f"{len(datasets)} datasets for {len(models)} models")
        return list(zip(datasets, models))

    def evaluate(self) -> EvaluationReport:
        """Evaluate one detector kind over every (dataset, model) class pair and rank the classes"""
        pairs = [(load_detector(model), load_manifest(data)) for data, model in self.evaluation_pairs()]
        report = evaluate_detector(pairs, self.explainer, self.lrp, self.config.THREADS)
        top = rank_classes(report.classes, self.top_k)
        self._record(write_report(report, self.out, top))
        return report

    def report(self, report_paths: Sequence[str]) -> DetectorComparison:
        """Compare several detectors' evaluation reports class by class"""
        comparison = compare_reports([load_report(path) for path in report_paths], self.top_k)
        self._record(write_comparison(comparison, self.out))
        return comparison

    def diag_kde(self) -> Path:
        """
        Tabulate the distance-to-the-mean residual of KDE scores over a stiffness grid.

        The grid defaults to DIAG_KDE_FACTORS divided by the mean pairwise
        training distance; residuals are taken over the test split.
        """
        dataset = self.load_dataset()
        train = dataset.train_matrix()
        if self.run.gamma_grid:
            grid = list(self.run.gamma_grid)
        else:
            spread = mean_pairwise_distance(train)
            grid = [f / spread if spread > 0 else f for f in DIAG_KDE_FACTORS]
        rows: List[Dict[str, float]] = []
        for gamma in grid:
            model = KdeModel(train, gamma, dataset.image_shape, dataset.class_name)
            residuals = np.abs([kde_mean_approx(model, s.image).residual for s in dataset.test])
            rows.append({"gamma": gamma, "mean": float(np.mean(residuals)), "max": float(np.max(residuals))})
            logger.info("gamma %.6g: mean |residual| %.6g", gamma, rows[-1]["mean"])
        path = self.out / "diag_kde.csv"
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["gamma", "mean_abs_residual", "max_abs_residual"])
            for row in rows:
                writer.writerow([f"{row['gamma']:.17g}", f"{row['mean']:.17g}", f"{row['max']:.17g}"])
        self._record([path])
        return path
