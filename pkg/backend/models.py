import math
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SynthKind = Literal["stripe", "dotted_line", "brightness", "spatter_noise", "cartoon2d"]
DetectorKind = Literal["kde", "autoencoder", "deep", "bag"]


class SynthSpec(BaseModel):
    """Recipe for a synthetic anomaly class; generation is a pure function of it"""
    kind: SynthKind
    image_size: Tuple[int, int] = (16, 16)  # (H, W); cartoon2d always uses (1, 2)
    n_train: int = Field(default=200, ge=1)
    n_val: int = Field(default=50, ge=1)
    n_val_outliers: int = Field(default=10, ge=0)  # Outliers for deep-model tuning
    n_test: int = Field(default=100, ge=2)         # Half inliers, half outliers
    stripe_width: int = Field(default=2, ge=1)
    dot_count: int = Field(default=8, ge=1)
    brightness_offset: float = Field(default=0.2, gt=0.0, le=1.0)
    noise_probability: float = Field(default=0.05, gt=0.0, le=1.0)
    cartoon_mean: Tuple[float, float] = (0.6, 0.6)
    cartoon_std: float = Field(default=0.1, gt=0.0)
    cartoon_shift: float = -0.4  # Outlier displacement along one known axis
    seed: int = Field(ge=0, lt=2**64)

    @model_validator(mode="before")
    @classmethod
    def _cartoon_size(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("kind") == "cartoon2d" and "image_size" not in data:
            data = {**data, "image_size": (1, 2)}
        return data

    @model_validator(mode="after")
    def _check_shape(self) -> "SynthSpec":
        height, width = self.image_size
        if height < 1 or width < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.kind == "cartoon2d" and self.image_size != (1, 2):
            raise ValueError("cartoon2d samples are 1x2 images")
        if self.kind == "stripe" and self.stripe_width > height:
            raise ValueError(f"stripe_width {self.stripe_width} exceeds image height {height}")
        return self


class ManifestEntry(BaseModel):
    """One sample reference inside a manifest; paths are relative to the manifest"""
    image: str
    label: Literal[0, 1]
    mask: Optional[str] = None


class DatasetManifest(BaseModel):
    """On-disk description of one anomaly class"""
    model_config = ConfigDict(populate_by_name=True)

    class_name: str = Field(alias="class")
    train: List[ManifestEntry]
    val: List[ManifestEntry] = []
    val_outliers: List[ManifestEntry] = []
    test: List[ManifestEntry]


class LrpConfig(BaseModel):
    """Parameters of the backward relevance pass"""
    gamma: float = Field(default=0.25, ge=0.0)       # Gamma rule, distinct from kernel stiffness
    epsilon: float = Field(default=1e-9, gt=0.0)     # Denominator stabilizer


class Standardizer(BaseModel):
    """Mean and population standard deviation of a member's training scores"""
    mean: float
    std: float = Field(gt=0.0)


class BagMember(BaseModel):
    """A bag member: its model directory (relative to the bag) and standardizer"""
    path: str
    standardizer: Standardizer


class DetectorEnvelope(BaseModel):
    """JSON envelope stored next to a detector's HLW1 weight file"""
    model_config = ConfigDict(populate_by_name=True)

    kind: DetectorKind
    class_name: str = Field(alias="class")
    input_shape: List[int]
    weights: Optional[str] = "model.hlw"
    gamma: Optional[float] = None                       # KDE stiffness
    lam: Optional[float] = Field(default=None, alias="lambda")  # Whitening ridge
    backbone_layers: Optional[int] = None               # Deep: leading layers forming the backbone
    standardizer: Optional[Standardizer] = None
    members: List[BagMember] = []
    training: Dict[str, Any] = {}


class ClassRecord(BaseModel):
    """Per-class evaluation outcome; accuracies on the [0, 1] scale"""
    model_config = ConfigDict(populate_by_name=True)

    class_name: str = Field(alias="class")
    detector: str = Field(default="", exclude=True)
    detection_accuracy: float = Field(alias="roc", ge=0.0, le=1.0)
    explanation_accuracy: Optional[float] = Field(default=None, alias="expl", ge=0.0, le=1.0)
    clever_hans_score: Optional[float] = Field(default=None, alias="ch", ge=-1.0, le=1.0)
    n_test: int
    n_explained: int

    @model_validator(mode="after")
    def _check_difference(self) -> "ClassRecord":
        values = [self.detection_accuracy, self.explanation_accuracy, self.clever_hans_score]
        if any(v is not None and not math.isfinite(v) for v in values):
            raise ValueError(f"non-finite field in record for class {self.class_name}")
        if (self.explanation_accuracy is None) != (self.clever_hans_score is None):
            raise ValueError("explanation accuracy and Clever Hans score are absent together")
        if self.clever_hans_score is not None:
            expected = self.detection_accuracy - self.explanation_accuracy
            if self.clever_hans_score != expected:
                raise ValueError("clever_hans_score must equal detection minus explanation accuracy")
        return self


def _pct(value: Optional[float]) -> str:
    return "-" if value is None else f"{100.0 * value:.1f}"


class EvaluationReport(BaseModel):
    """Evaluation of one detector kind over one or more classes"""
    detector: str
    classes: List[ClassRecord] = []

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)

    def format_table(self) -> str:
        """Aligned plain-text table on the percentage scale"""
        width = max([len("class")] + [len(r.class_name) for r in self.classes])
        lines = [
            f"detector: {self.detector}",
            f"{'class':>{width}}  {'ROC':>6}  {'expl':>6}  {'CH':>6}  {'n_test':>6}  {'n_expl':>6}",
        ]
        for record in self.classes:
            lines.append(
                f"{record.class_name:>{width}}  {_pct(record.detection_accuracy):>6}  "
                f"{_pct(record.explanation_accuracy):>6}  {_pct(record.clever_hans_score):>6}  "
                f"{record.n_test:>6}  {record.n_explained:>6}"
            )
        return "\n".join(lines) + "\n"


def format_ranking(detector: str, top: List[ClassRecord]) -> str:
    """One line naming the top classes by Clever Hans score"""
    ranked = ", ".join(f"{r.class_name} ({_pct(r.clever_hans_score)})" for r in top)
    return f"top-{len(top)} Clever Hans ({detector}): {ranked or '-'}\n"


class ComparisonRow(BaseModel):
    """One class evaluated by several detectors; None where a detector skipped the class"""
    model_config = ConfigDict(populate_by_name=True)

    class_name: str = Field(alias="class")
    results: Dict[str, Optional[ClassRecord]]


class DetectorComparison(BaseModel):
    """Per-class results of several detectors side by side, with each detector's top-k classes"""
    detectors: List[str]
    rows: List[ComparisonRow]
    top: Dict[str, List[str]]

    def to_json(self) -> str:
        return self.model_dump_json(by_alias=True, indent=2)

    def format_table(self) -> str:
        width = max([len("class")] + [len(r.class_name) for r in self.rows])
        groups = "".join(f"  {name:^20}" for name in self.detectors)
        columns = "".join(f"  {'ROC':>6} {'expl':>6} {'CH':>6}" for _ in self.detectors)
        lines = [f"{'':>{width}}{groups}", f"{'class':>{width}}{columns}"]
        for row in self.rows:
            cells = ""
            for name in self.detectors:
                record = row.results.get(name)
                if record is None:
                    cells += f"  {'-':>6} {'-':>6} {'-':>6}"
                else:
                    cells += (f"  {_pct(record.detection_accuracy):>6} {_pct(record.explanation_accuracy):>6}"
                              f" {_pct(record.clever_hans_score):>6}")
            lines.append(f"{row.class_name:>{width}}{cells}")
        lines.append("")
        for name in self.detectors:
            lines.append(f"top Clever Hans ({name}): {', '.join(self.top[name]) or '-'}")
        return "\n".join(lines) + "\n"


class RunConfig(BaseModel):
    """Everything that determines a CLI run; persisted in run.json"""
    command: str
    out: str
    seed: int = Field(ge=0)
    data: Optional[str] = None
    model: Optional[str] = None
    gamma_grid: Optional[List[float]] = None
    lambda_grid: Optional[List[float]] = None
    lrp_gamma: Optional[float] = None
    epochs: Optional[int] = Field(default=None, ge=0)
    datasets: List[str] = []  # evaluate: one dataset per model, paired by position
    models: List[str] = []
    top_k: Optional[int] = Field(default=None, ge=1)
    force: bool = False
    options: Dict[str, Any] = {}

    @field_validator("gamma_grid", "lambda_grid")
    @classmethod
    def _nonempty_grid(cls, grid: Optional[List[float]]) -> Optional[List[float]]:
        if grid is not None and not grid:
            raise ValueError("grid must not be empty")
        return grid

    @model_validator(mode="after")
    def _paired_inputs(self) -> "RunConfig":
        if len(self.datasets) != len(self.models):
            raise ValueError(f"{len(self.datasets)} datasets for {len(self.models)} models")
        return self


class RunMetadata(BaseModel):
    """Contents of run.json"""
    config: RunConfig
    seed: int
    version: str
    artifacts: List[str] = []
