"""Anomaly detectors and their rewriting as layer stacks.

Every detector exposes `neuralize(x)`, which returns a NeuralizedModel whose
forward pass yields the outlier score. Scores are always computed through
that stack, so direct scoring and the relevance pass see the same numbers.

Detectors:
    - KdeModel: soft minimum over squared distances to the training points.
    - AutoencoderModel: squared distance between a sample and its reconstruction.
    - DeepOneClassModel: squared norm of whitened features of a frozen backbone.
    - BaggedModel: average of member scores standardized on training scores.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.special import logsumexp

from config import config
from errors import DatasetError, DegenerateScoreError, ModelFormatError, NumericalError, ShapeError
from evaluation import roc_auc
from linalg import feature_covariance, jacobi_eigh, ridge_whitening
from models import BagMember, DetectorEnvelope, Standardizer
from neural_network import (
    AveragePool,
    Layer,
    LayerStack,
    Linear,
    NegLogSumExp,
    NeuralizedModel,
    ReLU,
    SquaredDistance,
    average_pool_forward,
    load_layers,
    model_forward,
    save_layers,
    validate_backbone,
)
from random_streams import rng_for
from training import TrainingHistory, train_reconstruction

logger = logging.getLogger(__name__)

ENVELOPE_FILE = "model.json"
WEIGHTS_FILE = "model.hlw"


def _as_matrix(samples, input_dim: int, name: str) -> np.ndarray:
    """Stack samples (any per-sample shape) into an (n, input_dim) float64 matrix"""
    matrix = np.asarray(samples, dtype=np.float64)
    if matrix.size == 0:
        raise DatasetError(f"{name} split is empty")
    matrix = matrix.reshape(len(matrix), -1)
    if matrix.shape[1] != input_dim:
        raise ShapeError(f"{name} samples have {matrix.shape[1]} values, expected {input_dim}")
    return matrix


class AnomalyDetector(ABC):
    """Base class: a fitted detector that can be rewritten as a layer stack"""

    kind: str = ""

    def __init__(self, input_shape: Sequence[int], class_name: str = ""):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.class_name = class_name

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @abstractmethod
    def neuralize(self, x: Optional[np.ndarray] = None) -> NeuralizedModel:
        """Layer stack computing the score of x"""

    def score(self, x: np.ndarray) -> float:
        return model_forward(self.neuralize(x), x)[0]

    def score_batch(self, samples) -> np.ndarray:
        return np.array([self.score(x) for x in samples], dtype=np.float64)


# --- Kernel density estimation --------------------------------------------

@dataclass
class KdeApproxDiagnostics:
    """Exact soft-min score next to its distance-to-the-mean approximation"""
    mean: np.ndarray          # Inlier mean
    mean_distance: float      # Mean squared distance of x to the training points
    approx: float
    exact: float
    residual: float           # exact - approx


class KdeModel(AnomalyDetector):
    """Gaussian KDE scored as -1/gamma log sum_j exp(-gamma ||x - x_j||^2)"""

    kind = "kde"

    def __init__(self, training_points: np.ndarray, gamma: float,
                 input_shape: Optional[Sequence[int]] = None, class_name: str = ""):
        points = np.atleast_2d(np.asarray(training_points, dtype=np.float64))
        super().__init__(input_shape or points.shape[1:], class_name)
        if points.shape[0] < 1:
            raise DatasetError("KDE needs at least one training point")
        self._model = NeuralizedModel(
            [SquaredDistance(points.reshape(len(points), -1)), NegLogSumExp(gamma)],
            self.input_shape, self.kind, class_name,
        )

    @property
    def training_points(self) -> np.ndarray:
        return self._model.layers[0].templates

    @property
    def gamma(self) -> float:
        return self._model.layers[1].gamma

    def neuralize(self, x: Optional[np.ndarray] = None) -> NeuralizedModel:
        return self._model


def mean_pairwise_distance(points: np.ndarray) -> float:
    """Mean squared distance over distinct pairs; 0 for fewer than two points"""
    n = len(points)
    if n < 2:
        return 0.0
    total = n * np.sum(points ** 2) - np.sum(points.sum(axis=0) ** 2)
    return float(max(total, 0.0) / (n * (n - 1) / 2))


def default_gamma_grid(train: np.ndarray) -> List[float]:
    """gamma = 2^i / mean pairwise distance for the configured exponents"""
    spread = mean_pairwise_distance(np.asarray(train, dtype=np.float64).reshape(len(train), -1))
    scale = 1.0 / spread if spread > 0 else 1.0
    return [2.0 ** i * scale for i in config.KDE_GRID_EXPONENTS]


def kde_log_likelihood(model: KdeModel, samples) -> np.ndarray:
    """Gaussian log-density of each sample: logsumexp(-gamma d) - log N + (d/2) log(gamma/pi)"""
    samples = _as_matrix(samples, model.input_dim, "likelihood")
    templates = model.training_points
    d = np.array([np.sum((x - templates) ** 2, axis=1) for x in samples])
    n, dim = templates.shape
    return (logsumexp(-model.gamma * d, axis=1) - np.log(n)
            + 0.5 * dim * np.log(model.gamma / np.pi))


def fit_kde(train, validation, gamma_grid: Optional[Sequence[float]] = None,
            input_shape: Optional[Sequence[int]] = None, class_name: str = "") -> KdeModel:
    """
    Fit a KDE, choosing the stiffness that maximizes validation log-likelihood.

    Args:
        train: Inlier training samples
        validation: Inlier validation samples
        gamma_grid: Candidate stiffness values; scaled by the data spread if omitted
        input_shape: Per-sample shape; defaults to the flattened width
        class_name: Class the model is fitted on

    Returns:
        KdeModel with the selected stiffness (smallest value on ties)
    """
    train_array = np.asarray(train, dtype=np.float64)
    if train_array.size == 0:
        raise DatasetError("train split is empty")
    input_shape = tuple(input_shape or train_array.shape[1:])
    train_matrix = _as_matrix(train_array, int(np.prod(input_shape)), "train")
    val_matrix = _as_matrix(validation, train_matrix.shape[1], "validation")
    grid = sorted(gamma_grid) if gamma_grid is not None else default_gamma_grid(train_matrix)
    if not grid:
        raise ValueError("gamma grid must not be empty")

    best_gamma, best_value = grid[0], -np.inf
    for gamma in grid:
        candidate = KdeModel(train_matrix, gamma, input_shape, class_name)
        value = float(np.mean(kde_log_likelihood(candidate, val_matrix)))
        logger.debug("KDE gamma %.6g: validation log-likelihood %.6g", gamma, value)
        if value > best_value:
            best_gamma, best_value = gamma, value

    logger.info("Selected KDE gamma %.6g (log-likelihood %.6g) for class %s",
                best_gamma, best_value, class_name)
    return KdeModel(train_matrix, best_gamma, input_shape, class_name)


def kde_score(model: KdeModel, x: np.ndarray) -> float:
    return model.score(x)


def kde_mean_approx(model: KdeModel, x: np.ndarray) -> KdeApproxDiagnostics:
    """Compare the score with ||x - mean||^2 - log(N)/gamma + const"""
    stack = model.neuralize()
    x_flat = stack.flatten_input(x)
    points = model.training_points
    mean = points.mean(axis=0)
    n = len(points)

    exact = model.score(x)
    const = float(np.mean(np.sum(points ** 2, axis=1)) - np.sum(mean ** 2))
    dist_to_mean = float(np.sum((x_flat - mean) ** 2))
    approx = dist_to_mean - np.log(n) / model.gamma + const
    mean_distance = float(np.mean(np.sum((x_flat - points) ** 2, axis=1)))
    return KdeApproxDiagnostics(
        mean=mean, mean_distance=mean_distance, approx=float(approx),
        exact=exact, residual=float(exact - approx),
    )


# --- Autoencoder ----------------------------------------------------------

class AutoencoderModel(AnomalyDetector):
    """Reconstruction network; a sample's reconstruction becomes a constant template"""

    kind = "autoencoder"

    def __init__(self, network: LayerStack, input_shape: Optional[Sequence[int]] = None,
                 class_name: str = "", history: Optional[TrainingHistory] = None):
        super().__init__(input_shape or (network.input_dim,), class_name)
        if network.input_dim != self.input_dim or network.output_dim != self.input_dim:
            raise ShapeError(
                f"autoencoder maps {network.input_dim} -> {network.output_dim}, input has {self.input_dim}"
            )
        self.network = network
        self.history = history or TrainingHistory()

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self.network(np.asarray(x, dtype=np.float64).reshape(-1))

    def neuralize(self, x: Optional[np.ndarray] = None) -> NeuralizedModel:
        if x is None:
            raise ValueError("autoencoder neuralization depends on the sample")
        template = self.reconstruct(x)[None, :]
        return NeuralizedModel([SquaredDistance(template)], self.input_shape, self.kind, self.class_name)


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> Linear:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Linear(rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out))


def build_autoencoder(input_dim: int, hidden: int = config.AE_HIDDEN,
                      bottleneck: int = config.AE_BOTTLENECK, seed: int = 0,
                      linear: bool = False) -> LayerStack:
    """
    d -> hidden -> bottleneck -> hidden -> d with ReLU on hidden layers and a linear output.

    With linear=True the network is d -> bottleneck -> d without activations.
    """
    rng = rng_for(seed, "autoencoder")
    if linear:
        widths = [input_dim, bottleneck, input_dim]
    else:
        widths = [input_dim, hidden, bottleneck, hidden, input_dim]
    layers: List[Layer] = []
    for index, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(_init_linear(rng, fan_in, fan_out))
        if not linear and index < len(widths) - 2:
            layers.append(ReLU())
    return LayerStack(layers, input_dim)


def fit_autoencoder(train, validation=None, network: Optional[LayerStack] = None,
                    hidden: int = config.AE_HIDDEN, bottleneck: int = config.AE_BOTTLENECK,
                    epochs: int = config.EPOCHS, batch_size: int = config.BATCH_SIZE,
                    step: float = config.ADAM_STEP, seed: int = 0,
                    input_shape: Optional[Sequence[int]] = None, class_name: str = "") -> AutoencoderModel:
    """Train a reconstruction network with Adam, keeping the best validation snapshot"""
    train_array = np.asarray(train, dtype=np.float64)
    if train_array.size == 0:
        raise DatasetError("train split is empty")
    if epochs < 0:
        raise ValueError(f"epochs must be non-negative, got {epochs}")
    input_shape = tuple(input_shape or train_array.shape[1:])
    input_dim = int(np.prod(input_shape))
    train_matrix = _as_matrix(train_array, input_dim, "train")
    val_matrix = None
    if validation is not None and len(validation) > 0:
        val_matrix = _as_matrix(validation, input_dim, "validation")

    network = network or build_autoencoder(input_dim, hidden, bottleneck, seed)
    best, history = train_reconstruction(
        network, train_matrix, val_matrix, epochs=epochs, batch_size=batch_size, step=step, seed=seed
    )
    return AutoencoderModel(best, input_shape, class_name, history)


def autoencoder_score(model: AutoencoderModel, x: np.ndarray) -> float:
    return model.score(x)


# --- Deep one-class -------------------------------------------------------

class DeepOneClassModel(AnomalyDetector):
    """Squared norm of whitened backbone features: ||W phi(x)||^2"""

    kind = "deep"

    def __init__(self, backbone: LayerStack, whitening: np.ndarray, lam: float = 0.0,
                 input_shape: Optional[Sequence[int]] = None, class_name: str = ""):
        super().__init__(input_shape or (backbone.input_dim,), class_name)
        validate_backbone(backbone.layers)
        if backbone.input_dim != self.input_dim:
            raise ShapeError(f"backbone expects {backbone.input_dim} inputs, samples have {self.input_dim}")
        self.backbone = backbone
        self.lam = lam
        head = Linear(whitening)
        width = backbone.output_dim
        self._model = NeuralizedModel(
            list(backbone.layers) + [head, SquaredDistance(np.zeros((1, width)))],
            self.input_shape, self.kind, class_name,
        )

    @property
    def whitening(self) -> np.ndarray:
        return self._model.layers[len(self.backbone.layers)].weights

    def features(self, samples) -> np.ndarray:
        return self.backbone(_as_matrix(samples, self.input_dim, "feature"))

    def neuralize(self, x: Optional[np.ndarray] = None) -> NeuralizedModel:
        return self._model


def default_lambda_grid(eigenvalues: np.ndarray) -> List[float]:
    """lambda = 0 plus 10^i times the mean eigenvalue of the feature second moment"""
    scale = float(np.mean(np.maximum(eigenvalues, 0.0)))
    grid = [0.0]
    if scale > 0:
        grid += [10.0 ** i * scale for i in config.LAMBDA_GRID_EXPONENTS]
    return grid


def fit_deep_one_class(backbone: LayerStack, train, validation, validation_labels: Sequence[int],
                       lambda_grid: Optional[Sequence[float]] = None,
                       input_shape: Optional[Sequence[int]] = None,
                       class_name: str = "") -> DeepOneClassModel:
    """
    Whiten frozen backbone features, choosing the ridge that maximizes validation ROC.

    Args:
        backbone: Dense Linear/ReLU feature extractor
        train: Inlier training samples
        validation: Validation samples containing inliers and outliers
        validation_labels: 0 for inliers, 1 for outliers
        lambda_grid: Ridge candidates; derived from the feature spectrum if omitted
        input_shape: Per-sample shape; defaults to the flattened width
        class_name: Class the model is fitted on

    Returns:
        DeepOneClassModel with W = (S + lambda I)^(-1/2)
    """
    validate_backbone(backbone.layers)
    train_array = np.asarray(train, dtype=np.float64)
    if train_array.size == 0:
        raise DatasetError("train split is empty")
    input_shape = tuple(input_shape or train_array.shape[1:])
    labels = np.asarray(validation_labels)
    if len(labels) == 0 or len(np.unique(labels)) != 2:
        raise DatasetError("deep model tuning needs validation inliers and outliers")

    train_features = backbone(_as_matrix(train_array, backbone.input_dim, "train"))
    val_features = backbone(_as_matrix(validation, backbone.input_dim, "validation"))
    if len(val_features) != len(labels):
        raise DatasetError(f"{len(val_features)} validation samples for {len(labels)} labels")

    second_moment = feature_covariance(train_features)
    eigenvalues, eigenvectors = jacobi_eigh(
        second_moment, config.JACOBI_TOLERANCE, config.JACOBI_MAX_SWEEPS
    )
    eigenvalues = np.maximum(eigenvalues, 0.0)
    grid = sorted(lambda_grid) if lambda_grid is not None else default_lambda_grid(eigenvalues)

    best: Optional[Tuple[float, np.ndarray]] = None
    best_roc = -np.inf
    for lam in grid:
        try:
            whitening = ridge_whitening(eigenvalues, eigenvectors, lam)
        except NumericalError:
            logger.warning("Skipping lambda %.6g: whitening is singular", lam)
            continue
        projected = val_features @ whitening.T
        roc = roc_auc(np.sum(projected * projected, axis=1), labels)
        logger.debug("Deep lambda %.6g: validation ROC %.4f", lam, roc)
        if roc > best_roc:
            best, best_roc = (lam, whitening), roc
    if best is None:
        raise NumericalError("no lambda in the grid gives a non-singular whitening")

    lam, whitening = best
    logger.info("Selected lambda %.6g (validation ROC %.4f) for class %s", lam, best_roc, class_name)
    return DeepOneClassModel(backbone, whitening, lam, input_shape, class_name)


def deep_score(model: DeepOneClassModel, x: np.ndarray) -> float:
    return model.score(x)


# --- Bagging --------------------------------------------------------------

def standardize_scores(scores: Sequence[float]) -> Standardizer:
    """Mean and population standard deviation of training scores"""
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if values.size < 2:
        raise DegenerateScoreError("degenerate score distribution: fewer than two scores")
    mean = float(np.mean(values))
    std = float(np.std(values))
    if not std > 1e-12:
        raise DegenerateScoreError(f"degenerate score distribution (std={std})")
    return Standardizer(mean=mean, std=std)


class BaggedModel(AnomalyDetector):
    """Average of standardized member scores"""

    kind = "bag"

    def __init__(self, members: Sequence[AnomalyDetector], standardizers: Sequence[Standardizer],
                 class_name: str = ""):
        if not members or len(members) != len(standardizers):
            raise ValueError("a bag needs one standardizer per member")
        shapes = {member.input_shape for member in members}
        if len(shapes) != 1:
            raise ShapeError(f"bag members disagree on input shape: {sorted(shapes)}")
        super().__init__(members[0].input_shape, class_name or members[0].class_name)
        self.members = list(members)
        self.standardizers = list(standardizers)
        self.pool = AveragePool(len(members))

    def standardized_scores(self, x: np.ndarray) -> np.ndarray:
        return np.array([
            (member.score(x) - s.mean) / s.std for member, s in zip(self.members, self.standardizers)
        ])

    def neuralize(self, x: Optional[np.ndarray] = None) -> NeuralizedModel:
        """
        Top pooling stage over the standardized member scores.

        The full network is each member stack, then the affine map (o - mean) / std,
        then this pool. The member stacks differ per sample (autoencoder templates),
        so relevance.explain_bagged composes the member explanations instead of
        walking one stack.
        """
        return NeuralizedModel([self.pool], (len(self.members),), self.kind, self.class_name)

    def score(self, x: np.ndarray) -> float:
        return average_pool_forward(self.pool, self.standardized_scores(x))


def kde_leave_one_out_scores(model: KdeModel) -> np.ndarray:
    """Score of each training point against the other N - 1 points"""
    points = model.training_points
    if len(points) < 2:
        raise DegenerateScoreError("degenerate score distribution: leave-one-out needs two training points")
    d = np.array([np.sum((x - points) ** 2, axis=1) for x in points])
    np.fill_diagonal(d, np.inf)
    return -logsumexp(-model.gamma * d, axis=1) / model.gamma


def training_scores(member: AnomalyDetector, train) -> np.ndarray:
    """
    Scores of the training split as used for standardization.

    A KDE fitted on these very points would match each one against itself,
    so its scores are taken leave-one-out.
    """
    matrix = _as_matrix(train, member.input_dim, "train")
    if isinstance(member, KdeModel):
        points = member.training_points
        # Weight files store float32, so a reloaded KDE matches its split only approximately
        if points.shape == matrix.shape and np.allclose(points, matrix, rtol=1e-6, atol=1e-6):
            return kde_leave_one_out_scores(member)
    return member.score_batch(matrix)


def fit_bag(members: Sequence[AnomalyDetector], train, class_name: str = "") -> BaggedModel:
    """Standardize each fitted member on its training scores"""
    standardizers = []
    for member in members:
        standardizer = standardize_scores(training_scores(member, train))
        logger.info("Bag member %s: mean %.6g std %.6g", member.kind, standardizer.mean, standardizer.std)
        standardizers.append(standardizer)
    return BaggedModel(members, standardizers, class_name)


def bag_score(bag: BaggedModel, x: np.ndarray) -> float:
    return bag.score(x)


# --- Persistence ----------------------------------------------------------

def _envelope(detector: AnomalyDetector, **fields: Any) -> DetectorEnvelope:
    return DetectorEnvelope(
        kind=detector.kind, class_name=detector.class_name,
        input_shape=list(detector.input_shape), **fields,
    )


def save_detector(detector: AnomalyDetector, directory: Union[str, Path]) -> List[Path]:
    """Write model.hlw and model.json (bags write one subdirectory per member)"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    if isinstance(detector, BaggedModel):
        members = []
        for index, (member, standardizer) in enumerate(zip(detector.members, detector.standardizers)):
            name = f"member_{index}_{member.kind}"
            written += save_detector(member, directory / name)
            members.append(BagMember(path=name, standardizer=standardizer))
        envelope = _envelope(detector, weights=None, members=members)
    elif isinstance(detector, KdeModel):
        save_layers(directory / WEIGHTS_FILE, detector.neuralize().layers)
        envelope = _envelope(detector, gamma=detector.gamma)
    elif isinstance(detector, AutoencoderModel):
        save_layers(directory / WEIGHTS_FILE, detector.network.layers)
        history = detector.history
        envelope = _envelope(detector, training={
            "epochs": len(history.train_loss), "best_epoch": history.best_epoch,
            "best_loss": history.best_loss,
        })
    elif isinstance(detector, DeepOneClassModel):
        layers = detector.neuralize().layers[:-1]
        save_layers(directory / WEIGHTS_FILE, layers)
        envelope = _envelope(detector, lam=detector.lam, backbone_layers=len(detector.backbone.layers))
    else:
        raise ModelFormatError(f"cannot save detector of type {type(detector).__name__}")

    if envelope.weights:
        written.append(directory / WEIGHTS_FILE)
    (directory / ENVELOPE_FILE).write_text(envelope.model_dump_json(by_alias=True, indent=2))
    written.append(directory / ENVELOPE_FILE)
    return written


def read_envelope(directory: Union[str, Path]) -> DetectorEnvelope:
    path = Path(directory) / ENVELOPE_FILE
    if not path.exists():
        raise ModelFormatError(f"no {ENVELOPE_FILE} in {directory}")
    try:
        return DetectorEnvelope.model_validate_json(path.read_text())
    except ValidationError as e:
        raise ModelFormatError(f"{path}: {e}") from e


def load_detector(directory: Union[str, Path]) -> AnomalyDetector:
    """Inverse of save_detector; weights come back widened to float64"""
    directory = Path(directory)
    envelope = read_envelope(directory)
    shape = tuple(envelope.input_shape)

    if envelope.kind == "bag":
        members = [load_detector(directory / m.path) for m in envelope.members]
        return BaggedModel(members, [m.standardizer for m in envelope.members], envelope.class_name)

    layers = load_layers(directory / (envelope.weights or WEIGHTS_FILE))
    if envelope.kind == "kde":
        if len(layers) != 2 or not isinstance(layers[0], SquaredDistance) \
                or not isinstance(layers[1], NegLogSumExp):
            raise ModelFormatError(f"{directory}: KDE weights must be sqdist followed by neglse")
        return KdeModel(layers[0].templates, layers[1].gamma, shape, envelope.class_name)
    if envelope.kind == "autoencoder":
        if any(not isinstance(layer, (Linear, ReLU)) for layer in layers):
            raise ModelFormatError(f"{directory}: autoencoder weights must be linear/relu layers")
        return AutoencoderModel(LayerStack(layers, int(np.prod(shape))), shape, envelope.class_name)
    if envelope.kind == "deep":
        count = envelope.backbone_layers if envelope.backbone_layers is not None else len(layers) - 1
        if count != len(layers) - 1 or not isinstance(layers[-1], Linear):
            raise ModelFormatError(f"{directory}: deep weights must be a backbone plus one linear layer")
        backbone = LayerStack(layers[:count], int(np.prod(shape)))
        return DeepOneClassModel(backbone, layers[-1].weights, envelope.lam or 0.0, shape, envelope.class_name)
    raise ModelFormatError(f"{directory}: unknown detector kind {envelope.kind}")


def load_backbone(path: Union[str, Path], input_dim: int) -> LayerStack:
    """Read a frozen Linear/ReLU feature extractor from an HLW1 file"""
    layers = load_layers(path)
    validate_backbone(layers)
    return LayerStack(layers, input_dim)


def describe(detector: AnomalyDetector) -> Dict[str, Any]:
    """Short summary used in run metadata and logs"""
    info: Dict[str, Any] = {"kind": detector.kind, "class": detector.class_name,
                            "input_shape": list(detector.input_shape)}
    if isinstance(detector, KdeModel):
        info["gamma"] = detector.gamma
    elif isinstance(detector, DeepOneClassModel):
        info["lambda"] = detector.lam
    elif isinstance(detector, BaggedModel):
        info["members"] = [m.kind for m in detector.members]
    return info
