"""
Layer-wise relevance propagation for neuralized anomaly detectors.

Each rule takes the relevance of a layer's outputs together with the
activations recorded at its input and returns the relevance of those inputs.
`explain` walks a detector's layer stack backwards from the outlier score.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import config
from errors import ModelFormatError, NumericalError, RelevanceError, ShapeError
from models import LrpConfig
from neural_network import (
    AveragePool,
    Linear,
    NegLogSumExp,
    NeuralizedModel,
    ReLU,
    SquaredDistance,
    average_pool_forward,
    model_forward,
)

logger = logging.getLogger(__name__)


@dataclass
class Heatmap:
    """Pixel-wise relevance shaped like the model input"""
    values: np.ndarray
    detector_kind: str = ""
    sample_id: str = ""
    score: float = 0.0  # The explained outlier score o(x)

    @property
    def shape(self):
        return self.values.shape

    def total(self) -> float:
        return float(np.sum(self.values))


def default_lrp_config() -> LrpConfig:
    return LrpConfig(gamma=config.LRP_GAMMA, epsilon=config.LRP_EPSILON)


def stabilize(z: np.ndarray, epsilon: float) -> np.ndarray:
    """Push denominators with |z| < epsilon away from zero, keeping their sign (0 counts as +)"""
    z = np.asarray(z, dtype=np.float64)
    sign = np.where(z >= 0, 1.0, -1.0)
    return np.where(np.abs(z) < epsilon, z + epsilon * sign, z)


def propagate_average_pool(relevance_out: float, a: np.ndarray,
                           epsilon: float = config.LRP_EPSILON) -> np.ndarray:
    """R_j = R_out * a_j / sum_j' a_j'"""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    return a * (relevance_out / stabilize(np.sum(a), epsilon))


def softargmin(d: np.ndarray, gamma: float) -> np.ndarray:
    """exp(-gamma d_j) / sum_j' exp(-gamma d_j'), shifted by the minimum"""
    d = np.asarray(d, dtype=np.float64).reshape(-1)
    weights = np.exp(-gamma * (d - d.min()))
    return weights / weights.sum()


def propagate_neg_lse(relevance_out: float, d: np.ndarray, gamma: float) -> np.ndarray:
    """Redistribute a soft-min pool's relevance with softargmin weights"""
    if gamma <= 0:
        raise ValueError(f"kernel stiffness must be positive, got {gamma}")
    return softargmin(d, gamma) * relevance_out


def propagate_squared_distance(relevance: np.ndarray, a: np.ndarray,
                               templates: np.ndarray) -> np.ndarray:
    """
    Second-order rule: R_j = sum_k c_k (a_j - mu_jk)^2 with c_k = R_k / ||a - mu_k||^2.

    Args:
        relevance: Relevance of the K distance neurons
        a: Layer input of shape (in,)
        templates: Templates of shape (K, in)

    Returns:
        Relevance over the input dimensions
    """
    relevance = np.asarray(relevance, dtype=np.float64).reshape(-1)
    templates = np.atleast_2d(templates)
    if relevance.shape[0] != templates.shape[0]:
        raise ShapeError(f"{relevance.shape[0]} relevances for {templates.shape[0]} templates")
    squares = (a[None, :] - templates) ** 2
    distances = squares.sum(axis=1)
    undefined = (distances == 0.0) & (relevance != 0.0)
    if np.any(undefined):
        k = int(np.flatnonzero(undefined)[0])
        raise RelevanceError(f"relevance {relevance[k]} on template {k} at zero distance")
    coefficients = np.divide(relevance, distances, out=np.zeros_like(relevance), where=distances > 0)
    return coefficients @ squares


def propagate_whitening_transition(relevance: np.ndarray, a: np.ndarray, weights: np.ndarray,
                                   epsilon: float = config.LRP_EPSILON) -> np.ndarray:
    """Ratio rule R_j = sum_k a_j w_jk / (sum_j' a_j' w_j'k) R_k; weights stored as (K, in)"""
    relevance = np.asarray(relevance, dtype=np.float64).reshape(-1)
    weights = np.atleast_2d(weights)
    z = weights @ a
    return a * ((relevance / stabilize(z, epsilon)) @ weights)


def propagate_linear_relu_gamma(relevance: np.ndarray, a: np.ndarray, weights: np.ndarray,
                                lrp: Optional[LrpConfig] = None) -> np.ndarray:
    """Gamma rule: like the ratio rule with weights w + gamma * max(0, w)"""
    lrp = lrp or default_lrp_config()
    weights = np.atleast_2d(weights)
    boosted = weights + lrp.gamma * np.maximum(weights, 0.0)
    return propagate_whitening_transition(relevance, a, boosted, lrp.epsilon)


def propagate_model(model: NeuralizedModel, x: np.ndarray,
                    lrp: Optional[LrpConfig] = None) -> tuple:
    """Forward pass followed by the backward relevance pass; returns (score, input relevance)"""
    lrp = lrp or default_lrp_config()
    score, trace = model_forward(model, x)
    layers = model.layers
    relevance = np.array([score])

    for index in range(len(layers) - 1, -1, -1):
        layer = layers[index]
        a = trace.inputs[index]
        if isinstance(layer, AveragePool):
            relevance = propagate_average_pool(float(relevance.sum()), a, lrp.epsilon)
        elif isinstance(layer, NegLogSumExp):
            relevance = propagate_neg_lse(float(relevance.sum()), a, layer.gamma)
        elif isinstance(layer, SquaredDistance):
            relevance = propagate_squared_distance(relevance, a, layer.templates)
        elif isinstance(layer, ReLU):
            continue
        elif isinstance(layer, Linear):
            upper = layers[index + 1] if index + 1 < len(layers) else None
            if isinstance(upper, SquaredDistance):
                relevance = propagate_whitening_transition(relevance, a, layer.weights, lrp.epsilon)
            elif isinstance(upper, ReLU):
                relevance = propagate_linear_relu_gamma(relevance, a, layer.weights, lrp)
            else:
                raise ModelFormatError(f"no relevance rule for a linear layer at position {index}")
        else:
            raise ModelFormatError(f"no relevance rule for {type(layer).__name__}")

    if not np.all(np.isfinite(relevance)):
        raise NumericalError("relevance pass produced non-finite values")
    return score, relevance.reshape(model.input_shape)


def explain(detector, x: np.ndarray, lrp: Optional[LrpConfig] = None,
            sample_id: str = "") -> Heatmap:
    """
    Pixel-wise explanation of a detector's outlier score.

    Args:
        detector: Any fitted detector from detectors.py
        x: Sample shaped like the detector input
        lrp: Rule parameters; defaults come from config
        sample_id: Identifier carried on the heatmap

    Returns:
        Heatmap whose values sum to the outlier score (for a bag, its positive part)
    """
    if detector.kind == "bag":
        return explain_bagged(detector, x, lrp, sample_id)
    score, values = propagate_model(detector.neuralize(x), x, lrp)
    return Heatmap(values=values, detector_kind=detector.kind, sample_id=sample_id, score=score)


def explain_bagged(bag, x: np.ndarray, lrp: Optional[LrpConfig] = None,
                   sample_id: str = "") -> Heatmap:
    """
    Explanation of a bag of standardized detectors.

    The pool passes max(0, z_k) / K to member k, where z_k is its standardized
    score; the offset -mean/std is absorbed and members at or below their
    training mean receive nothing. Each member heatmap is rescaled to its
    share, so the heatmap sums to the positive part of the pool and equals
    the bag score whenever no member is negative.
    """
    lrp = lrp or default_lrp_config()
    member_maps = [explain(member, x, lrp, sample_id) for member in bag.members]
    standardized = np.array([
        (m.score - s.mean) / s.std for m, s in zip(member_maps, bag.standardizers)
    ])
    bag_score = average_pool_forward(bag.pool, standardized)

    shares = np.maximum(standardized, 0.0) / bag.pool.size
    values = np.zeros(member_maps[0].values.shape)
    for member_map, share in zip(member_maps, shares):
        if share > 0.0:
            values = values + member_map.values * (share / stabilize(member_map.score, lrp.epsilon))
    if not np.any(shares > 0.0):
        logger.debug("No member of the bag scores above its training mean; heatmap is zero")
    return Heatmap(values=values, detector_kind="bag", sample_id=sample_id, score=bag_score)
